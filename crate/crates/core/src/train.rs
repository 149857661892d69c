//! Training: noised-batch construction, the weighted base + Fourier loss,
//! Adam updates and the epoch loop with frozen-draw validation and early
//! stopping.

use std::time::Instant;

use ndarray::Array2;
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamGrads, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::features::ReconstructedSample;
use crate::net::{DenoiserNet, ParamStore};
use crate::schedule::{forward_closed_form, standard_normal, DiffusionSchedule};
use crate::seed::{derive_rng, purpose};

/// Samples per parallel work unit. Fixed so gradient summation order does
/// not depend on the thread count.
const CHUNK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    /// Parameters and optimizer moments are rounded to f32 after every
    /// update, so checkpoints hold them exactly.
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Non-improving validation epochs tolerated before stopping.
    pub patience: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Derived from the run's root seed, never read from files.
    #[serde(skip)]
    pub seed: u64,
    pub optimizer: AdamConfig,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            batch_size: 128,
            max_epochs: 100,
            patience: 10,
            lambda1: 1.0,
            lambda2: 0.01,
            seed: 0,
            optimizer: AdamConfig::default(),
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size and max_epochs must be positive".into()));
        }
        let (l1, l2) = (self.lambda1, self.lambda2);
        if !(l1.is_finite() && l2.is_finite() && l1 >= 0.0 && l2 >= 0.0 && l1 + l2 > 0.0) {
            return Err(Error::Config(format!(
                "loss weights ({l1}, {l2}) must be non-negative with a positive sum"
            )));
        }
        let o = &self.optimizer;
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return Err(Error::Config(format!("invalid Adam settings {o:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub base: f64,
    pub fourier: f64,
    pub weighted_total: f64,
}

impl LossTerms {
    fn mean(items: &[LossTerms]) -> LossTerms {
        let n = items.len().max(1) as f64;
        let mut out = LossTerms::default();
        for t in items {
            out.base += t.base;
            out.fourier += t.fourier;
            out.weighted_total += t.weighted_total;
        }
        out.base /= n;
        out.fourier /= n;
        out.weighted_total /= n;
        out
    }
}

fn check_shapes(a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// Mean squared error over all elements.
pub fn base_loss(x0: &Array2<f64>, x0_hat: &Array2<f64>) -> Result<f64> {
    check_shapes(x0, x0_hat)?;
    Ok(x0.iter().zip(x0_hat).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / x0.len() as f64)
}

/// Mean squared magnitude of the unnormalized DFT of the difference,
/// taken along each row (channels x time layout).
pub fn fourier_loss(x0: &Array2<f64>, x0_hat: &Array2<f64>) -> Result<f64> {
    check_shapes(x0, x0_hat)?;
    let m = x0.ncols();
    let fft = FftPlanner::new().plan_fft_forward(m);
    let mut total = 0.0;
    let mut buf = vec![Complex64::new(0.0, 0.0); m];
    for (ra, rb) in x0.rows().into_iter().zip(x0_hat.rows()) {
        for (dst, (a, b)) in buf.iter_mut().zip(ra.iter().zip(rb.iter())) {
            *dst = Complex64::new(a - b, 0.0);
        }
        fft.process(&mut buf);
        total += buf.iter().map(|c| c.norm_sqr()).sum::<f64>();
    }
    Ok(total / x0.len() as f64)
}

/// Loss terms for one sample at step `k`.
pub fn loss_terms(
    x0: &Array2<f64>,
    x0_hat: &Array2<f64>,
    k: usize,
    schedule: &DiffusionSchedule,
    cfg: &TrainConfig,
) -> Result<LossTerms> {
    let base = base_loss(x0, x0_hat)?;
    let fourier = fourier_loss(x0, x0_hat)?;
    Ok(LossTerms {
        base,
        fourier,
        weighted_total: schedule.loss_weight(k) * (cfg.lambda1 * base + cfg.lambda2 * fourier),
    })
}

/// Real and imaginary parts of the forward DFT as `M x M` matrices.
#[derive(Debug, Clone)]
pub struct DftBasis {
    pub re: Tensor,
    pub im: Tensor,
}

impl DftBasis {
    pub fn new(m: usize) -> Self {
        let angle = |f: usize, t: usize| -2.0 * std::f64::consts::PI * ((f * t) % m) as f64 / m as f64;
        Self {
            re: Tensor::from_shape_fn((m, m), |(f, t)| angle(f, t).cos()),
            im: Tensor::from_shape_fn((m, m), |(f, t)| angle(f, t).sin()),
        }
    }

    pub fn len(&self) -> usize {
        self.re.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }
}

/// Vars of a recorded per-sample objective.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub base: Var,
    pub fourier: Var,
    pub total: Var,
}

/// Records `w_k (lambda1 base + lambda2 fourier)` on `tape` for a
/// time x channels prediction against a channels x time target.
pub fn record_loss(
    tape: &mut Tape,
    pred: Var,
    x0: &Array2<f64>,
    weight: f64,
    basis: &DftBasis,
    cfg: &TrainConfig,
) -> Result<LossVars> {
    let target = x0.t().to_owned();
    if tape.value(pred).dim() != target.dim() || basis.len() != target.nrows() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?} (basis {})",
            tape.value(pred).dim(),
            target.dim(),
            basis.len()
        )));
    }
    let t = tape.input(target);
    let diff = tape.sub(pred, t);
    let base = tape.mean_square(diff);
    let re = tape.input(basis.re.clone());
    let im = tape.input(basis.im.clone());
    let fre = tape.matmul(re, diff);
    let fim = tape.matmul(im, diff);
    let fre = tape.mean_square(fre);
    let fim = tape.mean_square(fim);
    let fourier = tape.add(fre, fim);
    let a = tape.scale(base, cfg.lambda1);
    let b = tape.scale(fourier, cfg.lambda2);
    let sum = tape.add(a, b);
    let total = tape.scale(sum, weight);
    Ok(LossVars { base, fourier, total })
}

/// Adam with per-parameter moment buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let zeros = || store.values().iter().map(|p| Tensor::zeros(p.dim())).collect();
        Self {
            cfg,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies the accumulated gradients in `store`.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64, precision: Precision) {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for id in 0..store.len() {
            let g = store.grad(id).clone();
            let m = &mut self.m[id];
            let v = &mut self.v[id];
            ndarray::Zip::from(&mut *m).and(&mut *v).and(&g).for_each(|m, v, &g| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
            });
            let p = store.value_mut(id);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p -= lr * (m / c1) / ((v / c2).sqrt() + eps);
            });
            if precision == Precision::F32 {
                round_f32(store.value_mut(id));
                round_f32(&mut self.m[id]);
                round_f32(&mut self.v[id]);
            }
        }
    }
}

pub fn round_f32(t: &mut Tensor) {
    t.mapv_inplace(|v| v as f32 as f64);
}

pub fn round_params(store: &mut ParamStore) {
    for id in 0..store.len() {
        round_f32(store.value_mut(id));
    }
}

/// Per-sample draw of a noising step.
#[derive(Debug, Clone)]
pub struct StepDraw {
    pub k: usize,
    pub eps: Array2<f64>,
    pub dropout_seed: u64,
}

impl StepDraw {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R, shape: (usize, usize), schedule: &DiffusionSchedule) -> Self {
        let k = rng.random_range(1..=schedule.k_steps());
        let eps = standard_normal(rng, shape);
        let dropout_seed = rng.next_u64();
        Self { k, eps, dropout_seed }
    }
}

#[derive(Debug, Clone)]
pub struct StepReport {
    /// Batch means of each term.
    pub terms: LossTerms,
    pub per_sample: Vec<(usize, LossTerms)>,
    pub grad_norm: f64,
}

/// Loss terms and parameter gradients of `mean over batch` for the given
/// draws. Gradients are accumulated into the store (after zeroing).
pub fn batch_gradients(
    net: &mut DenoiserNet,
    batch: &[&ReconstructedSample],
    draws: &[StepDraw],
    schedule: &DiffusionSchedule,
    basis: &DftBasis,
    cfg: &TrainConfig,
    dropout: bool,
) -> Result<Vec<(usize, LossTerms)>> {
    if batch.is_empty() {
        return Err(Error::Data("empty training batch".into()));
    }
    let n_params = net.params().len();
    let seed = 1.0 / batch.len() as f64;
    let frozen: &DenoiserNet = net;
    let chunks: Vec<Result<(Vec<(usize, LossTerms)>, ParamGrads)>> = batch
        .par_chunks(CHUNK)
        .zip(draws.par_chunks(CHUNK))
        .map(|(samples, draws)| {
            let mut acc: Option<ParamGrads> = None;
            let mut terms = Vec::with_capacity(samples.len());
            for (sample, draw) in samples.iter().zip(draws) {
                let x0 = &sample.channels;
                let xk = forward_closed_form(x0, draw.k, &draw.eps, schedule)?;
                let mut tape = Tape::new();
                let mut rng = ChaCha8Rng::seed_from_u64(draw.dropout_seed);
                let rng_ref: Option<&mut dyn RngCore> = if dropout { Some(&mut rng) } else { None };
                let pred = frozen.forward(&mut tape, &xk, draw.k, rng_ref)?;
                let w = schedule.loss_weight(draw.k);
                let vars = record_loss(&mut tape, pred, x0, w, basis, cfg)?;
                terms.push((
                    draw.k,
                    LossTerms {
                        base: tape.scalar(vars.base),
                        fourier: tape.scalar(vars.fourier),
                        weighted_total: tape.scalar(vars.total),
                    },
                ));
                let g = tape.backward(vars.total, seed, n_params)?;
                acc = Some(match acc {
                    None => g,
                    Some(mut a) => {
                        a.add_assign(&g);
                        a
                    }
                });
            }
            Ok((terms, acc.expect("non-empty chunk")))
        })
        .collect();
    let store = net.params_mut();
    store.zero_grad();
    let mut out = Vec::with_capacity(batch.len());
    for chunk in chunks {
        let (terms, grads) = chunk?;
        store.accumulate(&grads, 1.0);
        out.extend(terms);
    }
    Ok(out)
}

/// One optimizer update on `batch` following the draws taken from `rng`.
pub fn training_step<R: Rng + ?Sized>(
    net: &mut DenoiserNet,
    adam: &mut Adam,
    batch: &[&ReconstructedSample],
    schedule: &DiffusionSchedule,
    basis: &DftBasis,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<StepReport> {
    let draws: Vec<StepDraw> = batch
        .iter()
        .map(|s| StepDraw::draw(rng, s.channels.dim(), schedule))
        .collect();
    let per_sample = batch_gradients(net, batch, &draws, schedule, basis, cfg, true)?;
    let terms = LossTerms::mean(&per_sample.iter().map(|(_, t)| *t).collect::<Vec<_>>());
    let grad_norm = net.params().grad_norm();
    if !terms.weighted_total.is_finite() || !grad_norm.is_finite() {
        let ks: Vec<usize> = per_sample.iter().map(|(k, _)| *k).collect();
        return Err(Error::Numeric(format!(
            "non-finite loss {:?} (grad norm {grad_norm}) at steps {ks:?}",
            terms
        )));
    }
    adam.step(net.params_mut(), cfg.lr, cfg.precision);
    Ok(StepReport {
        terms,
        per_sample,
        grad_norm,
    })
}

/// Mean loss on `samples` with draws frozen by `(seed, sample index)` and
/// dropout off.
pub fn validation_loss(
    net: &DenoiserNet,
    samples: &[ReconstructedSample],
    schedule: &DiffusionSchedule,
    cfg: &TrainConfig,
) -> Result<LossTerms> {
    if samples.is_empty() {
        return Err(Error::Data("empty validation set".into()));
    }
    let terms: Vec<LossTerms> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = derive_rng(cfg.seed, &[purpose::VALIDATION, i as u64]);
            let draw = StepDraw::draw(&mut rng, s.channels.dim(), schedule);
            let xk = forward_closed_form(&s.channels, draw.k, &draw.eps, schedule)?;
            let x0_hat = net.denoise(&xk, draw.k)?;
            loss_terms(&s.channels, &x0_hat, draw.k, schedule, cfg)
        })
        .collect::<Result<_>>()?;
    Ok(LossTerms::mean(&terms))
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub base: f64,
    pub fourier: f64,
    pub weighted_total: f64,
    pub grad_norm: f64,
    pub wall_ms: u64,
}

/// Progress carried across epochs (and through checkpoints).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub best_val: Option<f64>,
    pub best_epoch: usize,
    pub epochs_since_best: usize,
    pub stopped: bool,
}

/// Owns the network, optimizer and progress of one training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub net: DenoiserNet,
    pub adam: Adam,
    pub state: TrainState,
    /// Parameter values at the best validation epoch.
    pub best: Option<Vec<Tensor>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpochEvent {
    Improved,
    NotImproved,
}

impl Trainer {
    pub fn new(mut net: DenoiserNet, cfg: &TrainConfig) -> Self {
        if cfg.precision == Precision::F32 {
            round_params(net.params_mut());
        }
        let adam = Adam::new(cfg.optimizer, net.params());
        Self {
            net,
            adam,
            state: TrainState::default(),
            best: None,
        }
    }

    /// Runs one epoch over shuffled `train` and validates. The shuffle and
    /// draws depend only on `(seed, epoch)`, so a resumed run continues
    /// exactly where an uninterrupted one would.
    pub fn run_epoch(
        &mut self,
        train: &[ReconstructedSample],
        val: &[ReconstructedSample],
        schedule: &DiffusionSchedule,
        basis: &DftBasis,
        cfg: &TrainConfig,
    ) -> Result<(EpochRecord, EpochRecord, EpochEvent)> {
        if train.is_empty() {
            return Err(Error::Data("empty training set".into()));
        }
        let epoch = self.state.epoch + 1;
        let started = Instant::now();
        let mut rng = derive_rng(cfg.seed, &[purpose::EPOCH, epoch as u64]);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let snapshot = (self.net.params().values().to_vec(), self.adam.clone());
        let mut reports = Vec::new();
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&ReconstructedSample> = idx.iter().map(|&i| &train[i]).collect();
            match training_step(&mut self.net, &mut self.adam, &batch, schedule, basis, cfg, &mut rng) {
                Ok(r) => reports.push(r),
                Err(e) => {
                    let (values, adam) = snapshot;
                    for (id, v) in values.into_iter().enumerate() {
                        *self.net.params_mut().value_mut(id) = v;
                    }
                    self.adam = adam;
                    return Err(e);
                }
            }
        }
        let n: usize = reports.iter().map(|r| r.per_sample.len()).sum();
        let mut sums = LossTerms::default();
        for r in &reports {
            let w = r.per_sample.len() as f64;
            sums.base += r.terms.base * w;
            sums.fourier += r.terms.fourier * w;
            sums.weighted_total += r.terms.weighted_total * w;
        }
        let grad_norm = reports.iter().map(|r| r.grad_norm).sum::<f64>() / reports.len() as f64;
        let train_ms = started.elapsed().as_millis() as u64;
        let train_rec = EpochRecord {
            epoch,
            split: "train".into(),
            base: sums.base / n as f64,
            fourier: sums.fourier / n as f64,
            weighted_total: sums.weighted_total / n as f64,
            grad_norm,
            wall_ms: train_ms,
        };

        let started = Instant::now();
        let v = validation_loss(&self.net, val, schedule, cfg)?;
        let val_rec = EpochRecord {
            epoch,
            split: "val".into(),
            base: v.base,
            fourier: v.fourier,
            weighted_total: v.weighted_total,
            grad_norm: 0.0,
            wall_ms: started.elapsed().as_millis() as u64,
        };

        self.state.epoch = epoch;
        let event = if self.state.best_val.is_none_or(|b| v.weighted_total < b) {
            self.state.best_val = Some(v.weighted_total);
            self.state.best_epoch = epoch;
            self.state.epochs_since_best = 0;
            self.best = Some(self.net.params().values().to_vec());
            EpochEvent::Improved
        } else {
            self.state.epochs_since_best += 1;
            EpochEvent::NotImproved
        };
        if self.state.epochs_since_best >= cfg.patience || epoch >= cfg.max_epochs {
            self.state.stopped = true;
        }
        Ok((train_rec, val_rec, event))
    }

    /// Trains until early stopping or `max_epochs`. `on_epoch` sees the
    /// trainer after every epoch (for logging and checkpointing).
    pub fn fit(
        &mut self,
        train: &[ReconstructedSample],
        val: &[ReconstructedSample],
        schedule: &DiffusionSchedule,
        cfg: &TrainConfig,
        mut on_epoch: impl FnMut(&Trainer, &EpochRecord, &EpochRecord, EpochEvent) -> Result<()>,
    ) -> Result<Vec<EpochRecord>> {
        cfg.validate()?;
        if val.is_empty() {
            return Err(Error::Data("empty validation set".into()));
        }
        let m = train.first().map(|s| s.len()).unwrap_or(0);
        let basis = DftBasis::new(m);
        let mut log = Vec::new();
        while !self.state.stopped {
            let (t, v, event) = self.run_epoch(train, val, schedule, &basis, cfg)?;
            on_epoch(self, &t, &v, event)?;
            log.push(t);
            log.push(v);
        }
        Ok(log)
    }

    /// The network with its best-validation parameters.
    pub fn best_net(&self) -> DenoiserNet {
        let mut net = self.net.clone();
        if let Some(best) = &self.best {
            for (id, v) in best.iter().enumerate() {
                *net.params_mut().value_mut(id) = v.clone();
            }
        }
        net
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NetConfig;
    use crate::schedule::ScheduleConfig;
    use ndarray::arr2;

    fn naive_dft_loss(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let m = a.ncols();
        let mut total = 0.0;
        for c in 0..a.nrows() {
            for f in 0..m {
                let (mut re, mut im) = (0.0, 0.0);
                for t in 0..m {
                    let d = a[[c, t]] - b[[c, t]];
                    let ang = -2.0 * std::f64::consts::PI * (f * t) as f64 / m as f64;
                    re += d * ang.cos();
                    im += d * ang.sin();
                }
                total += re * re + im * im;
            }
        }
        total / a.len() as f64
    }

    fn signal(c: usize, m: usize, phase: f64) -> Array2<f64> {
        Array2::from_shape_fn((c, m), |(i, t)| {
            ((t as f64 + phase) * 0.4 + i as f64).sin() * 0.5 + 0.1 * i as f64
        })
    }

    fn schedule() -> DiffusionSchedule {
        ScheduleConfig {
            k_steps: 50,
            sampling_steps: 10,
            ..Default::default()
        }
        .build()
        .unwrap()
    }

    fn tiny_net(c: usize, m: usize) -> DenoiserNet {
        DenoiserNet::new(NetConfig {
            input_channels: c,
            seq_len: m,
            model_dim: 8,
            n_heads: 2,
            feedforward_dim: Some(16),
            dropout: 0.0,
            seed: 3,
            ..Default::default()
        })
        .unwrap()
    }

    fn samples(n: usize, c: usize, m: usize) -> Vec<ReconstructedSample> {
        (0..n)
            .map(|i| ReconstructedSample {
                channels: signal(c, m, i as f64 * 1.3),
                lookback: m - 2,
                horizon: 2,
                time_index: i,
            })
            .collect()
    }

    #[test]
    fn base_loss_fixtures() {
        let z = arr2(&[[0.0, 0.0]]);
        let o = arr2(&[[1.0, 1.0]]);
        assert_eq!(base_loss(&z, &o).unwrap(), 1.0);
        assert_eq!(base_loss(&o, &o).unwrap(), 0.0);
        let a = signal(2, 5, 0.0);
        let b = signal(2, 5, 1.0);
        let l = base_loss(&a, &b).unwrap();
        assert!((base_loss(&(&a * 3.0), &(&b * 3.0)).unwrap() - 9.0 * l).abs() < 1e-12);
        assert!(matches!(base_loss(&a, &z), Err(Error::Shape(_))));
    }

    #[test]
    fn fourier_loss_fixtures() {
        let delta = arr2(&[[1.0, 0.0, 0.0, 0.0]]);
        let zero = Array2::zeros((1, 4));
        assert!((fourier_loss(&delta, &zero).unwrap() - 1.0).abs() < 1e-15);
        let a = signal(3, 9, 0.0);
        assert_eq!(fourier_loss(&a, &a).unwrap(), 0.0);
        let b = signal(3, 9, 0.7);
        assert!((fourier_loss(&a, &b).unwrap() - naive_dft_loss(&a, &b)).abs() < 1e-12);
        // Parseval: unnormalized DFT energy is M times the time-domain energy
        assert!((fourier_loss(&a, &b).unwrap() - 9.0 * base_loss(&a, &b).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn fourier_loss_shift_invariant() {
        let a = signal(2, 8, 0.0);
        let b = signal(2, 8, 2.0);
        let roll = |x: &Array2<f64>, s: usize| Array2::from_shape_fn(x.dim(), |(c, t)| x[[c, (t + s) % x.ncols()]]);
        let l0 = fourier_loss(&a, &b).unwrap();
        let l1 = fourier_loss(&roll(&a, 3), &roll(&b, 3)).unwrap();
        assert!((l0 - l1).abs() < 1e-12);
    }

    #[test]
    fn tape_loss_matches_plain_loss() {
        let cfg = TrainConfig {
            lambda2: 0.37,
            ..Default::default()
        };
        let x0 = signal(3, 7, 0.0);
        let pred = signal(3, 7, 0.9);
        let basis = DftBasis::new(7);
        let mut tape = Tape::new();
        let p = tape.input(pred.t().to_owned());
        let vars = record_loss(&mut tape, p, &x0, 2.5, &basis, &cfg).unwrap();
        let s = schedule();
        let plain_base = base_loss(&x0, &pred).unwrap();
        let plain_f = fourier_loss(&x0, &pred).unwrap();
        assert!((tape.scalar(vars.base) - plain_base).abs() < 1e-12);
        assert!((tape.scalar(vars.fourier) - plain_f).abs() < 1e-10);
        assert!((tape.scalar(vars.total) - 2.5 * (plain_base + 0.37 * plain_f)).abs() < 1e-10);
        let t = loss_terms(&x0, &pred, 5, &s, &cfg).unwrap();
        assert!((t.weighted_total - s.loss_weight(5) * (plain_base + 0.37 * plain_f)).abs() < 1e-12);
    }

    #[test]
    fn oracle_prediction_has_zero_loss() {
        let s = schedule();
        let cfg = TrainConfig::default();
        for k in [1, 17, 50] {
            let x0 = signal(2, 6, k as f64);
            let t = loss_terms(&x0, &x0, k, &s, &cfg).unwrap();
            assert_eq!(t.weighted_total, 0.0);
        }
    }

    #[test]
    fn composite_gradient_decomposes() {
        // grad(total) == w (l1 grad(base) + l2 grad(fourier)), each part
        // obtained by zeroing the other weight
        let s = schedule();
        let batch_data = samples(3, 2, 6);
        let batch: Vec<&ReconstructedSample> = batch_data.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let draws: Vec<StepDraw> = batch
            .iter()
            .map(|b| StepDraw::draw(&mut rng, b.channels.dim(), &s))
            .collect();
        let basis = DftBasis::new(6);
        let grads = |l1: f64, l2: f64| {
            let cfg = TrainConfig {
                lambda1: l1,
                lambda2: l2,
                ..Default::default()
            };
            let mut net = tiny_net(2, 6);
            batch_gradients(&mut net, &batch, &draws, &s, &basis, &cfg, false).unwrap();
            net.params().grads().to_vec()
        };
        let full = grads(1.0, 0.3);
        let base = grads(1.0, 0.0);
        let four = grads(0.0, 1.0);
        for ((f, b), q) in full.iter().zip(&base).zip(&four) {
            for ((f, b), q) in f.iter().zip(b).zip(q) {
                let want = b + 0.3 * q;
                assert!((f - want).abs() <= 1e-9 * (1.0 + want.abs()));
            }
        }
        let cfg0 = TrainConfig {
            lambda2: 0.0,
            ..Default::default()
        };
        let mut net = tiny_net(2, 6);
        let terms = batch_gradients(&mut net, &batch, &draws, &s, &basis, &cfg0, false).unwrap();
        assert!(terms.iter().all(|(_, t)| t.fourier > 0.0));
        assert_eq!(net.params().grads(), base.as_slice());
    }

    #[test]
    fn weighted_total_recomputes_from_draws() {
        let s = schedule();
        let data = samples(5, 2, 6);
        let batch: Vec<&ReconstructedSample> = data.iter().collect();
        let cfg = TrainConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let draws: Vec<StepDraw> = batch
            .iter()
            .map(|b| StepDraw::draw(&mut rng, b.channels.dim(), &s))
            .collect();
        let mut net = tiny_net(2, 6);
        let reference = net.clone();
        let terms = batch_gradients(&mut net, &batch, &draws, &s, &DftBasis::new(6), &cfg, false).unwrap();
        for ((sample, draw), (k, t)) in data.iter().zip(&draws).zip(&terms) {
            assert_eq!(*k, draw.k);
            let xk = forward_closed_form(&sample.channels, draw.k, &draw.eps, &s).unwrap();
            let x0_hat = reference.denoise(&xk, draw.k).unwrap();
            let base = base_loss(&sample.channels, &x0_hat).unwrap();
            let four = naive_dft_loss(&sample.channels, &x0_hat);
            let w = crate::schedule::loss_weight(s.gamma(), s.alpha(draw.k), s.alpha_bar(draw.k), s.beta(draw.k));
            assert!((t.weighted_total - w * (base + 0.01 * four)).abs() < 1e-9);
            // weight forced to one
            assert!((t.weighted_total / w - (base + 0.01 * four)).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let s = schedule();
        let data = samples(4, 2, 6);
        let batch: Vec<&ReconstructedSample> = data.iter().collect();
        let cfg = TrainConfig::default();
        let mut trainer = Trainer::new(tiny_net(2, 6), &cfg);
        let before = trainer.net.params().values().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = training_step(
            &mut trainer.net,
            &mut trainer.adam,
            &batch,
            &s,
            &DftBasis::new(6),
            &TrainConfig { lr: 0.0, ..cfg },
            &mut rng,
        )
        .unwrap();
        assert!(r.grad_norm > 0.0);
        assert_eq!(trainer.net.params().values(), before.as_slice());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.add("w", arr2(&[[1.0, -2.0]]));
        let mut adam = Adam::new(AdamConfig::default(), &store);
        store.zero_grad();
        let g = ParamGrads {
            grads: vec![Some(arr2(&[[0.5, -3.0]]))],
        };
        store.accumulate(&g, 1.0);
        adam.step(&mut store, 0.1, Precision::F64);
        let w = store.value(0);
        assert!((w[[0, 0]] - 0.9).abs() < 1e-6 && (w[[0, 1]] + 1.9).abs() < 1e-6);
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn training_step_is_deterministic() {
        let s = schedule();
        let data = samples(6, 2, 6);
        let batch: Vec<&ReconstructedSample> = data.iter().collect();
        let cfg = TrainConfig {
            lr: 1e-3,
            ..Default::default()
        };
        let run = || {
            let mut trainer = Trainer::new(tiny_net(2, 6), &cfg);
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            (0..3)
                .map(|_| {
                    training_step(
                        &mut trainer.net,
                        &mut trainer.adam,
                        &batch,
                        &s,
                        &DftBasis::new(6),
                        &cfg,
                        &mut rng,
                    )
                    .unwrap()
                    .terms
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn invalid_configs_rejected() {
        for cfg in [
            TrainConfig {
                lr: 0.0,
                ..Default::default()
            },
            TrainConfig {
                lr: -1.0,
                ..Default::default()
            },
            TrainConfig {
                batch_size: 0,
                ..Default::default()
            },
            TrainConfig {
                lambda1: 0.0,
                lambda2: 0.0,
                ..Default::default()
            },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn patience_zero_runs_one_epoch() {
        let s = schedule();
        let data = samples(6, 2, 6);
        let cfg = TrainConfig {
            patience: 0,
            batch_size: 4,
            ..Default::default()
        };
        let mut trainer = Trainer::new(tiny_net(2, 6), &cfg);
        let log = trainer.fit(&data, &data[..2], &s, &cfg, |_, _, _, _| Ok(())).unwrap();
        assert_eq!(trainer.state.epoch, 1);
        assert_eq!(log.len(), 2);
    }

    #[test]
    fn resume_reproduces_next_epoch() {
        let s = schedule();
        let data = samples(8, 2, 6);
        let cfg = TrainConfig {
            lr: 1e-3,
            batch_size: 3,
            max_epochs: 3,
            patience: 5,
            ..Default::default()
        };
        let basis = DftBasis::new(6);
        let mut full = Trainer::new(tiny_net(2, 6), &cfg);
        let mut records = Vec::new();
        for _ in 0..3 {
            records.push(full.run_epoch(&data[..6], &data[6..], &s, &basis, &cfg).unwrap());
        }
        let mut part = Trainer::new(tiny_net(2, 6), &cfg);
        for _ in 0..2 {
            part.run_epoch(&data[..6], &data[6..], &s, &basis, &cfg).unwrap();
        }
        let resumed_state = part.clone();
        let mut resumed = resumed_state;
        let third = resumed.run_epoch(&data[..6], &data[6..], &s, &basis, &cfg).unwrap();
        assert_eq!(third.0.weighted_total, records[2].0.weighted_total);
        assert_eq!(third.1.weighted_total, records[2].1.weighted_total);
        assert_eq!(resumed.net.params().values(), full.net.params().values());
    }
}
