//! Diffusion-process tables and the forward/reverse step formulas.
//!
//! Step indices are 1-based: `k = 1..=k_steps`, with `alpha_bar(0) = 1`.
//! Every function that needs Gaussian draws takes them as arguments.

use ndarray::{Array, Array2, Dimension, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BetaPolicy {
    Linear { lo: f64, hi: f64 },
}

impl Default for BetaPolicy {
    fn default() -> Self {
        BetaPolicy::Linear { lo: 1e-4, hi: 0.02 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub k_steps: usize,
    pub sampling_steps: usize,
    pub beta: BetaPolicy,
    pub gamma: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            k_steps: 500,
            sampling_steps: 200,
            beta: BetaPolicy::default(),
            gamma: 0.01,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<DiffusionSchedule> {
        build_schedule(self.k_steps, self.sampling_steps, self.beta, self.gamma)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    config: ScheduleConfig,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    loss_weights: Vec<f64>,
    sampling_indices: Vec<usize>,
}

/// `w_k = gamma * alpha_k * (1 - alpha_bar_k) / beta_k^2`.
pub fn loss_weight(gamma: f64, alpha: f64, alpha_bar: f64, beta: f64) -> f64 {
    gamma * alpha * (1.0 - alpha_bar) / (beta * beta)
}

/// `count` evenly spaced integers in `[1, k_steps]` including both ends.
pub fn strided_indices(k_steps: usize, count: usize) -> Vec<usize> {
    if count == 1 {
        return vec![k_steps];
    }
    let span = (k_steps - 1) as f64 / (count - 1) as f64;
    (0..count).map(|i| (1.0 + span * i as f64).round() as usize).collect()
}

pub fn build_schedule(
    k_steps: usize,
    sampling_steps: usize,
    beta: BetaPolicy,
    gamma: f64,
) -> Result<DiffusionSchedule> {
    if k_steps == 0 || sampling_steps == 0 || sampling_steps > k_steps {
        return Err(Error::Config(format!(
            "need k_steps >= sampling_steps >= 1, got {k_steps} / {sampling_steps}"
        )));
    }
    if sampling_steps == 1 && k_steps > 1 {
        return Err(Error::Config(
            "a single sampling step cannot visit both k_steps and 1".into(),
        ));
    }
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::Config(format!("gamma must be positive, got {gamma}")));
    }
    let BetaPolicy::Linear { lo, hi } = beta;
    if !(0.0 < lo && lo < hi && hi < 1.0) {
        return Err(Error::Config(format!(
            "linear beta bounds need 0 < lo < hi < 1, got {lo}, {hi}"
        )));
    }
    let betas: Vec<f64> = if k_steps == 1 {
        vec![lo]
    } else {
        (0..k_steps)
            .map(|i| lo + (hi - lo) * i as f64 / (k_steps - 1) as f64)
            .collect()
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(k_steps);
    let mut acc = 1.0;
    for a in &alphas {
        acc *= a;
        alpha_bars.push(acc);
    }
    let loss_weights = (0..k_steps)
        .map(|i| loss_weight(gamma, alphas[i], alpha_bars[i], betas[i]))
        .collect();
    Ok(DiffusionSchedule {
        config: ScheduleConfig {
            k_steps,
            sampling_steps,
            beta,
            gamma,
        },
        betas,
        alphas,
        alpha_bars,
        loss_weights,
        sampling_indices: strided_indices(k_steps, sampling_steps),
    })
}

impl DiffusionSchedule {
    pub fn config(&self) -> &ScheduleConfig {
        &self.config
    }

    pub fn k_steps(&self) -> usize {
        self.config.k_steps
    }

    pub fn gamma(&self) -> f64 {
        self.config.gamma
    }

    fn check(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.k_steps() {
            Err(Error::Index(format!("step {k} outside 1..={}", self.k_steps())))
        } else {
            Ok(())
        }
    }

    pub fn beta(&self, k: usize) -> f64 {
        self.betas[k - 1]
    }

    pub fn alpha(&self, k: usize) -> f64 {
        self.alphas[k - 1]
    }

    pub fn alpha_bar(&self, k: usize) -> f64 {
        if k == 0 {
            1.0
        } else {
            self.alpha_bars[k - 1]
        }
    }

    pub fn loss_weight(&self, k: usize) -> f64 {
        self.loss_weights[k - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn loss_weights(&self) -> &[f64] {
        &self.loss_weights
    }

    /// Increasing; the reverse pass walks it from the back.
    pub fn sampling_indices(&self) -> &[usize] {
        &self.sampling_indices
    }

    /// `(k, k_prev)` pairs visited by the reverse pass, from `k_steps` down
    /// to `(1, 0)`.
    pub fn reverse_pairs(&self) -> Vec<(usize, usize)> {
        let idx = &self.sampling_indices;
        (0..idx.len())
            .rev()
            .map(|i| (idx[i], if i == 0 { 0 } else { idx[i - 1] }))
            .collect()
    }

    /// Variance of `q(x_{k_prev} | x_k, x_0)`.
    pub fn posterior_variance(&self, k: usize, k_prev: usize) -> f64 {
        let ab = self.alpha_bar(k);
        let ab_prev = self.alpha_bar(k_prev);
        let beta_eff = 1.0 - ab / ab_prev;
        beta_eff * (1.0 - ab_prev) / (1.0 - ab)
    }
}

/// `sqrt(alpha_bar_k) x0 + sqrt(1 - alpha_bar_k) eps`.
pub fn forward_closed_form<D: Dimension>(
    x0: &Array<f64, D>,
    k: usize,
    eps: &Array<f64, D>,
    s: &DiffusionSchedule,
) -> Result<Array<f64, D>> {
    if k > s.k_steps() {
        return Err(Error::Index(format!("step {k} outside 0..={}", s.k_steps())));
    }
    if x0.shape() != eps.shape() {
        return Err(Error::Shape(format!("x0 {:?} vs eps {:?}", x0.shape(), eps.shape())));
    }
    let ab = s.alpha_bar(k);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(Zip::from(x0).and(eps).map_collect(|&x, &e| a * x + b * e))
}

/// One transition of the forward chain: `sqrt(alpha_k) x + sqrt(beta_k) eps`.
pub fn forward_step<D: Dimension>(
    x: &Array<f64, D>,
    k: usize,
    eps: &Array<f64, D>,
    s: &DiffusionSchedule,
) -> Result<Array<f64, D>> {
    s.check(k)?;
    let (a, b) = (s.alpha(k).sqrt(), s.beta(k).sqrt());
    Ok(Zip::from(x).and(eps).map_collect(|&x, &e| a * x + b * e))
}

/// Reverse transition from `k` to `k - 1`.
pub fn reverse_step<D: Dimension>(
    xk: &Array<f64, D>,
    x0_hat: &Array<f64, D>,
    k: usize,
    eps_draw: Option<&Array<f64, D>>,
    s: &DiffusionSchedule,
) -> Result<Array<f64, D>> {
    reverse_step_to(xk, x0_hat, k, k.wrapping_sub(1), eps_draw, s)
}

/// Reverse transition from `k` to an earlier index `k_prev`. The denoiser's
/// `x0_hat` is converted to an implied noise estimate, then the mean
/// `(1/sqrt(a)) (x_k - (b / sqrt(1 - alpha_bar_k)) eps_hat)` is formed with
/// `a = alpha_bar_k / alpha_bar_prev` and `b = 1 - a`. For `k_prev = k - 1`
/// these are `alpha_k` and `beta_k`. The added noise uses the posterior
/// variance; no draw is allowed on the final transition to 0.
pub fn reverse_step_to<D: Dimension>(
    xk: &Array<f64, D>,
    x0_hat: &Array<f64, D>,
    k: usize,
    k_prev: usize,
    eps_draw: Option<&Array<f64, D>>,
    s: &DiffusionSchedule,
) -> Result<Array<f64, D>> {
    s.check(k)?;
    if k_prev >= k {
        return Err(Error::Index(format!("reverse step {k} -> {k_prev} does not descend")));
    }
    if xk.shape() != x0_hat.shape() {
        return Err(Error::Shape(format!(
            "x_k {:?} vs x0_hat {:?}",
            xk.shape(),
            x0_hat.shape()
        )));
    }
    let ab = s.alpha_bar(k);
    let ab_prev = s.alpha_bar(k_prev);
    let a_eff = ab / ab_prev;
    let b_eff = 1.0 - a_eff;
    let sqrt_ab = ab.sqrt();
    let sqrt_1m_ab = (1.0 - ab).sqrt();
    let inv_sqrt_a = 1.0 / a_eff.sqrt();
    let coef = b_eff / sqrt_1m_ab;
    let mut out = Zip::from(xk).and(x0_hat).map_collect(|&x, &x0| {
        let eps_hat = (x - sqrt_ab * x0) / sqrt_1m_ab;
        inv_sqrt_a * (x - coef * eps_hat)
    });
    if let Some(eps) = eps_draw {
        if eps.shape() != xk.shape() {
            return Err(Error::Shape(format!("eps {:?} vs x_k {:?}", eps.shape(), xk.shape())));
        }
        if k_prev == 0 {
            if eps.iter().any(|&e| e != 0.0) {
                return Err(Error::Index("the final reverse step takes no noise draw".into()));
            }
        } else {
            let sigma = s.posterior_variance(k, k_prev).sqrt();
            Zip::from(&mut out).and(eps).for_each(|o, &e| *o += sigma * e);
        }
    }
    Ok(out)
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
}

/// A batch noised at per-sample steps, keeping the draws for inspection.
#[derive(Debug, Clone)]
pub struct NoisedBatch {
    pub x0: Vec<Array2<f64>>,
    pub xk: Vec<Array2<f64>>,
    pub eps: Vec<Array2<f64>>,
    pub k: Vec<usize>,
}

impl NoisedBatch {
    /// Draws `k ~ Uniform{1..k_steps}` and `eps ~ N(0, I)` per sample.
    pub fn draw<R: Rng + ?Sized>(x0: Vec<Array2<f64>>, s: &DiffusionSchedule, rng: &mut R) -> Result<Self> {
        let mut xk = Vec::with_capacity(x0.len());
        let mut eps = Vec::with_capacity(x0.len());
        let mut ks = Vec::with_capacity(x0.len());
        for x in &x0 {
            let k = rng.random_range(1..=s.k_steps());
            let e = standard_normal(rng, x.dim());
            xk.push(forward_closed_form(x, k, &e, s)?);
            eps.push(e);
            ks.push(k);
        }
        Ok(Self { x0, xk, eps, k: ks })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2, Array1};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn default_schedule() -> DiffusionSchedule {
        ScheduleConfig::default().build().unwrap()
    }

    #[test]
    fn alpha_bar_matches_product_loop() {
        let s = build_schedule(500, 200, BetaPolicy::Linear { lo: 1e-4, hi: 0.02 }, 0.01).unwrap();
        for k in [1usize, 2, 100, 250, 499, 500] {
            let mut prod = 1.0;
            for i in 1..=k {
                let beta = 1e-4 + (0.02 - 1e-4) * (i - 1) as f64 / 499.0;
                prod *= 1.0 - beta;
            }
            assert!((s.alpha_bar(k) - prod).abs() < 1e-12);
        }
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn loss_weight_hand_value() {
        let w = loss_weight(0.01, 0.99, 0.9, 0.01);
        assert!((w - 9.9).abs() < 1e-12, "{w}");
    }

    #[test]
    fn loss_weight_table_matches_formula() {
        let s = default_schedule();
        for k in 1..=s.k_steps() {
            let direct = s.gamma() * (1.0 - s.beta(k)) * (1.0 - s.alpha_bar(k)) / s.beta(k).powi(2);
            assert!((s.loss_weight(k) - direct).abs() <= 1e-12 * direct.max(1.0));
            assert!(s.loss_weight(k).is_finite() && s.loss_weight(k) > 0.0);
        }
    }

    #[test]
    fn tables_are_monotone() {
        let s = default_schedule();
        for w in s.betas().windows(2) {
            assert!(w[0] < w[1]);
        }
        for w in s.alpha_bars().windows(2) {
            assert!(w[0] > w[1]);
        }
        for k in 0..=s.k_steps() {
            let ab = s.alpha_bar(k);
            assert!((ab.sqrt().powi(2) + (1.0 - ab).sqrt().powi(2) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sampling_indices() {
        let s = default_schedule();
        let idx = s.sampling_indices();
        assert_eq!(idx.len(), 200);
        assert_eq!((idx[0], idx[199]), (1, 500));
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
        let pairs = s.reverse_pairs();
        assert_eq!(pairs.first().unwrap().0, 500);
        assert_eq!(*pairs.last().unwrap(), (1, 0));

        let one = build_schedule(1, 1, BetaPolicy::default(), 0.01).unwrap();
        assert_eq!(one.sampling_indices(), &[1]);
        let full = build_schedule(7, 7, BetaPolicy::default(), 0.01).unwrap();
        assert_eq!(full.sampling_indices(), &[1, 2, 3, 4, 5, 6, 7]);
    }

    #[test]
    fn bad_configs() {
        assert!(build_schedule(10, 11, BetaPolicy::default(), 0.01).is_err());
        assert!(build_schedule(10, 5, BetaPolicy::Linear { lo: 0.02, hi: 0.01 }, 0.01).is_err());
        assert!(build_schedule(10, 5, BetaPolicy::Linear { lo: 0.0, hi: 0.01 }, 0.01).is_err());
        assert!(build_schedule(10, 5, BetaPolicy::Linear { lo: 0.1, hi: 1.0 }, 0.01).is_err());
    }

    #[test]
    fn forward_identities() {
        let s = default_schedule();
        let x0 = arr2(&[[1.0, -2.0], [0.5, 3.0]]);
        let eps = arr2(&[[0.3, 0.1], [-0.7, 2.0]]);
        assert_eq!(forward_closed_form(&x0, 0, &eps, &s).unwrap(), x0);
        let zero = Array2::zeros((2, 2));
        let scaled = forward_closed_form(&x0, 123, &zero, &s).unwrap();
        assert_eq!(scaled, x0.mapv(|v| v * s.alpha_bar(123).sqrt()));
        assert!(matches!(forward_closed_form(&x0, 501, &eps, &s), Err(Error::Index(_))));
    }

    #[test]
    fn reverse_step_with_exact_denoiser_at_one() {
        let s = default_schedule();
        let x0 = arr1(&[0.2, -1.3, 4.0]);
        let eps = arr1(&[1.1, -0.4, 0.25]);
        let x1 = forward_closed_form(&x0, 1, &eps, &s).unwrap();
        let out = reverse_step(&x1, &x0, 1, None, &s).unwrap();
        for (a, b) in out.iter().zip(x0.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(reverse_step(&x1, &x0, 0, None, &s).is_err());
        let noisy = arr1(&[0.0, 1.0, 0.0]);
        assert!(reverse_step(&x1, &x0, 1, Some(&noisy), &s).is_err());
    }

    #[test]
    fn reverse_step_zero_noise_path() {
        let s = default_schedule();
        let x0 = arr1(&[0.5, -0.25]);
        let k = 40;
        let xk = x0.mapv(|v| v * s.alpha_bar(k).sqrt());
        let out = reverse_step(&xk, &x0, k, None, &s).unwrap();
        for (a, b) in out.iter().zip(x0.iter()) {
            assert!((a - b * s.alpha_bar(k - 1).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn reverse_step_matches_posterior_mean() {
        // independent route: the Gaussian posterior mean of q(x_{k-1} | x_k, x_0)
        let s = default_schedule();
        let x0 = arr1(&[0.7, -0.1]);
        let xk = arr1(&[1.5, 0.2]);
        for (k, kp) in [(10usize, 9usize), (300, 250)] {
            let ab = s.alpha_bar(k);
            let abp = s.alpha_bar(kp);
            let a = ab / abp;
            let c0 = abp.sqrt() * (1.0 - a) / (1.0 - ab);
            let ck = a.sqrt() * (1.0 - abp) / (1.0 - ab);
            let expect: Array1<f64> = &x0 * c0 + &xk * ck;
            let got = reverse_step_to(&xk, &x0, k, kp, None, &s).unwrap();
            for (g, e) in got.iter().zip(expect.iter()) {
                assert!((g - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn full_chain_recovers_x0() {
        let s = default_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = standard_normal(&mut rng, (5, 300));
        let mut x = standard_normal(&mut rng, (5, 300));
        for (k, kp) in s.reverse_pairs() {
            x = reverse_step_to(&x, &x0, k, kp, None, &s).unwrap();
        }
        let err = (&x - &x0).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn noised_batch_consistency() {
        let s = default_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x0: Vec<Array2<f64>> = (0..4).map(|_| standard_normal(&mut rng, (3, 8))).collect();
        let b = NoisedBatch::draw(x0, &s, &mut rng).unwrap();
        for i in 0..4 {
            assert!((1..=500).contains(&b.k[i]));
            assert_eq!(b.xk[i], forward_closed_form(&b.x0[i], b.k[i], &b.eps[i], &s).unwrap());
        }
    }
}
