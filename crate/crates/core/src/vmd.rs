//! Variational mode decomposition solved by ADMM on the half-spectrum of a
//! mirror-extended signal.
//!
//! Each outer iteration visits the modes in order, applying a Wiener-filter
//! update to the mode spectrum followed by a power-weighted update of its
//! center frequency, then takes one dual-ascent step on the multiplier.
//! Frequencies are in cycles per sample, so the half-spectrum grid spans
//! `[0, 0.5]`.

use std::sync::Arc;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "seed", rename_all = "lowercase")]
pub enum FreqInit {
    /// `omega_k = k / (2K)` for `k = 0..K`.
    Uniform,
    Zero,
    Random(u64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VmdConfig {
    pub k_modes: usize,
    /// Bandwidth penalty.
    pub alpha: f64,
    /// Dual-ascent step; 0 leaves the reconstruction constraint soft.
    pub tau: f64,
    pub tol: f64,
    pub max_iters: usize,
    pub init: FreqInit,
    /// Pins the first center frequency at 0.
    pub dc_mode: bool,
}

impl Default for VmdConfig {
    fn default() -> Self {
        Self {
            k_modes: 4,
            alpha: 2000.0,
            tau: 0.0,
            tol: 1e-7,
            max_iters: 500,
            init: FreqInit::Uniform,
            dc_mode: false,
        }
    }
}

impl VmdConfig {
    pub fn with_modes(k_modes: usize) -> Self {
        Self {
            k_modes,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=16).contains(&self.k_modes) {
            return Err(Error::Config(format!("k_modes {} not in [1, 16]", self.k_modes)));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.tau >= 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("tau must be nonnegative, got {}", self.tau)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be positive".into()));
        }
        Ok(())
    }
}

/// Output of [`decompose`]: modes sorted by ascending center frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeSet {
    pub modes: Vec<Vec<f64>>,
    pub center_freqs: Vec<f64>,
    pub iterations_used: usize,
    /// `||signal - sum(modes)|| / ||signal||` over the original support.
    pub final_residual: f64,
    pub converged: bool,
}

impl ModeSet {
    pub fn k(&self) -> usize {
        self.modes.len()
    }

    /// Pointwise `signal - sum_k u_k`.
    pub fn residual(&self, signal: &[f64]) -> Vec<f64> {
        signal
            .iter()
            .enumerate()
            .map(|(t, &f)| f - self.modes.iter().map(|m| m[t]).sum::<f64>())
            .collect()
    }
}

/// ADMM iterate over the half-spectrum grid.
#[derive(Debug, Clone, PartialEq)]
pub struct VmdState {
    pub mode_spectra: Vec<Vec<Complex64>>,
    pub dual: Vec<Complex64>,
    pub omega: Vec<f64>,
}

impl VmdState {
    pub fn new(k: usize, bins: usize, omega: Vec<f64>) -> Self {
        assert_eq!(omega.len(), k);
        Self {
            mode_spectra: vec![vec![Complex64::default(); bins]; k],
            dual: vec![Complex64::default(); bins],
            omega,
        }
    }

    pub fn bins(&self) -> usize {
        self.dual.len()
    }
}

/// Reflects the first half of the signal onto the front and the second
/// half onto the back; the original occupies `[n/2, n/2 + n)`.
pub fn mirror_extend(signal: &[f64]) -> Vec<f64> {
    let n = signal.len();
    let front = n / 2;
    let mut out = Vec::with_capacity(2 * n);
    out.extend(signal[..front].iter().rev());
    out.extend_from_slice(signal);
    out.extend(signal[front..].iter().rev());
    out
}

/// Frequency grid `j / n` for `j = 0..=n/2`.
pub fn half_spectrum_freqs(n: usize) -> Vec<f64> {
    (0..=n / 2).map(|j| j as f64 / n as f64).collect()
}

struct HalfSpectrumFft {
    n: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl HalfSpectrumFft {
    fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            n,
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        }
    }

    fn forward(&self, x: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.forward.process(&mut buf);
        buf.truncate(self.n / 2 + 1);
        buf
    }

    /// Inverse of a Hermitian half-spectrum, normalized by `1/n`.
    fn inverse(&self, half: &[Complex64]) -> Vec<f64> {
        let n = self.n;
        let mut full = vec![Complex64::default(); n];
        full[..half.len()].copy_from_slice(half);
        for j in 1..half.len() {
            if n - j >= half.len() {
                full[n - j] = half[j].conj();
            }
        }
        // DC and Nyquist of a real signal are real
        full[0].im = 0.0;
        if n % 2 == 0 {
            full[n / 2].im = 0.0;
        }
        self.inverse.process(&mut full);
        full.iter().map(|c| c.re / n as f64).collect()
    }
}

/// Half-spectrum of a real signal (unnormalized forward DFT).
pub fn half_spectrum(x: &[f64]) -> Vec<Complex64> {
    HalfSpectrumFft::new(x.len()).forward(x)
}

/// Time-domain energy implied by a half-spectrum of a length-`n` real
/// signal, counting each interior bin twice.
pub fn half_spectrum_energy(half: &[Complex64], n: usize) -> f64 {
    let mut e = 0.0;
    for (j, c) in half.iter().enumerate() {
        let mult = if j == 0 || (n % 2 == 0 && j == n / 2) { 1.0 } else { 2.0 };
        e += mult * c.norm_sqr();
    }
    e / n as f64
}

/// Power-weighted mean frequency of a spectrum; `None` when it carries no power.
pub fn center_frequency(spectrum: &[Complex64], freqs: &[f64]) -> Option<f64> {
    let (num, den) = spectrum.iter().zip(freqs).fold((0.0, 0.0), |(num, den), (c, &w)| {
        let p = c.norm_sqr();
        (num + w * p, den + p)
    });
    (den > 0.0).then(|| num / den)
}

/// One outer ADMM sweep. Returns the convergence measure
/// `sum_k ||u_k^{new} - u_k^{old}||^2 / ||u_k^{old}||^2`.
pub fn update_modes(state: &mut VmdState, signal_spectrum: &[Complex64], freqs: &[f64], cfg: &VmdConfig) -> f64 {
    let k_modes = state.mode_spectra.len();
    let bins = signal_spectrum.len();
    debug_assert_eq!(state.bins(), bins);

    // running sum of the current iterate of every mode
    let mut total: Vec<Complex64> = (0..bins)
        .map(|j| state.mode_spectra.iter().map(|m| m[j]).sum())
        .collect();
    let mut diff = 0.0;
    for k in 0..k_modes {
        let omega_k = state.omega[k];
        let mode = &mut state.mode_spectra[k];
        let mut change = 0.0;
        let mut old_norm = 0.0;
        for j in 0..bins {
            let old = mode[j];
            let others = total[j] - old;
            let d = freqs[j] - omega_k;
            let new = (signal_spectrum[j] - others + state.dual[j] * 0.5) / (1.0 + 2.0 * cfg.alpha * d * d);
            total[j] = others + new;
            change += (new - old).norm_sqr();
            old_norm += old.norm_sqr();
            mode[j] = new;
        }
        diff += if old_norm > 0.0 {
            change / old_norm
        } else if change > 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
        if !(cfg.dc_mode && k == 0) {
            if let Some(w) = center_frequency(mode, freqs) {
                state.omega[k] = w;
            }
        }
    }
    if cfg.tau > 0.0 {
        for j in 0..bins {
            state.dual[j] += (signal_spectrum[j] - total[j]) * cfg.tau;
        }
    }
    diff
}

/// Augmented Lagrangian evaluated on the half-spectrum grid:
/// `sum_j [ sum_k 2 alpha (w_j - w_k)^2 |u_k|^2 + |f - sum u|^2 + Re(conj(lambda) (f - sum u)) ]`.
/// The mode and center-frequency updates are exact block minimizers of
/// this function.
pub fn augmented_lagrangian(state: &VmdState, signal_spectrum: &[Complex64], freqs: &[f64], alpha: f64) -> f64 {
    let mut total = 0.0;
    for (j, f) in signal_spectrum.iter().enumerate() {
        let mut sum = Complex64::default();
        for (k, mode) in state.mode_spectra.iter().enumerate() {
            let d = freqs[j] - state.omega[k];
            total += 2.0 * alpha * d * d * mode[j].norm_sqr();
            sum += mode[j];
        }
        let r = f - sum;
        total += r.norm_sqr() + (state.dual[j].conj() * r).re;
    }
    total
}

/// Iterative solver; [`decompose`] drives it to convergence. Exposed so
/// callers can observe the per-iteration state.
pub struct VmdSolver {
    cfg: VmdConfig,
    n: usize,
    fft: HalfSpectrumFft,
    freqs: Vec<f64>,
    signal_spectrum: Vec<Complex64>,
    state: VmdState,
    iterations: usize,
    last_diff: f64,
}

impl VmdSolver {
    pub fn new(signal: &[f64], cfg: &VmdConfig) -> Result<Self> {
        cfg.validate()?;
        let n = signal.len();
        if n < 4 * cfg.k_modes || n < 2 {
            return Err(Error::Config(format!(
                "signal length {n} too short for {} modes (need >= {})",
                cfg.k_modes,
                (4 * cfg.k_modes).max(2)
            )));
        }
        if let Some(i) = signal.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite sample at index {i}")));
        }
        let ext = mirror_extend(signal);
        let fft = HalfSpectrumFft::new(ext.len());
        let signal_spectrum = fft.forward(&ext);
        let freqs = half_spectrum_freqs(ext.len());
        let k = cfg.k_modes;
        let mut omega: Vec<f64> = match cfg.init {
            FreqInit::Uniform => (0..k).map(|i| 0.5 / k as f64 * i as f64).collect(),
            FreqInit::Zero => vec![0.0; k],
            FreqInit::Random(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut w: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..0.5)).collect();
                w.sort_by(f64::total_cmp);
                w
            }
        };
        if cfg.dc_mode {
            omega[0] = 0.0;
        }
        let state = VmdState::new(k, freqs.len(), omega);
        Ok(Self {
            cfg: cfg.clone(),
            n,
            fft,
            freqs,
            signal_spectrum,
            state,
            iterations: 0,
            last_diff: f64::INFINITY,
        })
    }

    pub fn state(&self) -> &VmdState {
        &self.state
    }

    pub fn signal_spectrum(&self) -> &[Complex64] {
        &self.signal_spectrum
    }

    pub fn freqs(&self) -> &[f64] {
        &self.freqs
    }

    pub fn lagrangian(&self) -> f64 {
        augmented_lagrangian(&self.state, &self.signal_spectrum, &self.freqs, self.cfg.alpha)
    }

    pub fn converged(&self) -> bool {
        self.last_diff < self.cfg.tol
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    /// Performs one sweep; returns the convergence measure.
    pub fn step(&mut self) -> f64 {
        self.last_diff = update_modes(&mut self.state, &self.signal_spectrum, &self.freqs, &self.cfg);
        self.iterations += 1;
        self.last_diff
    }

    pub fn run(&mut self) {
        while self.iterations < self.cfg.max_iters && !self.converged() {
            self.step();
        }
    }

    /// Converts the current iterate into time-domain modes on the original
    /// support, sorted by center frequency.
    pub fn finish(&self, signal: &[f64]) -> ModeSet {
        let n = self.n;
        let front = n / 2;
        let mut pairs: Vec<(f64, Vec<f64>)> = self
            .state
            .mode_spectra
            .iter()
            .zip(&self.state.omega)
            .map(|(spec, &w)| {
                let full = self.fft.inverse(spec);
                (w, full[front..front + n].to_vec())
            })
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let (center_freqs, modes): (Vec<f64>, Vec<Vec<f64>>) = pairs.into_iter().unzip();

        let mut res2 = 0.0;
        let mut sig2 = 0.0;
        for (t, &f) in signal.iter().enumerate() {
            let r = f - modes.iter().map(|m| m[t]).sum::<f64>();
            res2 += r * r;
            sig2 += f * f;
        }
        let final_residual = if sig2 > 0.0 { (res2 / sig2).sqrt() } else { res2.sqrt() };
        ModeSet {
            modes,
            center_freqs,
            iterations_used: self.iterations,
            final_residual,
            converged: self.converged(),
        }
    }
}

/// Decomposes `signal` into `cfg.k_modes` band-limited modes.
pub fn decompose(signal: &[f64], cfg: &VmdConfig) -> Result<ModeSet> {
    let mut solver = VmdSolver::new(signal, cfg)?;
    solver.run();
    Ok(solver.finish(signal))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn tone(n: usize, f: f64) -> Vec<f64> {
        (0..n).map(|t| (2.0 * PI * f * t as f64).cos()).collect()
    }

    fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
        let den: f64 = b.iter().map(|y| y * y).sum();
        (num / den).sqrt()
    }

    fn correlation(a: &[f64], b: &[f64]) -> f64 {
        let ma = a.iter().sum::<f64>() / a.len() as f64;
        let mb = b.iter().sum::<f64>() / b.len() as f64;
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    /// Peak of the zero-padded periodogram, refined by parabolic interpolation.
    fn fft_peak(x: &[f64]) -> f64 {
        let n = x.len() * 8;
        let mut padded = x.to_vec();
        padded.resize(n, 0.0);
        let spec = half_spectrum(&padded);
        let (j, _) = spec
            .iter()
            .enumerate()
            .skip(1)
            .max_by(|a, b| a.1.norm_sqr().total_cmp(&b.1.norm_sqr()))
            .unwrap();
        let (a, b, c) = (spec[j - 1].norm(), spec[j].norm(), spec[j + 1].norm());
        let shift = 0.5 * (a - c) / (a - 2.0 * b + c);
        (j as f64 + shift) / n as f64
    }

    #[test]
    fn mirror_extension_fixture() {
        assert_eq!(
            mirror_extend(&[1.0, 2.0, 3.0, 4.0]),
            vec![2.0, 1.0, 1.0, 2.0, 3.0, 4.0, 4.0, 3.0]
        );
        assert_eq!(mirror_extend(&[7.0; 5]), vec![7.0; 10]);
    }

    /// Tone sampled at half-integer instants; with `2 f n` integral its
    /// mirror extension is exactly periodic, so the signal is band-limited
    /// on the solver's grid.
    fn grid_tone(n: usize, f: f64) -> Vec<f64> {
        (0..n).map(|t| (2.0 * PI * f * (t as f64 + 0.5)).cos()).collect()
    }

    #[test]
    fn single_cosine() {
        let x = grid_tone(500, 0.05);
        let truth = fft_peak(&x);
        assert!((truth - 0.05).abs() < 1e-3);
        let ms = decompose(&x, &VmdConfig::with_modes(1)).unwrap();
        assert!(rel_l2(&ms.modes[0], &x) < 1e-2, "rel err {}", rel_l2(&ms.modes[0], &x));
        assert!(
            (ms.center_freqs[0] - truth).abs() < 1e-3,
            "omega {}",
            ms.center_freqs[0]
        );

        // an off-grid tone leaks at the mirror boundary but keeps its frequency
        let x = tone(512, 0.05);
        let ms = decompose(&x, &VmdConfig::with_modes(1)).unwrap();
        assert!((ms.center_freqs[0] - fft_peak(&x)).abs() < 1e-3);
        assert!(rel_l2(&ms.modes[0], &x) < 0.05);
    }

    #[test]
    fn dual_ascent_enforces_reconstruction() {
        let n = 400;
        let a = grid_tone(n, 0.03);
        let b = grid_tone(n, 0.2);
        let x: Vec<f64> = a.iter().zip(&b).map(|(p, q)| p + 0.5 * q).collect();
        let soft = decompose(&x, &VmdConfig::with_modes(2)).unwrap();
        assert!(soft.final_residual < 1e-2);
        let cfg = VmdConfig {
            k_modes: 2,
            tau: 0.1,
            tol: 1e-20,
            max_iters: 3000,
            ..VmdConfig::default()
        };
        let hard = decompose(&x, &cfg).unwrap();
        assert!(hard.final_residual < 1e-6, "{}", hard.final_residual);
    }

    #[test]
    fn two_tones() {
        let n = 1024;
        let (a, b) = (tone(n, 0.03), tone(n, 0.20));
        let x: Vec<f64> = a.iter().zip(&b).map(|(p, q)| p + q).collect();
        let ms = decompose(&x, &VmdConfig::with_modes(2)).unwrap();
        assert!((ms.center_freqs[0] - 0.03).abs() < 5e-3, "{:?}", ms.center_freqs);
        assert!((ms.center_freqs[1] - 0.20).abs() < 5e-3, "{:?}", ms.center_freqs);
        assert!(correlation(&ms.modes[0], &a) > 0.99);
        assert!(correlation(&ms.modes[1], &b) > 0.99);
    }

    #[test]
    fn zero_signal() {
        for k in 1..4 {
            let ms = decompose(&[0.0; 64], &VmdConfig::with_modes(k)).unwrap();
            assert!(ms.modes.iter().flatten().all(|&v| v == 0.0));
            assert_eq!(ms.final_residual, 0.0);
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            decompose(&[0.0; 7], &VmdConfig::with_modes(2)),
            Err(Error::Config(_))
        ));
        let mut x = vec![0.0; 16];
        x[3] = f64::NAN;
        assert!(matches!(decompose(&x, &VmdConfig::with_modes(1)), Err(Error::Data(_))));
    }

    #[test]
    fn unit_filter_passes_spectrum() {
        // alpha = 0 is outside the validated range; exercise the raw update.
        let spectrum: Vec<Complex64> = (0..9).map(|j| Complex64::new(j as f64, -(j as f64) * 0.5)).collect();
        let freqs = half_spectrum_freqs(16);
        let mut state = VmdState::new(1, 9, vec![0.1]);
        let cfg = VmdConfig {
            k_modes: 1,
            alpha: 0.0,
            ..VmdConfig::default()
        };
        update_modes(&mut state, &spectrum, &freqs, &cfg);
        assert_eq!(state.mode_spectra[0], spectrum);
    }

    #[test]
    fn large_alpha_concentrates_mode() {
        let bins = 65;
        let freqs = half_spectrum_freqs(128);
        let flat = vec![Complex64::new(1.0, 0.0); bins];
        let mut state = VmdState::new(1, bins, vec![0.25]);
        let cfg = VmdConfig {
            k_modes: 1,
            alpha: 1e6,
            dc_mode: true, // hold omega fixed for the shape check
            ..VmdConfig::default()
        };
        update_modes(&mut state, &flat, &freqs, &cfg);
        let mags: Vec<f64> = state.mode_spectra[0].iter().map(|c| c.norm()).collect();
        let peak = 32; // 0.25 * 128
        for j in 0..peak {
            assert!(mags[j] < mags[j + 1]);
        }
        for j in peak..bins - 1 {
            assert!(mags[j] > mags[j + 1]);
        }
    }

    #[test]
    fn center_frequency_of_symmetric_spikes() {
        let freqs: Vec<f64> = (0..=10).map(|j| j as f64 * 0.05).collect();
        let mut spec = vec![Complex64::default(); 11];
        spec[2] = Complex64::new(1.0, 0.0); // 0.1
        spec[6] = Complex64::new(0.0, 1.0); // 0.3
        let oracle = (0.1 * 1.0 + 0.3 * 1.0) / 2.0;
        assert!((center_frequency(&spec, &freqs).unwrap() - oracle).abs() < 1e-15);
        assert_eq!(center_frequency(&vec![Complex64::default(); 11], &freqs), None);
    }

    #[test]
    fn dc_mode_pins_first_frequency() {
        let x: Vec<f64> = tone(256, 0.1).iter().map(|v| v + 3.0).collect();
        let cfg = VmdConfig {
            k_modes: 2,
            dc_mode: true,
            ..VmdConfig::default()
        };
        let ms = decompose(&x, &cfg).unwrap();
        assert_eq!(ms.center_freqs[0], 0.0);
        let mean0 = ms.modes[0].iter().sum::<f64>() / 256.0;
        assert!((mean0 - 3.0).abs() < 0.05, "{mean0}");
    }

    #[test]
    fn parseval_on_returned_modes() {
        let x: Vec<f64> = (0..300)
            .map(|t| (t as f64 * 0.07).sin() + 0.4 * (t as f64 * 0.9).cos())
            .collect();
        let ms = decompose(&x, &VmdConfig::with_modes(3)).unwrap();
        for m in &ms.modes {
            let time: f64 = m.iter().map(|v| v * v).sum();
            let freq = half_spectrum_energy(&half_spectrum(m), m.len());
            assert!((time - freq).abs() <= 1e-9 * time.max(1e-300));
        }
        // odd length exercises the no-Nyquist branch
        let m: Vec<f64> = (0..301).map(|t| (t as f64 * 0.3).sin()).collect();
        let time: f64 = m.iter().map(|v| v * v).sum();
        assert!((time - half_spectrum_energy(&half_spectrum(&m), 301)).abs() <= 1e-9 * time);
    }

    #[test]
    fn lagrangian_non_increasing_without_dual_ascent() {
        let x: Vec<f64> = (0..400)
            .map(|t| {
                (2.0 * PI * 0.02 * t as f64).sin()
                    + 0.5 * (2.0 * PI * 0.15 * t as f64).sin()
                    + 0.1 * (t as f64 * 1.7).cos()
            })
            .collect();
        let cfg = VmdConfig::with_modes(3);
        let mut solver = VmdSolver::new(&x, &cfg).unwrap();
        let mut prev = solver.lagrangian();
        for _ in 0..200 {
            solver.step();
            let cur = solver.lagrangian();
            assert!(cur <= prev + 1e-9 * prev.abs().max(1.0), "{cur} > {prev}");
            prev = cur;
            if solver.converged() {
                break;
            }
        }
    }

    #[test]
    fn random_init_is_deterministic() {
        let x: Vec<f64> = (0..200)
            .map(|t| (t as f64 * 0.2).sin() + (t as f64 * 0.05).cos())
            .collect();
        let cfg = VmdConfig {
            k_modes: 3,
            init: FreqInit::Random(7),
            ..VmdConfig::default()
        };
        let a = decompose(&x, &cfg).unwrap();
        let b = decompose(&x, &cfg).unwrap();
        assert_eq!(a, b);
        for w in a.center_freqs.windows(2) {
            assert!(w[0] <= w[1]);
        }
    }

    proptest! {
        #[test]
        fn mirror_center_is_original(x in prop::collection::vec(-1e3f64..1e3, 2..64)) {
            let ext = mirror_extend(&x);
            prop_assert_eq!(ext.len(), 2 * x.len());
            let front = x.len() / 2;
            prop_assert_eq!(&ext[front..front + x.len()], &x[..]);
        }
    }
}
