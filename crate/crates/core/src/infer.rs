//! Reverse sampling with observed-value replacement, point metrics and
//! rolling-origin evaluation.

use std::collections::BTreeMap;

use chrono::{Duration, NaiveDateTime};
use ndarray::{s, Array2};
use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{NormalizationParams, Sample, WindowSpec};
use crate::error::{Error, Result};
use crate::features::{reconstruct, reconstruct_inference, HorizonPolicy, ObservationMask, ReconstructedSample};
use crate::net::{Denoiser, DenoiserNet, OracleDenoiser};
use crate::schedule::{reverse_step_to, standard_normal, DiffusionSchedule};
use crate::seed::{derive_seed, purpose};
use crate::vmd::VmdConfig;

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Forecast {
    /// Denormalized (MW).
    pub y_hat: Vec<f64>,
    pub y_hat_normalized: Vec<f64>,
    /// Sample state after every reverse step, when requested.
    pub per_step_trace: Option<Vec<Array2<f64>>>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SamplingOptions {
    /// Skips the intermediate noise draws.
    pub zero_noise: bool,
    pub trace: bool,
}

/// Runs the reverse chain from pure noise over the schedule's sampling
/// indices. After every step the observed positions are overwritten with
/// their known values; the forecast is channel 0 over the horizon.
pub fn sample_forecast<D: Denoiser + ?Sized>(
    recon: &ReconstructedSample,
    mask: &ObservationMask,
    denoiser: &D,
    schedule: &DiffusionSchedule,
    norm: Option<&NormalizationParams>,
    seed: u64,
    opts: SamplingOptions,
) -> Result<Forecast> {
    let norm = norm.ok_or_else(|| Error::State("forecast requires normalization parameters".into()))?;
    if mask.mask.dim() != recon.channels.dim() {
        return Err(Error::Shape(format!(
            "mask {:?} vs sample {:?}",
            mask.mask.dim(),
            recon.channels.dim()
        )));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let dim = recon.channels.dim();
    let mut x = standard_normal(&mut rng, dim);
    let mut trace = opts.trace.then(Vec::new);
    for (k, k_prev) in schedule.reverse_pairs() {
        let x0_hat = denoiser.denoise(&x, k)?;
        let eps = (k_prev > 0 && !opts.zero_noise).then(|| standard_normal(&mut rng, dim));
        x = reverse_step_to(&x, &x0_hat, k, k_prev, eps.as_ref(), schedule)?;
        mask.apply(&mut x, &recon.channels);
        if let Some(t) = trace.as_mut() {
            t.push(x.clone());
        }
    }
    let y_hat_normalized: Vec<f64> = x.slice(s![0, recon.lookback..]).to_vec();
    if y_hat_normalized.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite forecast".into()));
    }
    Ok(Forecast {
        y_hat: norm.denormalize(&y_hat_normalized),
        y_hat_normalized,
        per_step_trace: trace,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rmse: f64,
    pub mae: f64,
    /// Percent.
    pub mape: f64,
    pub r2: f64,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
}

/// RMSE, MAE, MAPE (percent) and R². R² is 1 for a perfect fit of a
/// constant target and 0 for any other fit of one.
pub fn metrics(y: &[f64], y_hat: &[f64]) -> Result<MetricsReport> {
    if y.len() != y_hat.len() || y.is_empty() {
        return Err(Error::Shape(format!(
            "metrics on {} vs {} values",
            y.len(),
            y_hat.len()
        )));
    }
    if let Some(index) = y.iter().position(|&v| v == 0.0) {
        return Err(Error::ZeroActual { index });
    }
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let (mut se, mut ae, mut pe, mut tot) = (0.0, 0.0, 0.0, 0.0);
    for (&a, &p) in y.iter().zip(y_hat) {
        let e = a - p;
        se += e * e;
        ae += e.abs();
        pe += (e / a).abs();
        tot += (a - mean) * (a - mean);
    }
    let r2 = if tot > 0.0 {
        1.0 - se / tot
    } else if se == 0.0 {
        1.0
    } else {
        0.0
    };
    Ok(MetricsReport {
        rmse: (se / n).sqrt(),
        mae: ae / n,
        mape: 100.0 * pe / n,
        r2,
        n: y.len(),
        group: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Grouping {
    #[default]
    None,
    Monthly,
}

/// What produces the clean-sample estimates.
#[derive(Debug, Clone, Copy)]
pub enum Model<'a> {
    Net(&'a DenoiserNet),
    /// Returns the true window; exercises the machinery end to end.
    Oracle,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub seed: u64,
    /// Seeded runs averaged per window; 1 is a single draw.
    pub ensemble: usize,
    pub grouping: Grouping,
    pub vmd: Option<VmdConfig>,
    pub horizon_policy: HorizonPolicy,
    pub step_minutes: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowForecast {
    pub window: usize,
    pub horizon_start: NaiveDateTime,
    pub timestamps: Vec<NaiveDateTime>,
    pub y: Vec<f64>,
    pub y_hat: Vec<f64>,
    /// Per-step standard deviation across ensemble members.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ensemble_std: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub version: u32,
    pub model: String,
    pub overall: MetricsReport,
    pub groups: Vec<MetricsReport>,
    pub windows: Vec<WindowForecast>,
}

impl EvaluationReport {
    /// Scores precomputed forecasts, overall and per group.
    pub fn from_windows(model: &str, windows: Vec<WindowForecast>, grouping: Grouping) -> Result<Self> {
        if windows.is_empty() {
            return Err(Error::Data("empty test set".into()));
        }
        let all_y: Vec<f64> = windows.iter().flat_map(|w| w.y.iter().copied()).collect();
        let all_hat: Vec<f64> = windows.iter().flat_map(|w| w.y_hat.iter().copied()).collect();
        let overall = metrics(&all_y, &all_hat)?;
        let mut groups = Vec::new();
        if grouping == Grouping::Monthly {
            let mut by_month: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
            for w in &windows {
                let e = by_month.entry(w.horizon_start.format("%Y-%m").to_string()).or_default();
                e.0.extend(&w.y);
                e.1.extend(&w.y_hat);
            }
            for (key, (y, yh)) in by_month {
                let mut r = metrics(&y, &yh)?;
                r.group = Some(key);
                groups.push(r);
            }
        }
        Ok(Self {
            version: REPORT_VERSION,
            model: model.to_string(),
            overall,
            groups,
            windows,
        })
    }
}

fn horizon_timestamps(w: &Sample, step_minutes: i64) -> Vec<NaiveDateTime> {
    (0..w.horizon)
        .map(|i| w.horizon_start + Duration::minutes(step_minutes * i as i64))
        .collect()
}

/// Forecasts every raw (MW) test window and scores the horizons.
/// Each window and ensemble member draws from its own stream derived from
/// `(seed, window index, member)`, so results do not depend on scheduling.
pub fn evaluate(
    windows: &[Sample],
    model: Model<'_>,
    schedule: &DiffusionSchedule,
    norm: &NormalizationParams,
    settings: &EvalSettings,
) -> Result<EvaluationReport> {
    if windows.is_empty() {
        return Err(Error::Data("empty test set".into()));
    }
    let members = settings.ensemble.max(1);
    let forecasts: Vec<WindowForecast> = windows
        .par_iter()
        .enumerate()
        .map(|(i, w)| {
            let spec = WindowSpec {
                lookback: w.lookback,
                horizon: w.horizon,
                stride: 1,
            };
            let normalized = Sample {
                values: norm.normalize(&w.values),
                ..w.clone()
            };
            let (recon, mask) = reconstruct_inference(
                normalized.lookback_values(),
                settings.vmd.as_ref(),
                &spec,
                settings.horizon_policy,
            )?;
            let oracle;
            let denoiser: &dyn Denoiser = match model {
                Model::Net(net) => net,
                Model::Oracle => {
                    let truth = reconstruct(&normalized, settings.vmd.as_ref())?;
                    oracle = OracleDenoiser { target: truth.channels };
                    &oracle
                }
            };
            let runs = (0..members)
                .map(|m| {
                    let seed = derive_seed(settings.seed, &[purpose::SAMPLING, i as u64, m as u64]);
                    sample_forecast(
                        &recon,
                        &mask,
                        denoiser,
                        schedule,
                        Some(norm),
                        seed,
                        SamplingOptions::default(),
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let l = w.horizon;
            let y_hat: Vec<f64> = (0..l)
                .map(|t| runs.iter().map(|r| r.y_hat[t]).sum::<f64>() / members as f64)
                .collect();
            let ensemble_std = (members > 1).then(|| {
                (0..l)
                    .map(|t| {
                        let var = runs.iter().map(|r| (r.y_hat[t] - y_hat[t]).powi(2)).sum::<f64>() / members as f64;
                        var.sqrt()
                    })
                    .collect()
            });
            Ok(WindowForecast {
                window: i,
                horizon_start: w.horizon_start,
                timestamps: horizon_timestamps(w, settings.step_minutes),
                y: w.horizon_values().to_vec(),
                y_hat,
                ensemble_std,
            })
        })
        .collect::<Result<_>>()?;
    let name = match model {
        Model::Net(_) => "mfrd",
        Model::Oracle => "oracle",
    };
    EvaluationReport::from_windows(name, forecasts, settings.grouping)
}

/// Repeats the last observed value over the horizon.
pub fn persistence_forecast(lookback: &[f64], horizon: usize) -> Vec<f64> {
    vec![*lookback.last().unwrap_or(&0.0); horizon]
}

pub fn evaluate_persistence(windows: &[Sample], grouping: Grouping, step_minutes: i64) -> Result<EvaluationReport> {
    let forecasts = windows
        .iter()
        .enumerate()
        .map(|(i, w)| WindowForecast {
            window: i,
            horizon_start: w.horizon_start,
            timestamps: horizon_timestamps(w, step_minutes),
            y: w.horizon_values().to_vec(),
            y_hat: persistence_forecast(w.lookback_values(), w.horizon),
            ensemble_std: None,
        })
        .collect();
    EvaluationReport::from_windows("persistence", forecasts, grouping)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{make_windows, TimeSeries};
    use crate::schedule::ScheduleConfig;
    use chrono::NaiveDate;
    use proptest::prelude::*;
    use rand::Rng;

    fn schedule(k: usize, s: usize) -> DiffusionSchedule {
        ScheduleConfig {
            k_steps: k,
            sampling_steps: s,
            ..Default::default()
        }
        .build()
        .unwrap()
    }

    fn truth(c: usize, m: usize) -> Array2<f64> {
        Array2::from_shape_fn((c, m), |(i, t)| (t as f64 * 0.21 + i as f64).sin() * 0.4 + 0.5)
    }

    fn recon(c: usize, lookback: usize, horizon: usize) -> (ReconstructedSample, ObservationMask, Array2<f64>) {
        let full = truth(c, lookback + horizon);
        let mut known = full.clone();
        known.slice_mut(s![.., lookback..]).fill(0.0);
        (
            ReconstructedSample {
                channels: known,
                lookback,
                horizon,
                time_index: 0,
            },
            ObservationMask::lookback(c, lookback, horizon),
            full,
        )
    }

    #[test]
    fn oracle_chain_recovers_horizon() {
        let (r, mask, full) = recon(5, 288, 12);
        let oracle = OracleDenoiser { target: full.clone() };
        let norm = NormalizationParams::new(0.0, 1.0).unwrap();
        let s = schedule(300, 300);
        for zero_noise in [true, false] {
            let f = sample_forecast(
                &r,
                &mask,
                &oracle,
                &s,
                Some(&norm),
                3,
                SamplingOptions {
                    zero_noise,
                    trace: false,
                },
            )
            .unwrap();
            for (t, v) in f.y_hat_normalized.iter().enumerate() {
                assert!((v - full[[0, 288 + t]]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn observed_positions_exact_after_every_step() {
        let (r, mask, full) = recon(3, 20, 4);
        // a denoiser that is wrong everywhere
        let oracle = OracleDenoiser {
            target: full.mapv(|v| -3.0 * v),
        };
        let norm = NormalizationParams::new(0.0, 1.0).unwrap();
        let f = sample_forecast(
            &r,
            &mask,
            &oracle,
            &schedule(50, 10),
            Some(&norm),
            1,
            SamplingOptions {
                zero_noise: false,
                trace: true,
            },
        )
        .unwrap();
        let trace = f.per_step_trace.unwrap();
        assert_eq!(trace.len(), 10);
        for x in &trace {
            for c in 0..3 {
                for t in 0..20 {
                    assert_eq!(x[[c, t]].to_bits(), r.channels[[c, t]].to_bits());
                }
            }
        }
    }

    #[test]
    fn seeded_forecasts_repeat() {
        let (r, mask, full) = recon(2, 10, 3);
        let oracle = OracleDenoiser {
            target: full.mapv(|v| v * 0.5),
        };
        let norm = NormalizationParams::new(100.0, 300.0).unwrap();
        let s = schedule(40, 8);
        let a = sample_forecast(&r, &mask, &oracle, &s, Some(&norm), 9, SamplingOptions::default()).unwrap();
        let b = sample_forecast(&r, &mask, &oracle, &s, Some(&norm), 9, SamplingOptions::default()).unwrap();
        assert_eq!(a, b);
        assert!(sample_forecast(&r, &mask, &oracle, &s, None, 9, SamplingOptions::default()).is_err());
    }

    #[test]
    fn metric_fixtures() {
        let m = metrics(&[100.0, 200.0], &[110.0, 180.0]).unwrap();
        assert_eq!(m.mae, 15.0);
        assert_eq!(m.rmse, 250f64.sqrt());
        assert!((m.mape - 10.0).abs() < 1e-12);
        let p = metrics(&[3.0, 4.0, 8.0], &[3.0, 4.0, 8.0]).unwrap();
        assert_eq!((p.rmse, p.mae, p.mape, p.r2), (0.0, 0.0, 0.0, 1.0));
        let y = [2.0, 4.0, 9.0];
        let mean = 5.0;
        assert!(metrics(&y, &[mean; 3]).unwrap().r2.abs() < 1e-15);
        assert!(matches!(
            metrics(&[1.0, 0.0], &[1.0, 1.0]),
            Err(Error::ZeroActual { index: 1 })
        ));
        assert!(metrics(&[], &[]).is_err());
        assert!(metrics(&[1.0], &[1.0, 2.0]).is_err());
    }

    fn brute(y: &[f64], p: &[f64]) -> (f64, f64, f64, f64) {
        let n = y.len() as f64;
        let mut mse = 0.0;
        let mut mae = 0.0;
        let mut mape = 0.0;
        for i in 0..y.len() {
            mse += (y[i] - p[i]).powi(2) / n;
            mae += (y[i] - p[i]).abs() / n;
            mape += ((y[i] - p[i]) / y[i]).abs() * 100.0 / n;
        }
        let ybar = y.iter().sum::<f64>() / n;
        let tot: f64 = y.iter().map(|v| (v - ybar).powi(2)).sum();
        (mse.sqrt(), mae, mape, 1.0 - mse * n / tot)
    }

    #[test]
    fn metrics_match_brute_force() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        for _ in 0..1000 {
            let n = rng.random_range(2..40);
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(50.0..500.0)).collect();
            let p: Vec<f64> = (0..n).map(|_| rng.random_range(50.0..500.0)).collect();
            let m = metrics(&y, &p).unwrap();
            let (rmse, mae, mape, r2) = brute(&y, &p);
            assert!((m.rmse - rmse).abs() < 1e-10 * rmse.max(1.0));
            assert!((m.mae - mae).abs() < 1e-10 * mae.max(1.0));
            assert!((m.mape - mape).abs() < 1e-10 * mape.max(1.0));
            assert!((m.r2 - r2).abs() < 1e-10 * r2.abs().max(1.0));
            assert!(m.rmse >= m.mae && m.r2 <= 1.0);
        }
    }

    proptest! {
        #[test]
        fn rmse_dominates_mae(pairs in prop::collection::vec((1.0f64..1e4, -1e4f64..1e4), 1..50)) {
            let (y, p): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let m = metrics(&y, &p).unwrap();
            prop_assert!(m.rmse >= m.mae * (1.0 - 1e-12));
            prop_assert!(m.r2 <= 1.0);
        }
    }

    fn two_month_series() -> TimeSeries {
        let t0 = NaiveDate::from_ymd_opt(2006, 1, 25)
            .unwrap()
            .and_hms_opt(0, 0, 0)
            .unwrap();
        let vals: Vec<f64> = (0..24 * 14)
            .map(|t| 1000.0 + 200.0 * (t as f64 * 2.0 * std::f64::consts::PI / 24.0).sin())
            .collect();
        TimeSeries::from_values(t0, 60, vals).unwrap()
    }

    fn settings(grouping: Grouping) -> EvalSettings {
        EvalSettings {
            seed: 5,
            ensemble: 1,
            grouping,
            vmd: Some(VmdConfig::with_modes(2)),
            horizon_policy: HorizonPolicy::LookbackOnly,
            step_minutes: 60,
        }
    }

    #[test]
    fn oracle_evaluation_scores_zero_and_groups_by_month() {
        let series = two_month_series();
        let spec = WindowSpec {
            lookback: 48,
            horizon: 6,
            stride: 12,
        };
        let windows = make_windows(&series, &spec).unwrap();
        let norm = NormalizationParams::new(800.0, 1200.0).unwrap();
        let s = schedule(100, 20);
        let r = evaluate(&windows, Model::Oracle, &s, &norm, &settings(Grouping::Monthly)).unwrap();
        assert!(r.overall.mape < 1e-9, "mape {}", r.overall.mape);
        assert_eq!(r.groups.len(), 2);
        assert_eq!(r.groups[0].group.as_deref(), Some("2006-01"));
        assert_eq!(r.groups[1].group.as_deref(), Some("2006-02"));
        let total: usize = r.groups.iter().map(|g| g.n).sum();
        assert_eq!(total, r.overall.n);
        let weighted = r.groups.iter().map(|g| g.mae * g.n as f64).sum::<f64>() / total as f64;
        assert!((weighted - r.overall.mae).abs() < 1e-9);
        let none = evaluate(&windows, Model::Oracle, &s, &norm, &settings(Grouping::None)).unwrap();
        assert!(none.groups.is_empty());
    }

    #[test]
    fn aggregation_identity_on_persistence() {
        let series = two_month_series();
        let spec = WindowSpec {
            lookback: 24,
            horizon: 12,
            stride: 5,
        };
        let windows = make_windows(&series, &spec).unwrap();
        let r = evaluate_persistence(&windows, Grouping::Monthly, 60).unwrap();
        let total: usize = r.groups.iter().map(|g| g.n).sum();
        let weighted = r.groups.iter().map(|g| g.mae * g.n as f64).sum::<f64>() / total as f64;
        assert!((weighted - r.overall.mae).abs() < 1e-9);
        assert!(r.overall.mae > 0.0);
        assert_eq!(r.windows[0].timestamps.len(), 12);
    }

    #[test]
    fn parallel_and_serial_agree() {
        let series = two_month_series();
        let spec = WindowSpec {
            lookback: 24,
            horizon: 4,
            stride: 40,
        };
        let windows = make_windows(&series, &spec).unwrap();
        let norm = NormalizationParams::new(800.0, 1200.0).unwrap();
        let net = DenoiserNet::new(crate::net::NetConfig {
            input_channels: 3,
            seq_len: 28,
            model_dim: 8,
            n_heads: 2,
            feedforward_dim: Some(16),
            ..Default::default()
        })
        .unwrap();
        let s = schedule(20, 5);
        let mut st = settings(Grouping::None);
        st.ensemble = 2;
        let par = evaluate(&windows, Model::Net(&net), &s, &norm, &st).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let ser = pool.install(|| evaluate(&windows, Model::Net(&net), &s, &norm, &st).unwrap());
        assert_eq!(par, ser);
        assert!(par.windows.iter().all(|w| w.ensemble_std.is_some()));
    }

    #[test]
    fn empty_test_set_is_error() {
        let norm = NormalizationParams::new(0.0, 1.0).unwrap();
        assert!(evaluate(&[], Model::Oracle, &schedule(10, 2), &norm, &settings(Grouping::None)).is_err());
    }
}
