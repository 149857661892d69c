//! End-to-end orchestration shared by the CLI, the benches and the
//! acceptance suite: data preparation, training, evaluation, the mode-count
//! sweep and ablations.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointHeader};
use crate::config::{AblationSpec, RunConfig};
use crate::dataset::{fit_normalizer, make_eval_windows, make_windows, split, NormalizationParams, Sample, TimeSeries};
use crate::error::{Error, Result};
use crate::features::{reconstruct_all, ReconstructedSample};
use crate::infer::{evaluate, evaluate_persistence, EvalSettings, EvaluationReport, MetricsReport, Model};
use crate::net::{lstm_param_count, DenoiserNet};
use crate::train::{EpochEvent, EpochRecord, Trainer};

/// Everything derived from the series before training.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub norm: NormalizationParams,
    pub step_minutes: i64,
    pub train: Vec<ReconstructedSample>,
    pub val: Vec<ReconstructedSample>,
    /// Raw (MW) forecast windows over the validation partition.
    pub val_windows: Vec<Sample>,
    /// Raw (MW) forecast windows over the test partition.
    pub test_windows: Vec<Sample>,
}

/// Splits, fits the normalizer on the training partition only, windows
/// every partition and decomposes the training and validation windows.
/// Evaluation windows may reach back into the preceding partition for
/// their look-back, never forward.
pub fn prepare(cfg: &RunConfig, series: &TimeSeries) -> Result<Prepared> {
    cfg.validate()?;
    let parts = split(series, &cfg.split)?;
    let norm = fit_normalizer(&parts.train)?;
    let train_n = parts.train.map_values(|v| norm.normalize_value(v))?;
    let val_n = parts.val.map_values(|v| norm.normalize_value(v))?;
    let train_spec = cfg.window.train_spec();
    let eval_spec = cfg.window.eval_spec();
    let vmd = cfg.vmd_config();
    let train = reconstruct_all(&make_windows(&train_n, &train_spec)?, vmd.as_ref())?;
    let val = reconstruct_all(&make_eval_windows(Some(&train_n), &val_n, &train_spec)?, vmd.as_ref())?;
    Ok(Prepared {
        norm,
        step_minutes: series.step_minutes(),
        train,
        val,
        val_windows: make_eval_windows(Some(&parts.train), &parts.val, &eval_spec)?,
        test_windows: make_eval_windows(Some(&parts.val), &parts.test, &eval_spec)?,
    })
}

pub fn checkpoint_header(cfg: &RunConfig, norm: NormalizationParams) -> CheckpointHeader {
    CheckpointHeader {
        net: cfg.net_config(),
        schedule: cfg.schedule,
        normalization: Some(norm),
        window: cfg.window.train_spec(),
        vmd: cfg.vmd_config(),
        horizon_policy: cfg.features.horizon_policy,
        train_state: None,
        optimizer: None,
        oracle: false,
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub log: Vec<EpochRecord>,
    pub header: CheckpointHeader,
}

impl TrainOutcome {
    /// Best-validation parameters, ready for inference.
    pub fn best_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_net(self.header.clone(), &self.trainer.best_net())
    }

    /// Full training state, for resuming.
    pub fn last_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_trainer(self.header.clone(), &self.trainer)
    }
}

/// Trains from scratch or continues `resume`. `on_epoch` runs after every
/// epoch with the header and trainer so callers can log and checkpoint.
pub fn train(
    cfg: &RunConfig,
    prepared: &Prepared,
    resume: Option<&Checkpoint>,
    mut on_epoch: impl FnMut(&CheckpointHeader, &Trainer, &EpochRecord, &EpochRecord, EpochEvent) -> Result<()>,
) -> Result<TrainOutcome> {
    let header = checkpoint_header(cfg, prepared.norm);
    let schedule = cfg.schedule.build()?;
    let tcfg = cfg.train_config();
    let mut trainer = match resume {
        Some(ck) => {
            if ck.header.net != header.net {
                return Err(Error::Config(
                    "resume checkpoint was trained with a different network".into(),
                ));
            }
            let mut t = ck.to_trainer(&tcfg)?;
            // a finished run may be extended by raising max_epochs
            t.state.stopped = t.state.epoch >= tcfg.max_epochs || t.state.epochs_since_best >= tcfg.patience;
            t
        }
        None => Trainer::new(DenoiserNet::new(header.net.clone())?, &tcfg),
    };
    let log = trainer.fit(&prepared.train, &prepared.val, &schedule, &tcfg, |t, tr, va, ev| {
        on_epoch(&header, t, tr, va, ev)
    })?;
    Ok(TrainOutcome { trainer, log, header })
}

pub fn eval_settings(cfg: &RunConfig, ck: &Checkpoint, step_minutes: i64) -> EvalSettings {
    EvalSettings {
        seed: crate::seed::derive_seed(cfg.seed, &[crate::seed::purpose::SAMPLING]),
        ensemble: cfg.infer.ensemble,
        grouping: cfg.infer.grouping,
        vmd: ck.header.vmd.clone(),
        horizon_policy: ck.header.horizon_policy,
        step_minutes,
    }
}

/// Forecasts raw windows with a checkpoint (or its oracle flag).
pub fn evaluate_checkpoint(
    cfg: &RunConfig,
    ck: &Checkpoint,
    windows: &[Sample],
    step_minutes: i64,
) -> Result<EvaluationReport> {
    let norm = ck
        .header
        .normalization
        .ok_or_else(|| Error::State("checkpoint has no normalization parameters".into()))?;
    let schedule = ck.header.schedule.build()?;
    let settings = eval_settings(cfg, ck, step_minutes);
    if ck.header.oracle {
        return evaluate(windows, Model::Oracle, &schedule, &norm, &settings);
    }
    let net = ck.to_net()?;
    evaluate(windows, Model::Net(&net), &schedule, &norm, &settings)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub input_channels: usize,
    pub param_count: usize,
    pub epochs: usize,
    pub best_epoch: usize,
    pub log: Vec<EpochRecord>,
    pub validation: MetricsReport,
    pub test: EvaluationReport,
    pub persistence: EvaluationReport,
}

/// Train, then score validation and test forecasts and the persistence
/// baseline.
pub fn run(cfg: &RunConfig, series: &TimeSeries) -> Result<RunSummary> {
    let prepared = prepare(cfg, series)?;
    let outcome = train(cfg, &prepared, None, |_, _, _, _, _| Ok(()))?;
    let ck = outcome.best_checkpoint();
    let validation = evaluate_checkpoint(cfg, &ck, &prepared.val_windows, prepared.step_minutes)?.overall;
    let test = evaluate_checkpoint(cfg, &ck, &prepared.test_windows, prepared.step_minutes)?;
    let persistence = evaluate_persistence(&prepared.test_windows, cfg.infer.grouping, prepared.step_minutes)?;
    Ok(RunSummary {
        input_channels: outcome.header.net.input_channels,
        param_count: outcome.trainer.net.param_count(),
        epochs: outcome.trainer.state.epoch,
        best_epoch: outcome.trainer.state.best_epoch,
        log: outcome.log,
        validation,
        test,
        persistence,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub validation: MetricsReport,
    pub test: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub version: u32,
    pub rows: Vec<SweepRow>,
    /// Chosen by validation MAPE; test metrics never enter the choice.
    pub best_k: usize,
}

/// One full run per mode count, in parallel, each with the same root seed.
pub fn sweep(cfg: &RunConfig, series: &TimeSeries, ks: &[usize]) -> Result<SweepReport> {
    if ks.is_empty() {
        return Err(Error::Config("empty k range".into()));
    }
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let rows = ks
        .par_iter()
        .map(|&k| {
            let mut c = cfg.clone();
            c.vmd.k_modes = k;
            let r = run(&c, series)?;
            Ok(SweepRow {
                k,
                validation: r.validation,
                test: r.test.overall,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let best_k = rows
        .iter()
        .min_by(|a, b| a.validation.mape.total_cmp(&b.validation.mape))
        .map(|r| r.k)
        .expect("non-empty");
    Ok(SweepReport {
        version: crate::infer::REPORT_VERSION,
        rows,
        best_k,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub version: u32,
    pub variant: AblationSpec,
    pub input_channels: usize,
    pub param_count: usize,
    pub lstm_param_count: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub summary: RunSummary,
}

pub fn ablate(cfg: &RunConfig, series: &TimeSeries, variant: AblationSpec) -> Result<AblationReport> {
    let c = variant.apply(cfg);
    let summary = run(&c, series)?;
    Ok(AblationReport {
        version: crate::infer::REPORT_VERSION,
        variant,
        input_channels: summary.input_channels,
        param_count: summary.param_count,
        lstm_param_count: lstm_param_count(&c.net_config()),
        lambda1: c.train.lambda1,
        lambda2: c.train.lambda2,
        summary,
    })
}

/// `y(t) = sin(2 pi t / 288) + 0.3 sin(2 pi t / 24) + noise_std * n(t)` at
/// five-minute resolution from 2020-01-01.
pub fn synthetic_series(len: usize, noise_std: f64, seed: u64) -> Result<TimeSeries> {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let tau = 2.0 * std::f64::consts::PI;
    let values = (0..len)
        .map(|t| {
            let t = t as f64;
            let n: f64 = StandardNormal.sample(&mut rng);
            (tau * t / 288.0).sin() + 0.3 * (tau * t / 24.0).sin() + noise_std * n
        })
        .collect();
    let start = chrono::NaiveDate::from_ymd_opt(2020, 1, 1)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .expect("valid date");
    TimeSeries::from_values(start, 5, values)
}
