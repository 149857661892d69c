use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chrono::{Duration, NaiveDateTime};
use log::info;
use serde::Serialize;

use mfrd::checkpoint::Checkpoint;
use mfrd::config::{AblationSpec, RunConfig};
use mfrd::dataset::{load_csv, make_windows, split, TimeSeries, WindowSpec};
use mfrd::features::reconstruct_inference;
use mfrd::harness;
use mfrd::infer::{
    evaluate_persistence, sample_forecast, EvaluationReport, Grouping, MetricsReport, SamplingOptions, REPORT_VERSION,
};
use mfrd::seed::{derive_seed, purpose};
use mfrd::train::EpochEvent;
use mfrd::vmd::decompose as vmd_decompose;
use mfrd::Error;

use crate::Common;

/// Maps an error chain to the process exit code.
pub fn exit_code(e: &anyhow::Error) -> i32 {
    e.chain()
        .find_map(|c| c.downcast_ref::<Error>())
        .map(Error::exit_code)
        .unwrap_or(2)
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output.dir = out.clone();
    }
    fs::create_dir_all(&cfg.output.dir).map_err(|e| Error::io(&cfg.output.dir, e))?;
    Ok(cfg)
}

fn input_series(cfg: &RunConfig, input: Option<PathBuf>) -> Result<TimeSeries> {
    let path = input
        .or_else(|| cfg.data.path.clone())
        .ok_or_else(|| Error::Config("no input CSV: pass --input or set data.path".into()))?;
    Ok(load_csv(&path, &cfg.data.columns)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))?;
    info!("wrote {}", path.display());
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

#[derive(Serialize)]
struct DecomposeDiagnostics {
    version: u32,
    n: usize,
    k: usize,
    center_freqs: Vec<f64>,
    iterations: usize,
    converged: bool,
    final_residual: f64,
    residual_rms: f64,
    step_minutes: i64,
}

pub fn decompose(common: &Common, input: Option<PathBuf>, k: Option<usize>) -> Result<()> {
    let cfg = load_config(common)?;
    let series = input_series(&cfg, input)?;
    let mut vmd = cfg.vmd.clone();
    if let Some(k) = k {
        vmd.k_modes = k;
    }
    vmd.validate()?;
    let modes = vmd_decompose(series.values(), &vmd)?;
    let residual = modes.residual(series.values());

    let csv_path = cfg.output.dir.join("modes.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::Data(e.to_string()))?;
    let mut header: Vec<String> = (1..=modes.k()).map(|i| format!("mode_{i}")).collect();
    header.push("residual".into());
    w.write_record(&header)?;
    for t in 0..series.len() {
        let mut row: Vec<String> = modes.modes.iter().map(|m| m[t].to_string()).collect();
        row.push(residual[t].to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    info!("wrote {}", csv_path.display());

    let rms = (residual.iter().map(|r| r * r).sum::<f64>() / residual.len() as f64).sqrt();
    write_json(
        &cfg.output.dir.join("decompose.json"),
        &DecomposeDiagnostics {
            version: REPORT_VERSION,
            n: series.len(),
            k: modes.k(),
            center_freqs: modes.center_freqs.clone(),
            iterations: modes.iterations_used,
            converged: modes.converged,
            final_residual: modes.final_residual,
            residual_rms: rms,
            step_minutes: series.step_minutes(),
        },
    )
}

pub fn train(common: &Common, resume: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(common)?;
    let series = input_series(&cfg, None)?;
    let prepared = harness::prepare(&cfg, &series)?;
    info!(
        "{} training and {} validation windows, {} input channels",
        prepared.train.len(),
        prepared.val.len(),
        cfg.input_channels()
    );
    let resume = resume.map(|p| Checkpoint::load(&p)).transpose()?;
    let dir = cfg.output.dir.clone();
    let log_path = dir.join("train_log.jsonl");
    let mut log = if resume.is_some() {
        BufWriter::new(
            fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&log_path)
                .map_err(|e| Error::io(&log_path, e))?,
        )
    } else {
        create(&log_path)?
    };
    let outcome = harness::train(&cfg, &prepared, resume.as_ref(), |header, trainer, tr, va, event| {
        for rec in [tr, va] {
            let line = serde_json::to_string(rec).map_err(|e| Error::Data(e.to_string()))?;
            writeln!(log, "{line}")
                .and_then(|_| log.flush())
                .map_err(|e| Error::io(&log_path, e))?;
        }
        info!(
            "epoch {}: train {:.6} val {:.6}",
            tr.epoch, tr.weighted_total, va.weighted_total
        );
        Checkpoint::from_trainer(header.clone(), trainer).save(&dir.join("last.mfrd"))?;
        if event == EpochEvent::Improved {
            Checkpoint::from_net(header.clone(), &trainer.net).save(&dir.join("checkpoint.mfrd"))?;
        }
        Ok(())
    });
    let outcome = outcome.with_context(|| {
        format!(
            "training stopped; last good state is in {}",
            dir.join("last.mfrd").display()
        )
    })?;
    info!(
        "finished after {} epochs (best {})",
        outcome.trainer.state.epoch, outcome.trainer.state.best_epoch
    );
    Ok(())
}

#[derive(Serialize)]
struct ForecastOutput {
    version: u32,
    timestamps: Vec<NaiveDateTime>,
    y_hat: Vec<f64>,
    y_hat_normalized: Vec<f64>,
    seeds: Vec<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ensemble_std: Option<Vec<f64>>,
}

pub fn forecast(common: &Common, checkpoint: &Path, input: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(common)?;
    let series = input_series(&cfg, input)?;
    let ck = Checkpoint::load(checkpoint)?;
    let h = &ck.header;
    let norm = h
        .normalization
        .ok_or_else(|| Error::State("checkpoint has no normalization parameters".into()))?;
    if h.oracle {
        return Err(Error::Config("an oracle checkpoint cannot forecast an unknown future".into()).into());
    }
    let spec = WindowSpec { stride: 1, ..h.window };
    if series.len() < spec.lookback {
        return Err(Error::InsufficientData {
            needed: spec.lookback,
            have: series.len(),
        }
        .into());
    }
    let look = norm.normalize(&series.values()[series.len() - spec.lookback..]);
    let (recon, mask) = reconstruct_inference(&look, h.vmd.as_ref(), &spec, h.horizon_policy)?;
    let net = ck.to_net()?;
    let schedule = h.schedule.build()?;
    let members = cfg.infer.ensemble;
    let seeds: Vec<u64> = (0..members)
        .map(|m| derive_seed(cfg.seed, &[purpose::SAMPLING, u64::MAX, m as u64]))
        .collect();
    let runs = seeds
        .iter()
        .map(|&s| {
            sample_forecast(
                &recon,
                &mask,
                &net,
                &schedule,
                Some(&norm),
                s,
                SamplingOptions::default(),
            )
        })
        .collect::<mfrd::Result<Vec<_>>>()?;
    let l = spec.horizon;
    let mean = |f: &dyn Fn(usize) -> Vec<f64>| -> Vec<f64> {
        (0..l)
            .map(|t| (0..members).map(|m| f(m)[t]).sum::<f64>() / members as f64)
            .collect()
    };
    let y_hat = mean(&|m| runs[m].y_hat.clone());
    let y_hat_normalized = mean(&|m| runs[m].y_hat_normalized.clone());
    let ensemble_std = (members > 1).then(|| {
        (0..l)
            .map(|t| (runs.iter().map(|r| (r.y_hat[t] - y_hat[t]).powi(2)).sum::<f64>() / members as f64).sqrt())
            .collect()
    });
    let last = *series.timestamps().last().expect("non-empty series");
    let timestamps: Vec<NaiveDateTime> = (1..=l)
        .map(|i| last + Duration::minutes(series.step_minutes() * i as i64))
        .collect();

    let mut w = create(&cfg.output.dir.join("forecast.csv"))?;
    writeln!(w, "timestamp,y_hat")?;
    for (t, y) in timestamps.iter().zip(&y_hat) {
        writeln!(w, "{},{y}", t.format("%Y-%m-%dT%H:%M:%S"))?;
    }
    w.flush()?;
    write_json(
        &cfg.output.dir.join("forecast.json"),
        &ForecastOutput {
            version: REPORT_VERSION,
            timestamps,
            y_hat,
            y_hat_normalized,
            seeds,
            ensemble_std,
        },
    )
}

#[derive(Serialize)]
struct MetricsFile<'a> {
    version: u32,
    model: &'a str,
    windows: usize,
    overall: &'a MetricsReport,
    groups: &'a [MetricsReport],
    persistence: &'a MetricsReport,
}

fn write_evaluation(dir: &Path, report: &EvaluationReport, persistence: &EvaluationReport) -> Result<()> {
    write_json(
        &dir.join("metrics.json"),
        &MetricsFile {
            version: report.version,
            model: &report.model,
            windows: report.windows.len(),
            overall: &report.overall,
            groups: &report.groups,
            persistence: &persistence.overall,
        },
    )?;
    let path = dir.join("windows.csv");
    let mut w = create(&path)?;
    writeln!(w, "window,step,timestamp,y,y_hat")?;
    for win in &report.windows {
        for (i, ((t, y), yh)) in win.timestamps.iter().zip(&win.y).zip(&win.y_hat).enumerate() {
            writeln!(w, "{},{},{},{y},{yh}", win.window, i + 1, t.format("%Y-%m-%dT%H:%M:%S"))?;
        }
    }
    w.flush()?;
    info!("wrote {}", path.display());
    Ok(())
}

fn parse_grouping(s: &str) -> Result<Grouping> {
    match s {
        "none" => Ok(Grouping::None),
        "monthly" => Ok(Grouping::Monthly),
        other => Err(Error::Config(format!("unknown grouping {other:?}")).into()),
    }
}

pub fn evaluate(
    common: &Common,
    checkpoint: &Path,
    input: Option<PathBuf>,
    grouping: Option<String>,
    ensemble: Option<usize>,
) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(g) = grouping {
        cfg.infer.grouping = parse_grouping(&g)?;
    }
    if let Some(n) = ensemble {
        if n == 0 {
            return Err(Error::Config("--ensemble must be at least 1".into()).into());
        }
        cfg.infer.ensemble = n;
    }
    let ck = Checkpoint::load(checkpoint)?;
    let spec = WindowSpec {
        stride: cfg.window.eval_spec().stride,
        ..ck.header.window
    };
    let (windows, step) = match input {
        Some(path) => {
            let test = load_csv(&path, &cfg.data.columns)?;
            (make_windows(&test, &spec)?, test.step_minutes())
        }
        None => {
            let series = input_series(&cfg, None)?;
            let parts = split(&series, &cfg.split)?;
            (
                mfrd::dataset::make_eval_windows(Some(&parts.val), &parts.test, &spec)?,
                series.step_minutes(),
            )
        }
    };
    info!("evaluating {} windows", windows.len());
    let report = harness::evaluate_checkpoint(&cfg, &ck, &windows, step)?;
    let persistence = evaluate_persistence(&windows, cfg.infer.grouping, step)?;
    write_evaluation(&cfg.output.dir, &report, &persistence)
}

fn parse_k_range(s: &str) -> Result<Vec<usize>> {
    let bad = || Error::Config(format!("k range {s:?} is not of the form a..b"));
    let (a, b) = s.split_once("..").ok_or_else(bad)?;
    let b = b.strip_prefix('=').unwrap_or(b);
    let (a, b): (usize, usize) = (
        a.trim().parse().map_err(|_| bad())?,
        b.trim().parse().map_err(|_| bad())?,
    );
    if a == 0 || a > b {
        return Err(bad().into());
    }
    Ok((a..=b).collect())
}

pub fn sweep(common: &Common, k_range: &str) -> Result<()> {
    let cfg = load_config(common)?;
    let ks = parse_k_range(k_range)?;
    let series = input_series(&cfg, None)?;
    let report = harness::sweep(&cfg, &series, &ks)?;
    let mut w = create(&cfg.output.dir.join("sweep.csv"))?;
    writeln!(w, "k,val_mape,test_rmse,test_mae,test_mape,test_r2")?;
    for r in &report.rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.k, r.validation.mape, r.test.rmse, r.test.mae, r.test.mape, r.test.r2
        )?;
    }
    w.flush()?;
    info!("best k by validation MAPE: {}", report.best_k);
    write_json(&cfg.output.dir.join("sweep.json"), &report)
}

#[derive(Serialize)]
struct AblationFile {
    version: u32,
    variants: Vec<harness::AblationReport>,
}

pub fn ablate(common: &Common, variant: &str) -> Result<()> {
    let cfg = load_config(common)?;
    let variants = if variant == "all" {
        AblationSpec::ALL.to_vec()
    } else {
        vec![AblationSpec::parse(variant)?]
    };
    let series = input_series(&cfg, None)?;
    let reports = variants
        .into_iter()
        .map(|v| {
            info!("ablation {}", v.name());
            harness::ablate(&cfg, &series, v)
        })
        .collect::<mfrd::Result<Vec<_>>>()?;
    write_json(
        &cfg.output.dir.join("ablation.json"),
        &AblationFile {
            version: REPORT_VERSION,
            variants: reports,
        },
    )
}
