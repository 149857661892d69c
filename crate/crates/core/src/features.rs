//! Multi-frequency reconstruction: the raw normalized window stacked with
//! its VMD modes, plus the observation mask used during sampling.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{s, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Sample, WindowSpec};
use crate::error::{Error, Result};
use crate::vmd::{decompose, VmdConfig};

/// How the unknown horizon is treated when decomposing at inference time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HorizonPolicy {
    /// Decompose the look-back alone; horizon mode values start at zero.
    #[default]
    LookbackOnly,
    /// Pad the horizon with the last observed value, decompose the full
    /// window, and keep the horizon mode values as the starting point.
    PersistencePad,
}

/// Channels x time tensor: channel 0 is the normalized load, channels
/// `1..=K` the modes in ascending center frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructedSample {
    pub channels: Array2<f64>,
    pub lookback: usize,
    pub horizon: usize,
    pub time_index: usize,
}

impl ReconstructedSample {
    pub fn n_channels(&self) -> usize {
        self.channels.nrows()
    }

    pub fn len(&self) -> usize {
        self.channels.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn k_modes(&self) -> usize {
        self.n_channels() - 1
    }

    pub fn raw(&self) -> ndarray::ArrayView1<'_, f64> {
        self.channels.row(0)
    }
}

/// `true` marks an observed (conditioning) position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservationMask {
    pub mask: Array2<bool>,
}

impl ObservationMask {
    /// Look-back observed on every channel, horizon generated.
    pub fn lookback(channels: usize, lookback: usize, horizon: usize) -> Self {
        let mut mask = Array2::from_elem((channels, lookback + horizon), false);
        mask.slice_mut(s![.., ..lookback]).fill(true);
        Self { mask }
    }

    pub fn observed_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Overwrites observed positions of `x` with `known`.
    pub fn apply(&self, x: &mut Array2<f64>, known: &Array2<f64>) {
        ndarray::Zip::from(x).and(&self.mask).and(known).for_each(|x, &m, &k| {
            if m {
                *x = k;
            }
        });
    }
}

fn stack(
    raw: &[f64],
    vmd: Option<&VmdConfig>,
    lookback: usize,
    horizon: usize,
    time_index: usize,
) -> Result<ReconstructedSample> {
    let m = raw.len();
    let modes = match vmd {
        Some(cfg) => decompose(raw, cfg)?.modes,
        None => Vec::new(),
    };
    let mut channels = Array2::zeros((1 + modes.len(), m));
    for (t, &v) in raw.iter().enumerate() {
        channels[[0, t]] = v;
    }
    for (k, mode) in modes.iter().enumerate() {
        for (t, &v) in mode.iter().enumerate() {
            channels[[k + 1, t]] = v;
        }
    }
    Ok(ReconstructedSample {
        channels,
        lookback,
        horizon,
        time_index,
    })
}

/// Decomposes the whole window (look-back and horizon are both known at
/// training time). `None` keeps only the raw channel.
pub fn reconstruct(sample: &Sample, vmd: Option<&VmdConfig>) -> Result<ReconstructedSample> {
    stack(&sample.values, vmd, sample.lookback, sample.horizon, sample.time_index)
}

pub fn reconstruct_training(sample: &Sample, cfg: &VmdConfig) -> Result<ReconstructedSample> {
    reconstruct(sample, Some(cfg))
}

/// Reconstructs many samples in parallel, preserving order.
pub fn reconstruct_all(samples: &[Sample], vmd: Option<&VmdConfig>) -> Result<Vec<ReconstructedSample>> {
    samples.par_iter().map(|s| reconstruct(s, vmd)).collect()
}

/// Builds the conditioning tensor from the look-back alone. Horizon
/// positions of every channel are unobserved.
pub fn reconstruct_inference(
    lookback_only: &[f64],
    vmd: Option<&VmdConfig>,
    spec: &WindowSpec,
    policy: HorizonPolicy,
) -> Result<(ReconstructedSample, ObservationMask)> {
    if spec.horizon == 0 || spec.lookback == 0 {
        return Err(Error::Config(format!(
            "look-back {} and horizon {} must be positive",
            spec.lookback, spec.horizon
        )));
    }
    if lookback_only.len() != spec.lookback {
        return Err(Error::Shape(format!(
            "look-back has {} points, window expects {}",
            lookback_only.len(),
            spec.lookback
        )));
    }
    let m = spec.lookback + spec.horizon;
    let recon = match policy {
        HorizonPolicy::LookbackOnly => {
            let part = stack(lookback_only, vmd, spec.lookback, spec.horizon, 0)?;
            let mut channels = Array2::zeros((part.n_channels(), m));
            channels.slice_mut(s![.., ..spec.lookback]).assign(&part.channels);
            ReconstructedSample {
                channels,
                lookback: spec.lookback,
                horizon: spec.horizon,
                time_index: 0,
            }
        }
        HorizonPolicy::PersistencePad => {
            let last = *lookback_only.last().expect("non-empty look-back");
            let mut padded = lookback_only.to_vec();
            padded.resize(m, last);
            let mut r = stack(&padded, vmd, spec.lookback, spec.horizon, 0)?;
            r.channels.slice_mut(s![0, spec.lookback..]).fill(0.0);
            r
        }
    };
    let mask = ObservationMask::lookback(recon.n_channels(), spec.lookback, spec.horizon);
    Ok((recon, mask))
}

const CONTAINER_MAGIC: &[u8; 4] = b"MFRT";
const CONTAINER_VERSION: u32 = 1;

/// Writes samples as: magic, version, count, then per sample a header
/// (channels, M, look-back, horizon as u32; time index as u64) followed by
/// row-major little-endian f32 values.
pub fn write_samples<W: Write>(mut w: W, samples: &[ReconstructedSample]) -> std::io::Result<()> {
    w.write_all(CONTAINER_MAGIC)?;
    w.write_all(&CONTAINER_VERSION.to_le_bytes())?;
    w.write_all(&(samples.len() as u64).to_le_bytes())?;
    for s in samples {
        for v in [s.n_channels(), s.len(), s.lookback, s.horizon] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        w.write_all(&(s.time_index as u64).to_le_bytes())?;
        for &v in s.channels.iter() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_samples<R: Read>(mut r: R) -> Result<Vec<ReconstructedSample>> {
    let bad = |e: std::io::Error| Error::Data(format!("sample container: {e}"));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(bad)?;
    if &magic != CONTAINER_MAGIC {
        return Err(Error::Data("sample container: bad magic".into()));
    }
    let version = read_u32(&mut r).map_err(bad)?;
    if version != CONTAINER_VERSION {
        return Err(Error::Data(format!("sample container: unsupported version {version}")));
    }
    let count = read_u64(&mut r).map_err(bad)? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let c = read_u32(&mut r).map_err(bad)? as usize;
        let m = read_u32(&mut r).map_err(bad)? as usize;
        let lookback = read_u32(&mut r).map_err(bad)? as usize;
        let horizon = read_u32(&mut r).map_err(bad)? as usize;
        let time_index = read_u64(&mut r).map_err(bad)? as usize;
        let mut buf = vec![0u8; c * m * 4];
        r.read_exact(&mut buf).map_err(bad)?;
        let vals: Vec<f64> = buf
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        let channels = Array2::from_shape_vec((c, m), vals).map_err(|e| Error::Data(e.to_string()))?;
        out.push(ReconstructedSample {
            channels,
            lookback,
            horizon,
            time_index,
        });
    }
    Ok(out)
}

pub fn save_samples(path: &Path, samples: &[ReconstructedSample]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_samples(BufWriter::new(f), samples).map_err(|e| Error::io(path, e))
}

pub fn load_samples(path: &Path) -> Result<Vec<ReconstructedSample>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_samples(BufReader::new(f))
}
