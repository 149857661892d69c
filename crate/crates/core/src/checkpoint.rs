//! Versioned binary checkpoints.
//!
//! Layout: magic `MFRD`, u32 format version, u32 header length, JSON header,
//! u32 blob count, then per blob: u32 name length, UTF-8 name, u32 rank,
//! u32 dims, little-endian f32 values. All integers little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::dataset::{NormalizationParams, WindowSpec};
use crate::error::{Error, Result};
use crate::features::HorizonPolicy;
use crate::net::{DenoiserNet, NetConfig};
use crate::schedule::ScheduleConfig;
use crate::train::{Adam, AdamConfig, TrainConfig, TrainState, Trainer};
use crate::vmd::VmdConfig;

pub const MAGIC: &[u8; 4] = b"MFRD";
pub const FORMAT_VERSION: u32 = 1;

const OPT_M: &str = "opt.m/";
const OPT_V: &str = "opt.v/";
const BEST: &str = "best/";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub net: NetConfig,
    pub schedule: ScheduleConfig,
    pub normalization: Option<NormalizationParams>,
    pub window: WindowSpec,
    /// `None` means the raw channel only.
    pub vmd: Option<VmdConfig>,
    #[serde(default)]
    pub horizon_policy: HorizonPolicy,
    #[serde(default)]
    pub train_state: Option<TrainState>,
    #[serde(default)]
    pub optimizer: Option<AdamState>,
    /// Marks a fixture whose denoiser returns the true sample.
    #[serde(default)]
    pub oracle: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub cfg: AdamConfig,
    pub t: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Parameters only.
    pub fn from_net(header: CheckpointHeader, net: &DenoiserNet) -> Self {
        let p = net.params();
        let tensors = p.names().iter().cloned().zip(p.values().iter().cloned()).collect();
        Self { header, tensors }
    }

    /// Parameters, optimizer moments, best-so-far parameters and progress.
    pub fn from_trainer(mut header: CheckpointHeader, trainer: &Trainer) -> Self {
        header.train_state = Some(trainer.state.clone());
        header.optimizer = Some(AdamState {
            cfg: trainer.adam.cfg,
            t: trainer.adam.t,
        });
        let mut ck = Self::from_net(header, &trainer.net);
        let names = trainer.net.params().names();
        for (n, m) in names.iter().zip(&trainer.adam.m) {
            ck.tensors.push((format!("{OPT_M}{n}"), m.clone()));
        }
        for (n, v) in names.iter().zip(&trainer.adam.v) {
            ck.tensors.push((format!("{OPT_V}{n}"), v.clone()));
        }
        if let Some(best) = &trainer.best {
            for (n, b) in names.iter().zip(best) {
                ck.tensors.push((format!("{BEST}{n}"), b.clone()));
            }
        }
        ck
    }

    fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn prefixed(&self, prefix: &str, net: &DenoiserNet) -> Result<Option<Vec<Tensor>>> {
        if !self.tensors.iter().any(|(n, _)| n.starts_with(prefix)) {
            return Ok(None);
        }
        net.params()
            .names()
            .iter()
            .zip(net.params().values())
            .map(|(n, v)| {
                let t = self
                    .tensor(&format!("{prefix}{n}"))
                    .ok_or_else(|| Error::Checkpoint(format!("missing {prefix}{n}")))?;
                if t.dim() != v.dim() {
                    return Err(Error::Checkpoint(format!(
                        "{prefix}{n}: shape {:?} vs {:?}",
                        t.dim(),
                        v.dim()
                    )));
                }
                Ok(t.clone())
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    /// Rebuilds the network from the stored parameters.
    pub fn to_net(&self) -> Result<DenoiserNet> {
        let mut net = DenoiserNet::new(self.header.net.clone())?;
        let names: Vec<String> = net.params().names().to_vec();
        for name in &names {
            let t = self
                .tensor(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            net.params_mut().set(name, t.clone())?;
        }
        let expected = names.len();
        let stored = self
            .tensors
            .iter()
            .filter(|(n, _)| !(n.starts_with(OPT_M) || n.starts_with(OPT_V) || n.starts_with(BEST)))
            .count();
        if stored != expected {
            return Err(Error::Checkpoint(format!(
                "{stored} parameter blobs, architecture has {expected}"
            )));
        }
        Ok(net)
    }

    /// The network with its best-validation parameters when stored.
    pub fn to_best_net(&self) -> Result<DenoiserNet> {
        let mut net = self.to_net()?;
        if let Some(best) = self.prefixed(BEST, &net)? {
            for (id, b) in best.into_iter().enumerate() {
                *net.params_mut().value_mut(id) = b;
            }
        }
        Ok(net)
    }

    /// Restores a trainer to continue a run.
    pub fn to_trainer(&self, cfg: &TrainConfig) -> Result<Trainer> {
        let net = self.to_net()?;
        let mut adam = Adam::new(cfg.optimizer, net.params());
        if let Some(st) = self.header.optimizer {
            adam.cfg = st.cfg;
            adam.t = st.t;
            adam.m = self
                .prefixed(OPT_M, &net)?
                .ok_or_else(|| Error::Checkpoint("missing optimizer moments".into()))?;
            adam.v = self
                .prefixed(OPT_V, &net)?
                .ok_or_else(|| Error::Checkpoint("missing optimizer moments".into()))?;
        }
        let best = self.prefixed(BEST, &net)?;
        Ok(Trainer {
            net,
            adam,
            state: self.header.train_state.clone().unwrap_or_default(),
            best,
        })
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e: std::io::Error| Error::Checkpoint(e.to_string());
        let header = serde_json::to_vec(&self.header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(header.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&header).map_err(io)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes()).map_err(io)?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
            w.write_all(name.as_bytes()).map_err(io)?;
            w.write_all(&2u32.to_le_bytes()).map_err(io)?;
            for d in [t.nrows(), t.ncols()] {
                w.write_all(&(d as u32).to_le_bytes()).map_err(io)?;
            }
            let mut buf = Vec::with_capacity(t.len() * 4);
            for &v in t.iter() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
            w.write_all(&buf).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let io = |e: std::io::Error| Error::Checkpoint(format!("truncated or unreadable: {e}"));
        let mut u32_buf = [0u8; 4];
        let mut next_u32 = |r: &mut R| -> Result<u32> {
            r.read_exact(&mut u32_buf).map_err(io)?;
            Ok(u32::from_le_bytes(u32_buf))
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = next_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let hlen = next_u32(&mut r)? as usize;
        let mut hbuf = vec![0u8; hlen];
        r.read_exact(&mut hbuf).map_err(io)?;
        let header: CheckpointHeader =
            serde_json::from_slice(&hbuf).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let count = next_u32(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let nlen = next_u32(&mut r)? as usize;
            let mut nbuf = vec![0u8; nlen];
            r.read_exact(&mut nbuf).map_err(io)?;
            let name = String::from_utf8(nbuf).map_err(|e| Error::Checkpoint(e.to_string()))?;
            let rank = next_u32(&mut r)? as usize;
            let dims = (0..rank)
                .map(|_| next_u32(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let shape = match dims.as_slice() {
                [n] => (1, *n),
                [a, b] => (*a, *b),
                _ => return Err(Error::Checkpoint(format!("{name}: unsupported rank {rank}"))),
            };
            let mut vbuf = vec![0u8; shape.0 * shape.1 * 4];
            r.read_exact(&mut vbuf).map_err(io)?;
            let vals = vbuf
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            let t = Tensor::from_shape_vec(shape, vals).map_err(|e| Error::Checkpoint(e.to_string()))?;
            tensors.push((name, t));
        }
        Ok(Self { header, tensors })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        Ok(buf)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // write-then-rename keeps the previous file intact on failure
        let tmp = path.with_extension("tmp");
        let f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        self.write(BufWriter::new(f))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(BufReader::new(f))
    }
}
