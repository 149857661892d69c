//! Run configuration: one TOML file with a section per pipeline stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{ColumnMap, SplitSpec, WindowSpec};
use crate::error::{Error, Result};
use crate::features::HorizonPolicy;
use crate::infer::Grouping;
use crate::net::NetConfig;
use crate::schedule::ScheduleConfig;
use crate::train::TrainConfig;
use crate::vmd::VmdConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Input CSV; relative paths resolve against the config file.
    pub path: Option<PathBuf>,
    pub columns: ColumnMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowSection {
    pub lookback: usize,
    pub horizon: usize,
    /// Stride between training windows.
    pub stride: usize,
    /// Stride between evaluation origins; defaults to the horizon.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_stride: Option<usize>,
}

impl Default for WindowSection {
    fn default() -> Self {
        let w = WindowSpec::default();
        Self {
            lookback: w.lookback,
            horizon: w.horizon,
            stride: w.stride,
            eval_stride: None,
        }
    }
}

impl WindowSection {
    pub fn train_spec(&self) -> WindowSpec {
        WindowSpec {
            lookback: self.lookback,
            horizon: self.horizon,
            stride: self.stride,
        }
    }

    pub fn eval_spec(&self) -> WindowSpec {
        WindowSpec {
            stride: self.eval_stride.unwrap_or(self.horizon),
            ..self.train_spec()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeaturesSection {
    pub horizon_policy: HorizonPolicy,
}

/// Network settings; channel count and sequence length follow from the
/// VMD and window sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub model_dim: usize,
    pub n_heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lstm_hidden: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feedforward_dim: Option<usize>,
    pub dropout: f64,
    pub use_lstm: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let n = NetConfig::default();
        Self {
            model_dim: n.model_dim,
            n_heads: n.n_heads,
            encoder_layers: n.encoder_layers,
            decoder_layers: n.decoder_layers,
            lstm_hidden: n.lstm_hidden,
            feedforward_dim: n.feedforward_dim,
            dropout: n.dropout,
            use_lstm: n.use_lstm,
        }
    }
}

impl ModelSection {
    pub fn net_config(&self, input_channels: usize, seq_len: usize, seed: u64) -> NetConfig {
        NetConfig {
            input_channels,
            seq_len,
            model_dim: self.model_dim,
            n_heads: self.n_heads,
            encoder_layers: self.encoder_layers,
            decoder_layers: self.decoder_layers,
            lstm_hidden: self.lstm_hidden,
            feedforward_dim: self.feedforward_dim,
            dropout: self.dropout,
            use_lstm: self.use_lstm,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferSection {
    pub ensemble: usize,
    pub grouping: Grouping,
}

impl Default for InferSection {
    fn default() -> Self {
        Self {
            ensemble: 1,
            grouping: Grouping::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; every random stream is derived from it.
    pub seed: u64,
    pub data: DataSection,
    pub split: SplitSpec,
    pub window: WindowSection,
    /// `k_modes = 0` disables decomposition (raw channel only).
    pub vmd: VmdConfig,
    pub features: FeaturesSection,
    pub schedule: ScheduleConfig,
    pub net: ModelSection,
    pub train: TrainConfig,
    pub infer: InferSection,
    pub output: OutputSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses a config file and resolves relative paths against its
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(p) = cfg.data.path.as_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if cfg.output.dir.is_relative() {
            cfg.output.dir = base.join(&cfg.output.dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn vmd_config(&self) -> Option<VmdConfig> {
        (self.vmd.k_modes > 0).then(|| self.vmd.clone())
    }

    pub fn input_channels(&self) -> usize {
        1 + self.vmd.k_modes
    }

    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        self.window.train_spec().validate()?;
        self.window.eval_spec().validate()?;
        if let Some(v) = self.vmd_config() {
            v.validate()?;
        }
        self.schedule.build()?;
        self.net_config().validate()?;
        self.train.validate()?;
        if self.infer.ensemble == 0 {
            return Err(Error::Config("infer.ensemble must be at least 1".into()));
        }
        if let Some(p) = &self.data.path {
            if !p.exists() {
                return Err(Error::Config(format!("data path {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn net_config(&self) -> NetConfig {
        self.net.net_config(
            self.input_channels(),
            self.window.lookback + self.window.horizon,
            crate::seed::derive_seed(self.seed, &[crate::seed::purpose::INIT]),
        )
    }

    /// The training config with its seed derived from the root seed.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: crate::seed::derive_seed(self.seed, &[crate::seed::purpose::EPOCH]),
            ..self.train.clone()
        }
    }
}

/// Ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationSpec {
    Full,
    WoVmd,
    WoLstm,
    WoVmdLstm,
    WoF,
}

impl AblationSpec {
    pub const ALL: [AblationSpec; 5] = [Self::Full, Self::WoVmd, Self::WoLstm, Self::WoVmdLstm, Self::WoF];

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::WoVmd => "wo_vmd",
            Self::WoLstm => "wo_lstm",
            Self::WoVmdLstm => "wo_vmd_lstm",
            Self::WoF => "wo_f",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation variant {s:?}")))
    }

    /// Applies the variant to a copy of `cfg`; seeds are untouched so
    /// variants differ only by their intended change.
    pub fn apply(self, cfg: &RunConfig) -> RunConfig {
        let mut c = cfg.clone();
        match self {
            Self::Full => {}
            Self::WoVmd => c.vmd.k_modes = 0,
            Self::WoLstm => c.net.use_lstm = false,
            Self::WoVmdLstm => {
                c.vmd.k_modes = 0;
                c.net.use_lstm = false;
            }
            Self::WoF => c.train.lambda2 = 0.0,
        }
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::lstm_param_count;

    #[test]
    fn defaults_roundtrip() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn custom_roundtrip_and_partial_files() {
        let text = r#"
seed = 42
[data]
path = "load.csv"
columns = { timestamp = "ts", load = "mw" }
[split]
mode = "date-range"
train_range = { start = "2006-01-01", end = "2006-06-30" }
test_range = { start = "2006-08-01", end = "2006-12-31" }
[window]
lookback = 96
horizon = 12
stride = 4
[vmd]
k_modes = 3
init = { kind = "random", seed = 7 }
[features]
horizon_policy = "persistence-pad"
[net]
model_dim = 32
[train]
lr = 0.001
precision = "f64"
[infer]
grouping = "monthly"
ensemble = 3
"#;
        let cfg = RunConfig::from_toml(text).unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.vmd.k_modes, 3);
        assert_eq!(cfg.schedule, ScheduleConfig::default());
        assert_eq!(cfg.features.horizon_policy, HorizonPolicy::PersistencePad);
        assert_eq!(cfg.window.eval_spec().stride, 12);
        let again = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        assert!(matches!(RunConfig::from_toml("bogus = 1"), Err(Error::Config(_))));
        assert!(matches!(
            RunConfig::from_toml("[train]\nlearning_rate = 1.0"),
            Err(Error::Config(_))
        ));
        let mut cfg = RunConfig::default();
        cfg.train.lr = 0.0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = RunConfig::default();
        cfg.net.n_heads = 5;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = RunConfig::default();
        cfg.data.path = Some("/definitely/not/here.csv".into());
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn ablations_change_only_their_target() {
        let base = RunConfig::default();
        let v = AblationSpec::WoVmd.apply(&base);
        assert_eq!(v.input_channels(), 1);
        assert!(v.vmd_config().is_none());
        let l = AblationSpec::WoLstm.apply(&base);
        assert_eq!(lstm_param_count(&l.net_config()), 0);
        assert_eq!(l.net_config().seed, base.net_config().seed);
        let f = AblationSpec::WoF.apply(&base);
        assert_eq!(f.train.lambda2, 0.0);
        assert_eq!(f.train.lambda1, base.train.lambda1);
        let both = AblationSpec::WoVmdLstm.apply(&base);
        assert_eq!((both.input_channels(), both.net.use_lstm), (1, false));
        for v in AblationSpec::ALL {
            assert_eq!(AblationSpec::parse(v.name()).unwrap(), v);
        }
        assert!(AblationSpec::parse("nope").is_err());
    }
}
