//! Run configuration, read from a sectioned TOML file.
//!
//! ```toml
//! seed = 7
//! checkpoint_every = 1
//!
//! [data]              # either `path = "dir"` with train.dgl/test.dgl, or a generator spec
//! num_classes = 6
//! n_train = 3000
//! n_test = 3000
//! modalities = [
//!   { input_dim = 20, separation = 3.0, noise = 1.0 },
//!   { input_dim = 20, separation = 1.2, noise = 1.0 },
//! ]
//!
//! [model]
//! hidden_dims = [64]
//! output_dim = 32
//! fusion = "concat"    # or "mlp" with mlp_hidden
//!
//! [train]
//! mode = "dgl"
//! alpha = 4.0
//!
//! [sweep]
//! alphas = [0.0, 1.0, 2.0, 4.0]
//!
//! [analyze]
//! modality = 1
//! ```
//!
//! The root `seed` is split into independent data, init and shuffle streams;
//! it overrides `train.seed`. Relative paths are resolved against the
//! directory holding the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EncoderSpec, FusionKind, FusionSpec, ModelSpec};
use crate::rng::{derive_seed, Stream};
use crate::synthdata::{GenSpec, ModalitySpec};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory with `train.dgl` and `test.dgl`; when set the generator keys are ignored.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub num_classes: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Generator seed; derived from the root seed when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub modalities: Vec<ModalitySpec>,
}

impl Default for DataConfig {
    fn default() -> Self {
        let spec = GenSpec::default_imbalanced(0);
        Self {
            path: None,
            num_classes: spec.num_classes,
            n_train: spec.n_train,
            n_test: spec.n_test,
            seed: None,
            modalities: spec.modalities,
        }
    }
}

impl DataConfig {
    pub fn gen_spec(&self, root_seed: u64) -> GenSpec {
        GenSpec {
            num_classes: self.num_classes,
            modalities: self.modalities.clone(),
            n_train: self.n_train,
            n_test: self.n_test,
            seed: self.seed.unwrap_or_else(|| derive_seed(root_seed, Stream::Data)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden widths shared by every encoder unless `encoders` is given.
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub fusion: FusionKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mlp_hidden: Option<usize>,
    /// Explicit per-modality encoders; input dims must match the data.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub encoders: Option<Vec<EncoderSpec>>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dims: vec![64],
            output_dim: 32,
            fusion: FusionKind::Concat,
            mlp_hidden: None,
            encoders: None,
        }
    }
}

impl ModelConfig {
    pub fn model_spec(&self, input_dims: &[usize], num_classes: usize) -> Result<ModelSpec> {
        let encoders = match &self.encoders {
            Some(e) => {
                let dims: Vec<usize> = e.iter().map(|e| e.input_dim).collect();
                if dims != input_dims {
                    return Err(Error::config(format!(
                        "encoder input dims {dims:?} do not match data dims {input_dims:?}"
                    )));
                }
                e.clone()
            }
            None => input_dims
                .iter()
                .map(|&input_dim| EncoderSpec {
                    input_dim,
                    hidden_dims: self.hidden_dims.clone(),
                    output_dim: self.output_dim,
                })
                .collect(),
        };
        let fusion = match self.fusion {
            FusionKind::Concat => FusionSpec {
                kind: FusionKind::Concat,
                mlp_hidden: self.mlp_hidden,
            },
            FusionKind::Mlp => FusionSpec {
                kind: FusionKind::Mlp,
                mlp_hidden: self.mlp_hidden,
            },
        };
        let spec = ModelSpec {
            encoders,
            fusion,
            num_classes,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub alphas: Vec<f64>,
    /// Worker threads for ablation and sweep members; 1 runs them serially.
    pub threads: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            alphas: vec![0.0, 1.0, 2.0, 4.0],
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeConfig {
    /// Checkpoints to analyze in order; defaults to `<out>/checkpoints/*.ckpt`.
    pub checkpoints: Vec<PathBuf>,
    /// One-based modality whose encoder gradient is analyzed.
    pub modality: usize,
    /// Which split to analyze.
    pub split: crate::synthdata::Split,
    /// Replace every other modality's representation with zeros (a probe
    /// where all suppression factors are exactly one).
    pub zero_others: bool,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        Self {
            checkpoints: Vec::new(),
            modality: 1,
            split: crate::synthdata::Split::Train,
            zero_others: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Write a checkpoint every this many epochs (0 = final checkpoint only).
    pub checkpoint_every: usize,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
    pub analyze: AnalyzeConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("invalid config: {e}")))?;
        cfg.train.seed = cfg.seed;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = cfg.data.path.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.out.as_mut() {
            resolve(p);
        }
        cfg.analyze.checkpoints.iter_mut().for_each(resolve);
        Ok(cfg)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}
