//! Run configuration: a sectioned key = value file with typed validation,
//! merged as flags > file > defaults. Unknown keys are rejected by name.

use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::eval::{EvalSpec, NoiseMode, SelectionMode};
use crate::graph::SynthSpec;
use crate::model::ModelConfig;
use crate::train::{OperatorRegime, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value` or `[section]`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown section `{name}`")]
    UnknownSection { line: usize, name: String },
    #[error("line {line}: unknown key `{key}` in section [{section}]")]
    UnknownKey {
        line: usize,
        section: String,
        key: String,
    },
    #[error("line {line}: key `{key}`: expected {expected}, got `{value}`")]
    TypeMismatch {
        line: usize,
        key: String,
        expected: &'static str,
        value: String,
    },
    #[error("constraint violation for `{key}`: {detail}")]
    Constraint { key: String, detail: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Synthetic data section.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DataSection {
    pub nodes: usize,
    pub horizon: usize,
    pub radius_km: f64,
    pub diffusion: f64,
    pub advection: f64,
    pub forcing: f64,
    pub channels: usize,
    pub train_frac: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        let s = SynthSpec::default();
        DataSection {
            nodes: s.n_nodes,
            horizon: s.horizon,
            radius_km: s.connection_radius_km,
            diffusion: s.diffusion,
            advection: s.advection,
            forcing: s.forcing_amplitude,
            channels: s.n_channels,
            train_frac: 0.8,
        }
    }
}

impl DataSection {
    pub fn synth_spec(&self, seed: u64) -> SynthSpec {
        SynthSpec {
            n_nodes: self.nodes,
            connection_radius_km: self.radius_km,
            diffusion: self.diffusion,
            advection: self.advection,
            forcing_amplitude: self.forcing,
            n_channels: self.channels,
            horizon: self.horizon,
            seed,
        }
    }
}

/// Architecture dims; channel counts come from the dataset at run time.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelSection {
    pub tau: usize,
    pub d_node: usize,
    pub d_edge: usize,
    pub d_msg: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub bias_per_layer: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::with_channels(1, vec![0]);
        ModelSection {
            tau: m.tau,
            d_node: m.d_node,
            d_edge: m.d_edge,
            d_msg: m.d_msg,
            layers: m.layers,
            heads: m.heads,
            d_ff: m.d_ff,
            dropout: m.dropout,
            bias_per_layer: m.bias_per_layer,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self, in_channels: usize, target_channels: Vec<usize>) -> ModelConfig {
        ModelConfig {
            tau: self.tau,
            in_channels,
            target_channels,
            d_node: self.d_node,
            d_edge: self.d_edge,
            d_msg: self.d_msg,
            layers: self.layers,
            heads: self.heads,
            d_ff: self.d_ff,
            dropout: self.dropout,
            bias_per_layer: self.bias_per_layer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSection {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub warmup_frac: f64,
    pub end_lr_factor: f64,
    pub regime: String,
    pub dt: usize,
    pub dt_lo: usize,
    pub dt_hi: usize,
    pub k_max: usize,
    pub retrieval_k: usize,
    pub tau_r: usize,
    pub log_every: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            steps: t.total_steps,
            batch: t.batch_size,
            lr: t.base_lr,
            weight_decay: t.weight_decay,
            grad_clip: t.grad_clip,
            warmup_frac: t.warmup_frac,
            end_lr_factor: t.end_lr_factor,
            regime: "uniform".into(),
            dt: 24,
            dt_lo: 1,
            dt_hi: 24,
            k_max: t.k_max,
            retrieval_k: t.retrieval_k,
            tau_r: t.tau_r,
            log_every: t.log_every,
            checkpoint_every: t.checkpoint_every,
        }
    }
}

impl TrainSection {
    pub fn train_config(&self, seed: u64) -> Result<TrainConfig, ConfigError> {
        let regime = match self.regime.as_str() {
            "uniform" => OperatorRegime::UniformDt {
                lo: self.dt_lo,
                hi: self.dt_hi,
            },
            "single" => OperatorRegime::SingleDt { dt: self.dt },
            other => {
                return Err(ConfigError::Constraint {
                    key: "regime".into(),
                    detail: format!("expected `uniform` or `single`, got `{other}`"),
                })
            }
        };
        Ok(TrainConfig {
            total_steps: self.steps,
            batch_size: self.batch,
            base_lr: self.lr,
            weight_decay: self.weight_decay,
            grad_clip: self.grad_clip,
            warmup_frac: self.warmup_frac,
            end_lr_factor: self.end_lr_factor,
            regime,
            k_max: self.k_max,
            retrieval_k: self.retrieval_k,
            tau_r: self.tau_r,
            seed,
            log_every: self.log_every,
            checkpoint_every: self.checkpoint_every,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSection {
    pub dts: Vec<usize>,
    pub counts: Vec<usize>,
    pub selection: String,
    pub stride: usize,
    pub noise_sigma: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            dts: vec![1, 4, 12, 24],
            counts: vec![0, 1, 2, 5, 10, 20, 50, 100],
            selection: "topk".into(),
            stride: 1,
            noise_sigma: 1.0,
        }
    }
}

impl EvalSection {
    pub fn eval_spec(&self, seed: u64) -> Result<EvalSpec, ConfigError> {
        let selection = match self.selection.as_str() {
            "topk" => SelectionMode::TopK,
            "random" => SelectionMode::Random,
            other => {
                return Err(ConfigError::Constraint {
                    key: "selection".into(),
                    detail: format!("expected `topk` or `random`, got `{other}`"),
                })
            }
        };
        Ok(EvalSpec {
            dts: self.dts.clone(),
            counts: self.counts.clone(),
            selection,
            noise: NoiseMode::Off,
            stride: self.stride,
            seed,
        })
    }
}

/// Merged configuration for one run.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    /// Parse a sectioned key = value file over the defaults. `#` and `;`
    /// start comments.
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str_inner(&text)
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        Self::from_str_inner(text)
    }

    fn from_str_inner(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = match raw.find(['#', ';']) {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if line.starts_with('[') {
                if !line.ends_with(']') {
                    return Err(ConfigError::Syntax {
                        line: line_no,
                        text: raw.to_string(),
                    });
                }
                let name = line[1..line.len() - 1].trim().to_string();
                if !["data", "model", "train", "eval", "run"].contains(&name.as_str()) {
                    return Err(ConfigError::UnknownSection {
                        line: line_no,
                        name,
                    });
                }
                section = name;
                continue;
            }
            let Some(eq) = line.find('=') else {
                return Err(ConfigError::Syntax {
                    line: line_no,
                    text: raw.to_string(),
                });
            };
            let key = line[..eq].trim().to_string();
            let value = line[eq + 1..].trim().trim_matches('"').to_string();
            cfg.apply(&section, &key, &value, line_no)?;
        }
        Ok(cfg)
    }

    fn apply(
        &mut self,
        section: &str,
        key: &str,
        value: &str,
        line: usize,
    ) -> Result<(), ConfigError> {
        fn parse<T: std::str::FromStr>(
            key: &str,
            value: &str,
            line: usize,
            expected: &'static str,
        ) -> Result<T, ConfigError> {
            value.parse().map_err(|_| ConfigError::TypeMismatch {
                line,
                key: key.to_string(),
                expected,
                value: value.to_string(),
            })
        }
        fn parse_list(
            key: &str,
            value: &str,
            line: usize,
        ) -> Result<Vec<usize>, ConfigError> {
            value
                .split(',')
                .map(|p| {
                    p.trim().parse().map_err(|_| ConfigError::TypeMismatch {
                        line,
                        key: key.to_string(),
                        expected: "comma-separated integers",
                        value: value.to_string(),
                    })
                })
                .collect()
        }

        match (section, key) {
            ("data", "nodes") => self.data.nodes = parse(key, value, line, "integer")?,
            ("data", "horizon") => self.data.horizon = parse(key, value, line, "integer")?,
            ("data", "radius_km") => self.data.radius_km = parse(key, value, line, "number")?,
            ("data", "diffusion") => self.data.diffusion = parse(key, value, line, "number")?,
            ("data", "advection") => self.data.advection = parse(key, value, line, "number")?,
            ("data", "forcing") => self.data.forcing = parse(key, value, line, "number")?,
            ("data", "channels") => self.data.channels = parse(key, value, line, "integer")?,
            ("data", "train_frac") => self.data.train_frac = parse(key, value, line, "number")?,
            ("model", "tau") => self.model.tau = parse(key, value, line, "integer")?,
            ("model", "d_node") => self.model.d_node = parse(key, value, line, "integer")?,
            ("model", "d_edge") => self.model.d_edge = parse(key, value, line, "integer")?,
            ("model", "d_msg") => self.model.d_msg = parse(key, value, line, "integer")?,
            ("model", "layers") => self.model.layers = parse(key, value, line, "integer")?,
            ("model", "heads") => self.model.heads = parse(key, value, line, "integer")?,
            ("model", "d_ff") => self.model.d_ff = parse(key, value, line, "integer")?,
            ("model", "dropout") => self.model.dropout = parse(key, value, line, "number")?,
            ("model", "bias_per_layer") => {
                self.model.bias_per_layer = parse(key, value, line, "boolean")?
            }
            ("train", "steps") => self.train.steps = parse(key, value, line, "integer")?,
            ("train", "batch") => self.train.batch = parse(key, value, line, "integer")?,
            ("train", "lr") => self.train.lr = parse(key, value, line, "number")?,
            ("train", "weight_decay") => {
                self.train.weight_decay = parse(key, value, line, "number")?
            }
            ("train", "grad_clip") => self.train.grad_clip = parse(key, value, line, "number")?,
            ("train", "warmup_frac") => {
                self.train.warmup_frac = parse(key, value, line, "number")?
            }
            ("train", "end_lr_factor") => {
                self.train.end_lr_factor = parse(key, value, line, "number")?
            }
            ("train", "regime") => self.train.regime = value.to_string(),
            ("train", "dt") => self.train.dt = parse(key, value, line, "integer")?,
            ("train", "dt_lo") => self.train.dt_lo = parse(key, value, line, "integer")?,
            ("train", "dt_hi") => self.train.dt_hi = parse(key, value, line, "integer")?,
            ("train", "k_max") => self.train.k_max = parse(key, value, line, "integer")?,
            ("train", "retrieval_k") => {
                self.train.retrieval_k = parse(key, value, line, "integer")?
            }
            ("train", "tau_r") => self.train.tau_r = parse(key, value, line, "integer")?,
            ("train", "log_every") => self.train.log_every = parse(key, value, line, "integer")?,
            ("train", "checkpoint_every") => {
                self.train.checkpoint_every = parse(key, value, line, "integer")?
            }
            ("eval", "dts") => self.eval.dts = parse_list(key, value, line)?,
            ("eval", "counts") => self.eval.counts = parse_list(key, value, line)?,
            ("eval", "selection") => self.eval.selection = value.to_string(),
            ("eval", "stride") => self.eval.stride = parse(key, value, line, "integer")?,
            ("eval", "noise_sigma") => {
                self.eval.noise_sigma = parse(key, value, line, "number")?
            }
            ("run", "out_dir") => self.out_dir = Some(PathBuf::from(value)),
            _ => {
                return Err(ConfigError::UnknownKey {
                    line,
                    section: if section.is_empty() {
                        "<none>".into()
                    } else {
                        section.to_string()
                    },
                    key: key.to_string(),
                })
            }
        }
        Ok(())
    }
}
