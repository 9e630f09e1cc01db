//! The GICON network: input projections, interleaved key/value sequence with
//! learnable role offsets, stacked (message passing + per-node causal
//! attention) layers with an example-aware attention bias, and a decoder at
//! key positions.

mod forward;

pub use forward::{
    apply_kv_offsets, build_sequence_inputs, compute_example_bias, contextual_attention_step,
    forward, message_passing_step, project_and_interleave, ForwardOutput, GraphContext, Mode,
    SeqLayout, SequenceBatch, SequenceInputs,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::DataError;
use crate::rng::Rng;
use crate::tensor::{Real, Tape, Tensor, TensorError, TensorId};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model config: {0}")]
    Config(String),
    #[error("mixed graph sizes: expected {expected} nodes, got {got}")]
    MixedGraphSizes { expected: usize, got: usize },
    #[error("non-finite activation in {site}")]
    NonFinite { site: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Key window length in frames.
    pub tau: usize,
    pub in_channels: usize,
    pub target_channels: Vec<usize>,
    pub d_node: usize,
    pub d_edge: usize,
    pub d_msg: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    /// Recompute the example-aware bias from each layer's pre-attention
    /// states (default), or once from the input embeddings.
    pub bias_per_layer: bool,
}

impl ModelConfig {
    /// Reference configuration: 3 layers, d_node 128, d_edge 128, d_msg 256,
    /// 4 heads, d_ff 512, dropout 0.1, tau 24.
    pub fn with_channels(in_channels: usize, target_channels: Vec<usize>) -> Self {
        ModelConfig {
            tau: 24,
            in_channels,
            target_channels,
            d_node: 128,
            d_edge: 128,
            d_msg: 256,
            layers: 3,
            heads: 4,
            d_ff: 512,
            dropout: 0.1,
            bias_per_layer: true,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_node == 0 || self.heads == 0 || self.d_node % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "d_node {} must be a positive multiple of heads {}",
                self.d_node, self.heads
            )));
        }
        if self.tau == 0 || self.in_channels == 0 || self.layers == 0 {
            return Err(ModelError::Config(
                "tau, in_channels and layers must be positive".into(),
            ));
        }
        if self.target_channels.is_empty() {
            return Err(ModelError::Config("no target channels".into()));
        }
        for &tc in &self.target_channels {
            if tc >= self.in_channels {
                return Err(ModelError::Config(format!(
                    "target channel {} out of range 0..{}",
                    tc, self.in_channels
                )));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_node / self.heads
    }
}

/// Which optimizer a parameter routes to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamClass {
    /// Hidden 2-D matrices: orthogonalized updates.
    Matrix,
    /// Input projections and edge embedding: adaptive fallback.
    Embedding,
    /// Decoder head matrices: adaptive fallback.
    Decoder,
    /// Biases, gains, offsets: adaptive fallback.
    Vector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp2<T> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    /// Message MLP: [2 d_node + d_edge] -> d_msg -> d_node, final layer
    /// zero-initialized so layer 0 starts as identity plus attention.
    pub msg: Mlp2<T>,
    pub norm1: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub norm2: Tensor<T>,
    pub ff: Mlp2<T>,
    /// Bias head: example embedding MLP plus per-head query/key maps.
    pub bias_mlp: Mlp2<T>,
    pub wqz: Tensor<T>,
    pub wkz: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GiconParams<T> {
    pub proj_k: Linear<T>,
    pub proj_v: Linear<T>,
    pub edge_embed: Linear<T>,
    pub kv_offset: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub decoder: Mlp2<T>,
}

fn xavier<T: Real>(rng: &mut Rng, rows: usize, cols: usize) -> Tensor<T> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data: Vec<T> = (0..rows * cols)
        .map(|_| T::from_f64(rng.uniform(-a, a)))
        .collect();
    Tensor::from_vec(vec![rows, cols], data).unwrap()
}

impl<T: Real> GiconParams<T> {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = Rng::derive(seed, "init", 0);
        let d = cfg.d_node;
        let linear = |rng: &mut Rng, fan_in: usize, fan_out: usize| Linear {
            w: xavier::<T>(rng, fan_in, fan_out),
            b: Tensor::zeros(vec![fan_out]),
        };
        let proj_k = linear(&mut rng, cfg.tau * cfg.in_channels, d);
        let proj_v = linear(&mut rng, cfg.in_channels, d);
        let edge_embed = linear(&mut rng, crate::graph::EDGE_RAW_FEATURES, cfg.d_edge);
        let kv_offset = Tensor::zeros(vec![d]);
        let layers = (0..cfg.layers)
            .map(|_| LayerParams {
                msg: Mlp2 {
                    w1: xavier(&mut rng, 2 * d + cfg.d_edge, cfg.d_msg),
                    b1: Tensor::zeros(vec![cfg.d_msg]),
                    w2: Tensor::zeros(vec![cfg.d_msg, d]),
                    b2: Tensor::zeros(vec![d]),
                },
                norm1: Tensor::filled(vec![d], T::ONE),
                wq: xavier(&mut rng, d, d),
                wk: xavier(&mut rng, d, d),
                wv: xavier(&mut rng, d, d),
                wo: xavier(&mut rng, d, d),
                norm2: Tensor::filled(vec![d], T::ONE),
                ff: Mlp2 {
                    w1: xavier(&mut rng, d, cfg.d_ff),
                    b1: Tensor::zeros(vec![cfg.d_ff]),
                    w2: xavier(&mut rng, cfg.d_ff, d),
                    b2: Tensor::zeros(vec![d]),
                },
                bias_mlp: Mlp2 {
                    w1: xavier(&mut rng, d, d),
                    b1: Tensor::zeros(vec![d]),
                    w2: xavier(&mut rng, d, d),
                    b2: Tensor::zeros(vec![d]),
                },
                wqz: xavier(&mut rng, d, d),
                wkz: xavier(&mut rng, d, d),
            })
            .collect();
        let decoder = Mlp2 {
            w1: xavier(&mut rng, d, d),
            b1: Tensor::zeros(vec![d]),
            w2: xavier(&mut rng, d, cfg.target_channels.len()),
            b2: Tensor::zeros(vec![cfg.target_channels.len()]),
        };
        Ok(GiconParams {
            proj_k,
            proj_v,
            edge_embed,
            kv_offset,
            layers,
            decoder,
        })
    }

    /// Every parameter with a stable name and optimizer class, in a fixed
    /// order shared by checkpoints and the optimizer.
    pub fn visit(&self) -> Vec<(String, &Tensor<T>, ParamClass)> {
        use ParamClass::*;
        let mut out: Vec<(String, &Tensor<T>, ParamClass)> = vec![
            ("proj_k.w".into(), &self.proj_k.w, Embedding),
            ("proj_k.b".into(), &self.proj_k.b, Vector),
            ("proj_v.w".into(), &self.proj_v.w, Embedding),
            ("proj_v.b".into(), &self.proj_v.b, Vector),
            ("edge_embed.w".into(), &self.edge_embed.w, Embedding),
            ("edge_embed.b".into(), &self.edge_embed.b, Vector),
            ("kv_offset".into(), &self.kv_offset, Vector),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let p = |s: &str| format!("layers.{i}.{s}");
            out.push((p("msg.w1"), &l.msg.w1, Matrix));
            out.push((p("msg.b1"), &l.msg.b1, Vector));
            out.push((p("msg.w2"), &l.msg.w2, Matrix));
            out.push((p("msg.b2"), &l.msg.b2, Vector));
            out.push((p("norm1"), &l.norm1, Vector));
            out.push((p("attn.wq"), &l.wq, Matrix));
            out.push((p("attn.wk"), &l.wk, Matrix));
            out.push((p("attn.wv"), &l.wv, Matrix));
            out.push((p("attn.wo"), &l.wo, Matrix));
            out.push((p("norm2"), &l.norm2, Vector));
            out.push((p("ff.w1"), &l.ff.w1, Matrix));
            out.push((p("ff.b1"), &l.ff.b1, Vector));
            out.push((p("ff.w2"), &l.ff.w2, Matrix));
            out.push((p("ff.b2"), &l.ff.b2, Vector));
            out.push((p("bias.mlp.w1"), &l.bias_mlp.w1, Matrix));
            out.push((p("bias.mlp.b1"), &l.bias_mlp.b1, Vector));
            out.push((p("bias.mlp.w2"), &l.bias_mlp.w2, Matrix));
            out.push((p("bias.mlp.b2"), &l.bias_mlp.b2, Vector));
            out.push((p("bias.wqz"), &l.wqz, Matrix));
            out.push((p("bias.wkz"), &l.wkz, Matrix));
        }
        out.push(("decoder.w1".into(), &self.decoder.w1, Decoder));
        out.push(("decoder.b1".into(), &self.decoder.b1, Vector));
        out.push(("decoder.w2".into(), &self.decoder.w2, Decoder));
        out.push(("decoder.b2".into(), &self.decoder.b2, Vector));
        out
    }

    pub fn visit_mut(&mut self) -> Vec<(String, &mut Tensor<T>, ParamClass)> {
        use ParamClass::*;
        let mut out: Vec<(String, &mut Tensor<T>, ParamClass)> = vec![
            ("proj_k.w".into(), &mut self.proj_k.w, Embedding),
            ("proj_k.b".into(), &mut self.proj_k.b, Vector),
            ("proj_v.w".into(), &mut self.proj_v.w, Embedding),
            ("proj_v.b".into(), &mut self.proj_v.b, Vector),
            ("edge_embed.w".into(), &mut self.edge_embed.w, Embedding),
            ("edge_embed.b".into(), &mut self.edge_embed.b, Vector),
            ("kv_offset".into(), &mut self.kv_offset, Vector),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = |s: &str| format!("layers.{i}.{s}");
            out.push((p("msg.w1"), &mut l.msg.w1, Matrix));
            out.push((p("msg.b1"), &mut l.msg.b1, Vector));
            out.push((p("msg.w2"), &mut l.msg.w2, Matrix));
            out.push((p("msg.b2"), &mut l.msg.b2, Vector));
            out.push((p("norm1"), &mut l.norm1, Vector));
            out.push((p("attn.wq"), &mut l.wq, Matrix));
            out.push((p("attn.wk"), &mut l.wk, Matrix));
            out.push((p("attn.wv"), &mut l.wv, Matrix));
            out.push((p("attn.wo"), &mut l.wo, Matrix));
            out.push((p("norm2"), &mut l.norm2, Vector));
            out.push((p("ff.w1"), &mut l.ff.w1, Matrix));
            out.push((p("ff.b1"), &mut l.ff.b1, Vector));
            out.push((p("ff.w2"), &mut l.ff.w2, Matrix));
            out.push((p("ff.b2"), &mut l.ff.b2, Vector));
            out.push((p("bias.mlp.w1"), &mut l.bias_mlp.w1, Matrix));
            out.push((p("bias.mlp.b1"), &mut l.bias_mlp.b1, Vector));
            out.push((p("bias.mlp.w2"), &mut l.bias_mlp.w2, Matrix));
            out.push((p("bias.mlp.b2"), &mut l.bias_mlp.b2, Vector));
            out.push((p("bias.wqz"), &mut l.wqz, Matrix));
            out.push((p("bias.wkz"), &mut l.wkz, Matrix));
        }
        out.push(("decoder.w1".into(), &mut self.decoder.w1, Decoder));
        out.push(("decoder.b1".into(), &mut self.decoder.b1, Vector));
        out.push(("decoder.w2".into(), &mut self.decoder.w2, Decoder));
        out.push(("decoder.b2".into(), &mut self.decoder.b2, Vector));
        out
    }

    pub fn n_scalars(&self) -> usize {
        self.visit().iter().map(|(_, t, _)| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> GiconParams<U> {
        GiconParams {
            proj_k: Linear {
                w: self.proj_k.w.cast(),
                b: self.proj_k.b.cast(),
            },
            proj_v: Linear {
                w: self.proj_v.w.cast(),
                b: self.proj_v.b.cast(),
            },
            edge_embed: Linear {
                w: self.edge_embed.w.cast(),
                b: self.edge_embed.b.cast(),
            },
            kv_offset: self.kv_offset.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    msg: Mlp2 {
                        w1: l.msg.w1.cast(),
                        b1: l.msg.b1.cast(),
                        w2: l.msg.w2.cast(),
                        b2: l.msg.b2.cast(),
                    },
                    norm1: l.norm1.cast(),
                    wq: l.wq.cast(),
                    wk: l.wk.cast(),
                    wv: l.wv.cast(),
                    wo: l.wo.cast(),
                    norm2: l.norm2.cast(),
                    ff: Mlp2 {
                        w1: l.ff.w1.cast(),
                        b1: l.ff.b1.cast(),
                        w2: l.ff.w2.cast(),
                        b2: l.ff.b2.cast(),
                    },
                    bias_mlp: Mlp2 {
                        w1: l.bias_mlp.w1.cast(),
                        b1: l.bias_mlp.b1.cast(),
                        w2: l.bias_mlp.w2.cast(),
                        b2: l.bias_mlp.b2.cast(),
                    },
                    wqz: l.wqz.cast(),
                    wkz: l.wkz.cast(),
                })
                .collect(),
            decoder: Mlp2 {
                w1: self.decoder.w1.cast(),
                b1: self.decoder.b1.cast(),
                w2: self.decoder.w2.cast(),
                b2: self.decoder.b2.cast(),
            },
        }
    }

    /// Overwrite parameters from (name, tensor) pairs; shapes must match.
    pub fn load_named(&mut self, named: &[(String, Tensor<T>)]) -> Result<(), ModelError> {
        let mut map: std::collections::BTreeMap<&str, &Tensor<T>> =
            named.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for (name, tensor, _) in self.visit_mut() {
            let src = map.remove(name.as_str()).ok_or_else(|| {
                ModelError::Config(format!("checkpoint missing parameter {name}"))
            })?;
            if src.shape() != tensor.shape() {
                return Err(ModelError::Config(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    src.shape(),
                    tensor.shape()
                )));
            }
            *tensor = src.clone();
        }
        if let Some((name, _)) = map.into_iter().next() {
            return Err(ModelError::Config(format!(
                "checkpoint has unknown parameter {name}"
            )));
        }
        Ok(())
    }
}

/// Tape handles for every parameter, mirroring [`GiconParams`].
pub struct BoundLinear {
    pub w: TensorId,
    pub b: TensorId,
}

pub struct BoundMlp2 {
    pub w1: TensorId,
    pub b1: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
}

pub struct BoundLayer {
    pub msg: BoundMlp2,
    pub norm1: TensorId,
    pub wq: TensorId,
    pub wk: TensorId,
    pub wv: TensorId,
    pub wo: TensorId,
    pub norm2: TensorId,
    pub ff: BoundMlp2,
    pub bias_mlp: BoundMlp2,
    pub wqz: TensorId,
    pub wkz: TensorId,
}

pub struct BoundParams {
    pub proj_k: BoundLinear,
    pub proj_v: BoundLinear,
    pub edge_embed: BoundLinear,
    pub kv_offset: TensorId,
    pub layers: Vec<BoundLayer>,
    pub decoder: BoundMlp2,
    /// Parameter name -> id, for reading gradients after backward.
    pub ids: std::collections::BTreeMap<String, TensorId>,
}

impl BoundParams {
    /// Register every parameter on the tape as a trainable leaf.
    pub fn bind<T: Real>(tape: &mut Tape<T>, params: &GiconParams<T>) -> BoundParams {
        let mut ids = std::collections::BTreeMap::new();
        fn reg<T: Real>(
            tape: &mut Tape<T>,
            ids: &mut std::collections::BTreeMap<String, TensorId>,
            name: String,
            t: &Tensor<T>,
        ) -> TensorId {
            let id = tape.variable(t.clone());
            ids.insert(name, id);
            id
        }
        let bind_linear = |tape: &mut Tape<T>,
                           ids: &mut std::collections::BTreeMap<String, TensorId>,
                           prefix: &str,
                           l: &Linear<T>| {
            let w = tape.variable(l.w.clone());
            ids.insert(format!("{prefix}.w"), w);
            let b = tape.variable(l.b.clone());
            ids.insert(format!("{prefix}.b"), b);
            BoundLinear { w, b }
        };
        let bind_mlp = |tape: &mut Tape<T>,
                        ids: &mut std::collections::BTreeMap<String, TensorId>,
                        prefix: &str,
                        m: &Mlp2<T>| {
            let w1 = tape.variable(m.w1.clone());
            ids.insert(format!("{prefix}.w1"), w1);
            let b1 = tape.variable(m.b1.clone());
            ids.insert(format!("{prefix}.b1"), b1);
            let w2 = tape.variable(m.w2.clone());
            ids.insert(format!("{prefix}.w2"), w2);
            let b2 = tape.variable(m.b2.clone());
            ids.insert(format!("{prefix}.b2"), b2);
            BoundMlp2 { w1, b1, w2, b2 }
        };

        let proj_k = bind_linear(tape, &mut ids, "proj_k", &params.proj_k);
        let proj_v = bind_linear(tape, &mut ids, "proj_v", &params.proj_v);
        let edge_embed = bind_linear(tape, &mut ids, "edge_embed", &params.edge_embed);
        let kv_offset = reg(tape, &mut ids, "kv_offset".into(), &params.kv_offset);
        let layers = params
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| BoundLayer {
                msg: bind_mlp(tape, &mut ids, &format!("layers.{i}.msg"), &l.msg),
                norm1: reg(tape, &mut ids, format!("layers.{i}.norm1"), &l.norm1),
                wq: reg(tape, &mut ids, format!("layers.{i}.attn.wq"), &l.wq),
                wk: reg(tape, &mut ids, format!("layers.{i}.attn.wk"), &l.wk),
                wv: reg(tape, &mut ids, format!("layers.{i}.attn.wv"), &l.wv),
                wo: reg(tape, &mut ids, format!("layers.{i}.attn.wo"), &l.wo),
                norm2: reg(tape, &mut ids, format!("layers.{i}.norm2"), &l.norm2),
                ff: bind_mlp(tape, &mut ids, &format!("layers.{i}.ff"), &l.ff),
                bias_mlp: bind_mlp(tape, &mut ids, &format!("layers.{i}.bias.mlp"), &l.bias_mlp),
                wqz: reg(tape, &mut ids, format!("layers.{i}.bias.wqz"), &l.wqz),
                wkz: reg(tape, &mut ids, format!("layers.{i}.bias.wkz"), &l.wkz),
            })
            .collect();
        let decoder = bind_mlp(tape, &mut ids, "decoder", &params.decoder);
        BoundParams {
            proj_k,
            proj_v,
            edge_embed,
            kv_offset,
            layers,
            decoder,
            ids,
        }
    }
}
