//! Forward pass.
//!
//! The hidden state for a sequence of S = 2k+1 positions over |V| nodes is a
//! single [S*|V|, d] matrix in position-major layout. Message passing runs on
//! all positions at once through edge index lists replicated per position;
//! per-node attention permutes rows into node-major layout, splits heads with
//! a second fixed permutation, and runs batched matmuls. All layout
//! reorderings are plain row gathers, so the backward pass is exact
//! scatter-adds.

use std::rc::Rc;

use crate::graph::{edge_features, ChannelStats, EdgeStats, ExamplePair, Graph};
use crate::rng::fnv1a64;
use crate::tensor::{Mask, Real, Tape, Tensor, TensorId};

use super::{BoundLayer, BoundMlp2, BoundParams, ModelConfig, ModelError};

const RMS_EPS: f64 = 1e-6;

/// Edge connectivity plus raw edge features, ready to bind onto a tape.
#[derive(Debug, Clone)]
pub struct GraphContext {
    pub n_nodes: usize,
    pub edge_src: Vec<usize>,
    pub edge_dst: Vec<usize>,
    /// [E, 3] z-scored distance, sin(direction), cos(direction).
    pub edge_feats: Vec<f64>,
}

impl GraphContext {
    pub fn new(graph: &Graph, stats: &EdgeStats) -> Self {
        let mut edge_src = Vec::with_capacity(graph.edges.len());
        let mut edge_dst = Vec::with_capacity(graph.edges.len());
        let mut edge_feats = Vec::with_capacity(graph.edges.len() * 3);
        for e in &graph.edges {
            edge_src.push(e.src);
            edge_dst.push(e.dst);
            edge_feats.extend_from_slice(&edge_features(e, stats, 3));
        }
        GraphContext {
            n_nodes: graph.n_nodes(),
            edge_src,
            edge_dst,
            edge_feats,
        }
    }

    pub fn n_edges(&self) -> usize {
        self.edge_src.len()
    }
}

/// Normalized model inputs: k example (key, value) pairs and the query key
/// as the final entry of `keys`.
#[derive(Debug, Clone)]
pub struct SequenceInputs<T> {
    /// k+1 matrices [|V|, tau*c]; the query key is last.
    pub keys: Vec<Tensor<T>>,
    /// k matrices [|V|, c].
    pub values: Vec<Tensor<T>>,
    pub n_nodes: usize,
}

impl<T: Real> SequenceInputs<T> {
    pub fn k(&self) -> usize {
        self.values.len()
    }
}

/// Flatten a key window [tau, V, c] into per-node rows [V, tau*c],
/// normalizing each channel.
fn key_matrix<T: Real>(
    key: &[f32],
    tau: usize,
    v: usize,
    c: usize,
    stats: &ChannelStats,
) -> Tensor<T> {
    let mut data = vec![T::ZERO; v * tau * c];
    for f in 0..tau {
        for node in 0..v {
            for ch in 0..c {
                data[node * tau * c + f * c + ch] =
                    T::from_f64(stats.normalize(key[(f * v + node) * c + ch], ch));
            }
        }
    }
    Tensor::from_vec(vec![v, tau * c], data).unwrap()
}

fn value_matrix<T: Real>(value: &[f32], v: usize, c: usize, stats: &ChannelStats) -> Tensor<T> {
    let mut data = vec![T::ZERO; v * c];
    for node in 0..v {
        for ch in 0..c {
            data[node * c + ch] = T::from_f64(stats.normalize(value[node * c + ch], ch));
        }
    }
    Tensor::from_vec(vec![v, c], data).unwrap()
}

/// Normalize and flatten example pairs plus the query key. All pairs must
/// share the graph size, the config's tau and channel count, and the
/// query's dt.
pub fn build_sequence_inputs<T: Real>(
    cfg: &ModelConfig,
    stats: &ChannelStats,
    n_nodes: usize,
    examples: &[ExamplePair],
    query: &ExamplePair,
) -> Result<SequenceInputs<T>, ModelError> {
    let mut keys = Vec::with_capacity(examples.len() + 1);
    let mut values = Vec::with_capacity(examples.len());
    for pair in examples.iter().chain(std::iter::once(query)) {
        if pair.n_nodes != n_nodes {
            return Err(ModelError::MixedGraphSizes {
                expected: n_nodes,
                got: pair.n_nodes,
            });
        }
        if pair.tau != cfg.tau || pair.n_channels != cfg.in_channels {
            return Err(ModelError::Config(format!(
                "example has tau={} c={}, model expects tau={} c={}",
                pair.tau, pair.n_channels, cfg.tau, cfg.in_channels
            )));
        }
        if pair.dt != query.dt {
            return Err(ModelError::Config(format!(
                "example dt {} differs from query dt {}",
                pair.dt, query.dt
            )));
        }
    }
    for ex in examples {
        keys.push(key_matrix(&ex.key, cfg.tau, n_nodes, cfg.in_channels, stats));
        values.push(value_matrix(&ex.value, n_nodes, cfg.in_channels, stats));
    }
    keys.push(key_matrix(
        &query.key,
        cfg.tau,
        n_nodes,
        cfg.in_channels,
        stats,
    ));
    Ok(SequenceInputs {
        keys,
        values,
        n_nodes,
    })
}

/// The interleaved token sequence before fusion: even positions are keys,
/// odd positions are values, the query key sits at position 2k.
#[derive(Debug)]
pub struct SequenceBatch {
    pub tokens: Vec<TensorId>,
    pub k: usize,
    pub n_nodes: usize,
}

impl SequenceBatch {
    pub fn seq_len(&self) -> usize {
        2 * self.k + 1
    }
}

/// Forward/backward modes. Dropout only exists in train mode, seeded per
/// call site so runs are reproducible.
#[derive(Debug, Clone, Copy)]
pub enum Mode {
    Train { dropout_seed: u64 },
    Eval,
}

fn linear<T: Real>(
    tape: &mut Tape<T>,
    x: TensorId,
    w: TensorId,
    b: TensorId,
) -> Result<TensorId, ModelError> {
    let y = tape.matmul(x, w)?;
    Ok(tape.add_broadcast(y, b)?)
}

fn mlp2_gelu<T: Real>(
    tape: &mut Tape<T>,
    x: TensorId,
    m: &BoundMlp2,
) -> Result<TensorId, ModelError> {
    let h = linear(tape, x, m.w1, m.b1)?;
    let h = tape.gelu(h);
    linear(tape, h, m.w2, m.b2)
}

/// Project keys through proj_k and values through proj_v, then interleave
/// [k1, v1, ..., kk, vk, k_query].
pub fn project_and_interleave<T: Real>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    cfg: &ModelConfig,
    inputs: &SequenceInputs<T>,
) -> Result<SequenceBatch, ModelError> {
    let k = inputs.k();
    if inputs.keys.len() != k + 1 {
        return Err(ModelError::Config(format!(
            "{} keys for {} values; need k+1 keys",
            inputs.keys.len(),
            k
        )));
    }
    let expect_k = vec![inputs.n_nodes, cfg.tau * cfg.in_channels];
    let expect_v = vec![inputs.n_nodes, cfg.in_channels];
    let mut key_tokens = Vec::with_capacity(k + 1);
    for key in &inputs.keys {
        if key.shape() != expect_k.as_slice() {
            return Err(ModelError::MixedGraphSizes {
                expected: inputs.n_nodes,
                got: key.rows(),
            });
        }
        let id = tape.constant(key.clone());
        key_tokens.push(linear(tape, id, bound.proj_k.w, bound.proj_k.b)?);
    }
    let mut tokens = Vec::with_capacity(2 * k + 1);
    for (i, value) in inputs.values.iter().enumerate() {
        if value.shape() != expect_v.as_slice() {
            return Err(ModelError::MixedGraphSizes {
                expected: inputs.n_nodes,
                got: value.rows(),
            });
        }
        let id = tape.constant(value.clone());
        let v_tok = linear(tape, id, bound.proj_v.w, bound.proj_v.b)?;
        tokens.push(key_tokens[i]);
        tokens.push(v_tok);
    }
    tokens.push(key_tokens[k]);
    Ok(SequenceBatch {
        tokens,
        k,
        n_nodes: inputs.n_nodes,
    })
}

/// Add +r to key tokens (even positions) and -r to value tokens (odd
/// positions). Applied once, before layer 1.
pub fn apply_kv_offsets<T: Real>(
    tape: &mut Tape<T>,
    kv_offset: TensorId,
    batch: SequenceBatch,
) -> Result<SequenceBatch, ModelError> {
    let neg = tape.scale(kv_offset, -1.0);
    let mut tokens = Vec::with_capacity(batch.tokens.len());
    for (pos, &tok) in batch.tokens.iter().enumerate() {
        let r = if pos % 2 == 0 { kv_offset } else { neg };
        tokens.push(tape.add_broadcast(tok, r)?);
    }
    Ok(SequenceBatch { tokens, ..batch })
}

/// Precomputed index arrays for one (sequence length, graph) shape.
pub struct SeqLayout {
    pub s: usize,
    pub v: usize,
    pub k: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub rep_src: Rc<Vec<usize>>,
    pub rep_dst: Rc<Vec<usize>>,
    pub edge_tile: Rc<Vec<usize>>,
    pub to_node_major: Rc<Vec<usize>>,
    pub from_node_major: Rc<Vec<usize>>,
    pub head_split: Rc<Vec<usize>>,
    pub head_merge: Rc<Vec<usize>>,
    pub decode_rows: Rc<Vec<usize>>,
    pub position_rows: Vec<Rc<Vec<usize>>>,
    pub bias_row_expand: Rc<Vec<usize>>,
    pub bias_col_expand: Rc<Vec<usize>>,
    pub causal: Rc<Mask>,
}

impl SeqLayout {
    pub fn new(cfg: &ModelConfig, gctx: &GraphContext, k: usize) -> Self {
        let s = 2 * k + 1;
        let v = gctx.n_nodes;
        let e = gctx.n_edges();
        let h = cfg.heads;
        let dh = cfg.head_dim();

        let mut rep_src = Vec::with_capacity(s * e);
        let mut rep_dst = Vec::with_capacity(s * e);
        let mut edge_tile = Vec::with_capacity(s * e);
        for t in 0..s {
            for ei in 0..e {
                rep_src.push(t * v + gctx.edge_src[ei]);
                rep_dst.push(t * v + gctx.edge_dst[ei]);
                edge_tile.push(ei);
            }
        }

        let mut to_node_major = vec![0usize; v * s];
        let mut from_node_major = vec![0usize; s * v];
        for node in 0..v {
            for t in 0..s {
                to_node_major[node * s + t] = t * v + node;
                from_node_major[t * v + node] = node * s + t;
            }
        }

        let mut head_split = vec![0usize; v * h * s];
        let mut head_merge = vec![0usize; v * s * h];
        for node in 0..v {
            for head in 0..h {
                for t in 0..s {
                    head_split[(node * h + head) * s + t] = (node * s + t) * h + head;
                    head_merge[(node * s + t) * h + head] = (node * h + head) * s + t;
                }
            }
        }
        let _ = dh;

        let mut decode_rows = Vec::with_capacity((k + 1) * v);
        for m in 0..=k {
            for node in 0..v {
                decode_rows.push(2 * m * v + node);
            }
        }

        let position_rows = (0..s)
            .map(|t| Rc::new((t * v..(t + 1) * v).collect::<Vec<usize>>()))
            .collect();

        let mut bias_row_expand = Vec::with_capacity(h * s);
        for head in 0..h {
            for i in 0..s {
                bias_row_expand.push(head * (k + 1) + i / 2);
            }
        }
        let bias_col_expand = (0..s).map(|j| j / 2).collect();

        SeqLayout {
            s,
            v,
            k,
            heads: h,
            head_dim: cfg.head_dim(),
            rep_src: Rc::new(rep_src),
            rep_dst: Rc::new(rep_dst),
            edge_tile: Rc::new(edge_tile),
            to_node_major: Rc::new(to_node_major),
            from_node_major: Rc::new(from_node_major),
            head_split: Rc::new(head_split),
            head_merge: Rc::new(head_merge),
            decode_rows: Rc::new(decode_rows),
            position_rows,
            bias_row_expand: Rc::new(bias_row_expand),
            bias_col_expand: Rc::new(bias_col_expand),
            causal: Rc::new(Mask::causal(s)),
        }
    }
}

/// Residual message passing over explicit edge index lists: rows of `h` are
/// node states, messages are MLP([h_dst, h_src, e]) summed into dst rows in
/// edge-list order.
pub fn message_passing_step<T: Real>(
    tape: &mut Tape<T>,
    h: TensorId,
    rep_src: &Rc<Vec<usize>>,
    rep_dst: &Rc<Vec<usize>>,
    edge_feats: TensorId,
    msg: &BoundMlp2,
) -> Result<TensorId, ModelError> {
    let n_rows = tape.value(h).rows();
    if rep_src.is_empty() {
        return Ok(h);
    }
    let h_dst = tape.gather_rows(h, rep_dst.clone())?;
    let h_src = tape.gather_rows(h, rep_src.clone())?;
    let x = tape.concat_cols(&[h_dst, h_src, edge_feats])?;
    let m = mlp2_gelu(tape, x, msg)?;
    let agg = tape.segment_sum(m, rep_dst.clone(), n_rows)?;
    Ok(tape.add(h, agg)?)
}

/// Example-aware attention bias: pool key tokens over nodes, embed, compute
/// per-head pairwise similarities S in [H, k+1, k+1], and spread to token
/// resolution A[h, i, j] = S[h, i/2, j/2].
pub fn compute_example_bias<T: Real>(
    tape: &mut Tape<T>,
    h: TensorId,
    layout: &SeqLayout,
    layer: &BoundLayer,
) -> Result<TensorId, ModelError> {
    let (s, k, heads, dh) = (layout.s, layout.k, layout.heads, layout.head_dim);
    let mut pooled = Vec::with_capacity(k + 1);
    for m in 0..=k {
        let rows = tape.gather_rows(h, layout.position_rows[2 * m].clone())?;
        pooled.push(tape.mean_rows(rows)?);
    }
    let hbar = tape.concat_rows(&pooled)?;
    let z = mlp2_gelu(tape, hbar, &layer.bias_mlp)?;
    let qz = tape.matmul(z, layer.wqz)?;
    let kz = tape.matmul(z, layer.wkz)?;

    // [(k+1), H*dh] -> [H, k+1, dh]
    let mut split = Vec::with_capacity(heads * (k + 1));
    for head in 0..heads {
        for i in 0..=k {
            split.push(i * heads + head);
        }
    }
    let split = Rc::new(split);
    let qv = tape.reshape(qz, vec![(k + 1) * heads, dh])?;
    let qv = tape.gather_rows(qv, split.clone())?;
    let qv = tape.reshape(qv, vec![heads, k + 1, dh])?;
    let kv = tape.reshape(kz, vec![(k + 1) * heads, dh])?;
    let kv = tape.gather_rows(kv, split)?;
    let kv = tape.reshape(kv, vec![heads, k + 1, dh])?;

    let s_big = tape.bmm(qv, kv, true)?;
    let s_big = tape.scale(s_big, 1.0 / (dh as f64).sqrt());

    // expand example-level similarities to token resolution
    let flat = tape.reshape(s_big, vec![heads * (k + 1), k + 1])?;
    let rows = tape.gather_rows(flat, layout.bias_row_expand.clone())?;
    let cols = tape.gather_cols(rows, layout.bias_col_expand.clone())?;
    Ok(tape.reshape(cols, vec![heads, s, s])?)
}

/// Pre-norm multi-head self-attention over the sequence dimension per node,
/// with additive example bias and strict causal mask, then a pre-norm
/// feed-forward. Returns the updated position-major hidden state.
#[allow(clippy::too_many_arguments)]
pub fn contextual_attention_step<T: Real>(
    tape: &mut Tape<T>,
    h: TensorId,
    bias: TensorId,
    layout: &SeqLayout,
    layer: &BoundLayer,
    cfg: &ModelConfig,
    mode: Mode,
    site: u64,
) -> Result<TensorId, ModelError> {
    let (s, v, heads, dh) = (layout.s, layout.v, layout.heads, layout.head_dim);
    let d = cfg.d_node;
    let dropout = |tape: &mut Tape<T>, x: TensorId, slot: u64| -> Result<TensorId, ModelError> {
        match mode {
            Mode::Train { dropout_seed } if cfg.dropout > 0.0 => {
                let seed = dropout_seed
                    .wrapping_add(site.wrapping_mul(0x9e37_79b9_7f4a_7c15))
                    .wrapping_add(slot.wrapping_mul(0xbf58_476d_1ce4_e5b9));
                Ok(tape.dropout(x, cfg.dropout, seed)?)
            }
            _ => Ok(x),
        }
    };

    let x = tape.gather_rows(h, layout.to_node_major.clone())?;
    let n1 = tape.rms_norm(x, layer.norm1, RMS_EPS)?;
    let q = tape.matmul(n1, layer.wq)?;
    let kk = tape.matmul(n1, layer.wk)?;
    let vv = tape.matmul(n1, layer.wv)?;

    let split_heads = |tape: &mut Tape<T>, t: TensorId| -> Result<TensorId, ModelError> {
        let r = tape.reshape(t, vec![v * s * heads, dh])?;
        let g = tape.gather_rows(r, layout.head_split.clone())?;
        Ok(tape.reshape(g, vec![v * heads, s, dh])?)
    };
    let qh = split_heads(tape, q)?;
    let kh = split_heads(tape, kk)?;
    let vh = split_heads(tape, vv)?;

    let scores = tape.bmm(qh, kh, true)?;
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let probs = tape.masked_softmax(scores, Some(bias), Some(layout.causal.clone()))?;
    let probs = dropout(tape, probs, 0)?;
    let ctx = tape.bmm(probs, vh, false)?;

    let merged = tape.reshape(ctx, vec![v * heads * s, dh])?;
    let merged = tape.gather_rows(merged, layout.head_merge.clone())?;
    let merged = tape.reshape(merged, vec![v * s, d])?;
    let attn = tape.matmul(merged, layer.wo)?;
    let attn = dropout(tape, attn, 1)?;
    let x = tape.add(x, attn)?;

    let n2 = tape.rms_norm(x, layer.norm2, RMS_EPS)?;
    let f = linear(tape, n2, layer.ff.w1, layer.ff.b1)?;
    let f = tape.gelu(f);
    let f = linear(tape, f, layer.ff.w2, layer.ff.b2)?;
    let f = dropout(tape, f, 2)?;
    let x = tape.add(x, f)?;

    Ok(tape.gather_rows(x, layout.from_node_major.clone())?)
}

/// Everything the pipeline needs from one forward pass.
#[derive(Debug)]
pub struct ForwardOutput {
    /// [(k+1) * |V|, |target_channels|]; row block m predicts the value of
    /// example m, block k is the query prediction.
    pub predictions: TensorId,
    pub k: usize,
    pub n_nodes: usize,
    pub n_targets: usize,
    /// Example-aware bias per layer (one entry when bias is input-once).
    pub bias_ids: Vec<TensorId>,
    pub bias_shapes: Vec<[usize; 3]>,
}

impl ForwardOutput {
    /// Row range of prediction block `m` (0..=k; k is the query).
    pub fn block_rows(&self, m: usize) -> std::ops::Range<usize> {
        m * self.n_nodes..(m + 1) * self.n_nodes
    }
}

/// Full pipeline: project, interleave, offset, L x (message passing ->
/// example bias -> per-node causal attention), decode at key positions.
pub fn forward<T: Real>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    cfg: &ModelConfig,
    gctx: &GraphContext,
    inputs: &SequenceInputs<T>,
    mode: Mode,
) -> Result<ForwardOutput, ModelError> {
    cfg.validate()?;
    if inputs.n_nodes != gctx.n_nodes {
        return Err(ModelError::MixedGraphSizes {
            expected: gctx.n_nodes,
            got: inputs.n_nodes,
        });
    }
    let batch = project_and_interleave(tape, bound, cfg, inputs)?;
    let batch = apply_kv_offsets(tape, bound.kv_offset, batch)?;
    let k = batch.k;
    let layout = SeqLayout::new(cfg, gctx, k);

    let mut h = tape.concat_rows(&batch.tokens)?;
    check_finite(tape, h, "input projection")?;

    // shared edge embedding, tiled across sequence positions
    let e = gctx.n_edges();
    let e_raw = Tensor::<T>::from_f64s(vec![e, 3], &gctx.edge_feats).unwrap();
    let e_raw = tape.constant(e_raw);
    let e_emb = linear(tape, e_raw, bound.edge_embed.w, bound.edge_embed.b)?;
    let e_tiled = if e > 0 {
        tape.gather_rows(e_emb, layout.edge_tile.clone())?
    } else {
        e_emb
    };

    let mut bias_ids = Vec::new();
    let mut bias_shapes = Vec::new();
    let mut bias_once: Option<TensorId> = None;
    for (li, layer) in bound.layers.iter().enumerate() {
        h = message_passing_step(tape, h, &layout.rep_src, &layout.rep_dst, e_tiled, &layer.msg)?;
        check_finite(tape, h, &format!("layer {li} message passing"))?;

        let bias = if cfg.bias_per_layer || bias_once.is_none() {
            let b = compute_example_bias(tape, h, &layout, layer)?;
            if !cfg.bias_per_layer {
                bias_once = Some(b);
            }
            bias_ids.push(b);
            bias_shapes.push([layout.heads, layout.s, layout.s]);
            b
        } else {
            bias_once.unwrap()
        };

        h = contextual_attention_step(
            tape,
            h,
            bias,
            &layout,
            layer,
            cfg,
            mode,
            fnv1a64(b"attn") ^ li as u64,
        )?;
        check_finite(tape, h, &format!("layer {li} attention"))?;
    }

    let picked = tape.gather_rows(h, layout.decode_rows.clone())?;
    let predictions = mlp2_gelu(tape, picked, &bound.decoder)?;
    check_finite(tape, predictions, "decoder")?;
    Ok(ForwardOutput {
        predictions,
        k,
        n_nodes: gctx.n_nodes,
        n_targets: cfg.target_channels.len(),
        bias_ids,
        bias_shapes,
    })
}

fn check_finite<T: Real>(tape: &Tape<T>, id: TensorId, site: &str) -> Result<(), ModelError> {
    if tape.value(id).find_nonfinite().is_some() {
        return Err(ModelError::NonFinite { site: site.into() });
    }
    Ok(())
}
