//! Training: mean-squared loss over all key positions and the query,
//! warmup + cosine learning-rate schedule, per-step batch assembly through
//! retrieval, and checkpointing.

mod checkpoint;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointData, CHECKPOINT_MAGIC};
pub use optim::{
    adam_update, clip_global_norm, muon_update, newton_schulz, routes_to_muon, OptState,
    MUON_MOMENTUM, NS_COEFFS, NS_STEPS,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{make_example, ChannelStats, DataError, Dataset, ExamplePair, FormatError};
use crate::model::{
    build_sequence_inputs, forward, BoundParams, GiconParams, GraphContext, Mode, ModelConfig,
    ModelError, SequenceInputs,
};
use crate::retrieval::{sample_context, select_top_k, FeatureVector, LeakageGuard, PoolIndex, RetrievalError};
use crate::rng::Rng;
use crate::tensor::{Real, Tape, Tensor, TensorError, TensorId};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("train config: {0}")]
    Config(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("non-finite gradient for {param} at step {step}")]
    NonFiniteGrad { step: usize, param: String },
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Which operator family a run trains on: one fixed time gap, or gaps drawn
/// uniformly per sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorRegime {
    SingleDt { dt: usize },
    UniformDt { lo: usize, hi: usize },
}

impl OperatorRegime {
    pub fn contains(&self, dt: usize) -> bool {
        match *self {
            OperatorRegime::SingleDt { dt: d } => dt == d,
            OperatorRegime::UniformDt { lo, hi } => (lo..=hi).contains(&dt),
        }
    }

    fn sample(&self, rng: &mut Rng) -> usize {
        match *self {
            OperatorRegime::SingleDt { dt } => dt,
            OperatorRegime::UniformDt { lo, hi } => lo + rng.below(hi - lo + 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub warmup_frac: f64,
    pub end_lr_factor: f64,
    pub regime: OperatorRegime,
    /// Context size k is drawn uniformly from {0..k_max} each step.
    pub k_max: usize,
    /// First-stage retrieval size K.
    pub retrieval_k: usize,
    pub tau_r: usize,
    pub seed: u64,
    pub log_every: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 90_000,
            batch_size: 8,
            base_lr: 1e-4,
            weight_decay: 0.01,
            grad_clip: 1.0,
            warmup_frac: 0.10,
            end_lr_factor: 0.1,
            regime: OperatorRegime::UniformDt { lo: 1, hi: 24 },
            k_max: 5,
            retrieval_k: 32,
            tau_r: 24,
            seed: 0,
            log_every: 100,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.warmup_frac > 0.0 && self.warmup_frac < 1.0) {
            return Err(TrainError::Config(format!(
                "warmup_frac {} outside (0, 1)",
                self.warmup_frac
            )));
        }
        if self.total_steps == 0 || self.batch_size == 0 {
            return Err(TrainError::Config(
                "total_steps and batch_size must be positive".into(),
            ));
        }
        if self.k_max > self.retrieval_k {
            return Err(TrainError::Config(format!(
                "k_max {} exceeds retrieval K {}",
                self.k_max, self.retrieval_k
            )));
        }
        if let OperatorRegime::UniformDt { lo, hi } = self.regime {
            if lo == 0 || lo > hi {
                return Err(TrainError::Config(format!(
                    "uniform dt range [{lo}, {hi}] invalid"
                )));
            }
        }
        Ok(())
    }
}

/// Linear warmup to `base_lr` over the first floor(warmup_frac * total)
/// steps, then cosine decay to `end_lr_factor * base_lr` at `total_steps`.
pub fn lr_at_step(step: usize, cfg: &TrainConfig) -> f64 {
    let total = cfg.total_steps;
    let w = ((cfg.warmup_frac * total as f64).floor() as usize).max(1);
    let step = step.min(total);
    if step < w {
        return cfg.base_lr * step as f64 / w as f64;
    }
    let end = cfg.base_lr * cfg.end_lr_factor;
    let progress = (step - w) as f64 / (total - w) as f64;
    end + (cfg.base_lr - end) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// MSE between predictions and targets of identical shape
/// [(k+1)*|V|, |target_channels|], covering every key position and the query.
pub fn compute_loss<T: Real>(
    tape: &mut Tape<T>,
    predictions: TensorId,
    targets: TensorId,
) -> Result<TensorId, TrainError> {
    let diff = tape.sub(predictions, targets)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean_all(sq)?)
}

/// Stack the normalized target-channel values of each example plus the query
/// label into [(k+1)*|V|, |target_channels|].
pub fn build_targets<T: Real>(
    cfg: &ModelConfig,
    stats: &ChannelStats,
    examples: &[ExamplePair],
    query: &ExamplePair,
) -> Tensor<T> {
    let v = query.n_nodes;
    let c = query.n_channels;
    let ct = cfg.target_channels.len();
    let mut data = Vec::with_capacity((examples.len() + 1) * v * ct);
    for pair in examples.iter().chain(std::iter::once(query)) {
        for node in 0..v {
            for &ch in &cfg.target_channels {
                data.push(T::from_f64(stats.normalize(pair.value[node * c + ch], ch)));
            }
        }
    }
    Tensor::from_vec(vec![(examples.len() + 1) * v, ct], data).unwrap()
}

/// Mutable training state: parameters, optimizer buffers, step counter.
#[derive(Debug, Clone)]
pub struct TrainState<T: Real> {
    pub params: GiconParams<T>,
    pub opt: OptState<T>,
    pub step: usize,
    pub model_cfg: ModelConfig,
    pub train_cfg: TrainConfig,
}

impl<T: Real> TrainState<T> {
    pub fn new(model_cfg: ModelConfig, train_cfg: TrainConfig) -> Result<Self, TrainError> {
        model_cfg.validate()?;
        train_cfg.validate()?;
        let params = GiconParams::init(&model_cfg, train_cfg.seed)?;
        Ok(TrainState {
            params,
            opt: OptState::new(),
            step: 0,
            model_cfg,
            train_cfg,
        })
    }
}

/// Immutable per-run data: dataset, retrieval index, graph context.
pub struct TrainContext<'a> {
    pub dataset: &'a Dataset,
    pub index: &'a PoolIndex,
    pub gctx: GraphContext,
}

impl<'a> TrainContext<'a> {
    pub fn new(dataset: &'a Dataset, index: &'a PoolIndex) -> Self {
        let gctx = GraphContext::new(&dataset.graph, &dataset.edge_stats);
        TrainContext {
            dataset,
            index,
            gctx,
        }
    }
}

/// One assembled training sequence.
pub struct SequenceSample<T: Real> {
    pub inputs: SequenceInputs<T>,
    pub targets: Tensor<T>,
}

fn query_feature(index: &PoolIndex, t: usize) -> Result<FeatureVector, RetrievalError> {
    // training queries live in the pool region, so their features are
    // already indexed (origins are consecutive from tau-1)
    let row = t
        .checked_sub(index.tau - 1)
        .filter(|&r| r < index.origins.len() && index.origins[r] == t)
        .ok_or_else(|| {
            RetrievalError::BadDims(format!("query origin {t} not present in the index"))
        })?;
    Ok(FeatureVector::from_values(index.feature_row(row).to_vec()))
}

/// Assemble the batch for `step`: per sequence, sample dt per regime, sample
/// a query in the training region, retrieve top-K, leakage-guard, and sample
/// k (shared across the batch) context examples.
pub fn assemble_batch<T: Real>(
    state: &TrainState<T>,
    ctx: &TrainContext<'_>,
) -> Result<Vec<SequenceSample<T>>, TrainError> {
    let cfgm = &state.model_cfg;
    let cfgt = &state.train_cfg;
    let ds = ctx.dataset;
    let tau = cfgm.tau;
    let mut rng = Rng::derive(cfgt.seed, "batch", state.step as u64);
    let k = rng.below(cfgt.k_max + 1);

    let mut batch = Vec::with_capacity(cfgt.batch_size);
    for _ in 0..cfgt.batch_size {
        let dt = cfgt.regime.sample(&mut rng);
        let hi = ds
            .train_end
            .checked_sub(dt)
            .and_then(|x| x.checked_sub(tau - 1))
            .filter(|&n| n > 0)
            .ok_or_else(|| {
                TrainError::InsufficientData(format!(
                    "no valid query for dt={dt}, tau={tau}, train_end={}",
                    ds.train_end
                ))
            })?;
        let t = tau - 1 + rng.below(hi);
        let query = make_example(&ds.series, t, dt, tau)?;

        let pool = ctx.index.pool_for_dt(dt);
        let qf = query_feature(ctx.index, t)?;
        let guard = LeakageGuard {
            origin_t: t,
            tau,
            dt,
            series_id: ctx.index.series_id,
        };
        let ranked = select_top_k(&pool, &qf, cfgt.retrieval_k)?;
        let picked = match sample_context(&pool, &ranked, k, &mut rng, &guard) {
            Ok(p) => p,
            Err(RetrievalError::InsufficientSurvivors { .. }) => {
                // widen to the full ranking before giving up
                let full = select_top_k(&pool, &qf, pool.len())?;
                sample_context(&pool, &full, k, &mut rng, &guard)?
            }
            Err(e) => return Err(e.into()),
        };
        let examples = pool.materialize(ds, &picked)?;
        let inputs =
            build_sequence_inputs(cfgm, &ds.channel_stats, ds.graph.n_nodes(), &examples, &query)?;
        let targets = build_targets(cfgm, &ds.channel_stats, &examples, &query);
        batch.push(SequenceSample { inputs, targets });
    }
    Ok(batch)
}

/// Forward, loss, backward, clip, update on an already-assembled batch.
/// Returns the batch loss.
pub fn train_step_on_batch<T: Real>(
    state: &mut TrainState<T>,
    gctx: &GraphContext,
    batch: &[SequenceSample<T>],
) -> Result<f64, TrainError> {
    let step = state.step;
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, &state.params);
    let mut losses = Vec::with_capacity(batch.len());
    for (b, sample) in batch.iter().enumerate() {
        let seed = Rng::derive(
            state.train_cfg.seed,
            "dropout",
            (step * state.train_cfg.batch_size + b) as u64,
        )
        .next_u64();
        let out = forward(
            &mut tape,
            &bound,
            &state.model_cfg,
            gctx,
            &sample.inputs,
            Mode::Train { dropout_seed: seed },
        )?;
        let targets = tape.constant(sample.targets.clone());
        losses.push(compute_loss(&mut tape, out.predictions, targets)?);
    }
    let stacked = tape.concat_rows(&losses)?;
    let loss = tape.mean_all(stacked)?;
    let loss_value = tape.scalar_value(loss);
    if !loss_value.is_finite() {
        return Err(TrainError::NonFiniteLoss { step });
    }

    let grads = tape.backward(loss)?;
    // fixed visit order: gradient list aligned with parameter names
    let mut gtensors: Vec<Tensor<T>> = state
        .params
        .visit()
        .into_iter()
        .map(|(name, t, _)| {
            bound
                .ids
                .get(&name)
                .and_then(|&id| grads.get(id).cloned())
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
        })
        .collect();
    clip_global_norm(&mut gtensors, state.train_cfg.grad_clip);

    let lr = lr_at_step(step, &state.train_cfg);
    let wd = state.train_cfg.weight_decay;
    state.opt.adam_t += 1;
    let opt = &mut state.opt;
    for ((name, param, class), grad) in state.params.visit_mut().into_iter().zip(&gtensors) {
        if routes_to_muon(class, grad.shape()) {
            muon_update(&name, param, grad, opt, lr, wd, step)?;
        } else {
            adam_update(&name, param, grad, opt, lr, wd, step)?;
        }
    }
    state.step += 1;
    Ok(loss_value)
}

/// Assemble a batch for the current step and apply one update.
pub fn train_step<T: Real>(
    state: &mut TrainState<T>,
    ctx: &TrainContext<'_>,
) -> Result<f64, TrainError> {
    let batch = assemble_batch(state, ctx)?;
    train_step_on_batch(state, &ctx.gctx, &batch)
}

/// One log record per `log_every` steps.
#[derive(Debug, Clone)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub wall_s: f64,
}

/// Run until `state.step == until`, logging through the callback.
pub fn train_loop<T: Real>(
    state: &mut TrainState<T>,
    ctx: &TrainContext<'_>,
    until: usize,
    mut on_log: impl FnMut(LogRow),
) -> Result<(), TrainError> {
    let start = std::time::Instant::now();
    while state.step < until {
        let step = state.step;
        let loss = train_step(state, ctx)?;
        if state.train_cfg.log_every > 0
            && (step % state.train_cfg.log_every == 0 || state.step == until)
        {
            on_log(LogRow {
                step,
                lr: lr_at_step(step, &state.train_cfg),
                loss,
                wall_s: start.elapsed().as_secs_f64(),
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests;
