//! Evaluation protocols: cardinality sweep over example counts, time-gap
//! extrapolation with out-of-distribution flagging, cross-graph transfer,
//! and the noise-context ablation. Only the query prediction is scored;
//! RMSE is reported per channel in de-normalized units.

mod report;

pub use report::{emit_report, file_hash, read_report_rows, write_csv, write_svg};

use thiserror::Error;

use crate::graph::{make_example, Dataset, DataError, ExamplePair, FormatError};
use crate::model::{
    build_sequence_inputs, forward, BoundParams, GiconParams, GraphContext, Mode, ModelConfig,
    ModelError, SequenceInputs,
};
use crate::retrieval::{
    extract_feature, select_top_k, FeatureVector, LeakageGuard, PoolIndex, RetrievalError,
};
use crate::rng::Rng;
use crate::tensor::{Real, Tape, Tensor};
use crate::train::OperatorRegime;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("eval spec: {0}")]
    Spec(String),
    #[error("channel schema mismatch: checkpoint has {expected:?}, dataset has {got:?}")]
    SchemaMismatch {
        expected: Vec<String>,
        got: Vec<String>,
    },
    #[error("empty input to rmse")]
    EmptyRmse,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionMode {
    TopK,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseMode {
    Off,
    Gaussian { sigma: f64 },
}

#[derive(Debug, Clone)]
pub struct EvalSpec {
    pub dts: Vec<usize>,
    /// Example counts, nonnegative ascending.
    pub counts: Vec<usize>,
    pub selection: SelectionMode,
    pub noise: NoiseMode,
    /// Query stride through the test region.
    pub stride: usize,
    pub seed: u64,
}

impl EvalSpec {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.dts.is_empty() || self.counts.is_empty() {
            return Err(EvalError::Spec("need at least one dt and one count".into()));
        }
        if self.counts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(EvalError::Spec(format!(
                "counts must be strictly ascending, got {:?}",
                self.counts
            )));
        }
        if self.stride == 0 {
            return Err(EvalError::Spec("stride must be >= 1".into()));
        }
        if let NoiseMode::Gaussian { sigma } = self.noise {
            if sigma <= 0.0 {
                return Err(EvalError::Spec(format!("noise sigma {sigma} must be > 0")));
            }
        }
        Ok(())
    }
}

/// One output cell: a (dt, example_count, channel) triple.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub dt: usize,
    pub example_count: usize,
    pub channel: String,
    pub rmse: Option<f64>,
    pub rmse_noise: Option<f64>,
    pub n_queries: usize,
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub checkpoint_hash: u64,
    pub dataset_hash: u64,
    pub seed: u64,
}

impl Report {
    pub fn has_errors(&self) -> bool {
        self.rows
            .iter()
            .any(|r| r.flags.iter().any(|f| f.starts_with("error=")))
    }
}

/// Root mean squared residual.
pub fn rmse(preds: &[f64], truth: &[f64]) -> Result<f64, EvalError> {
    if preds.is_empty() || preds.len() != truth.len() {
        return Err(EvalError::EmptyRmse);
    }
    let acc: f64 = preds
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok((acc / preds.len() as f64).sqrt())
}

/// Read-only evaluation over one checkpoint and one dataset.
pub struct Evaluator<'a, T: Real> {
    pub params: &'a GiconParams<T>,
    pub model_cfg: &'a ModelConfig,
    /// Training regime, for flagging out-of-distribution time gaps.
    pub train_regime: Option<OperatorRegime>,
    pub dataset: &'a Dataset,
    pub index: &'a PoolIndex,
    pub gctx: GraphContext,
    pub checkpoint_hash: u64,
    pub dataset_hash: u64,
}

impl<'a, T: Real> Evaluator<'a, T> {
    pub fn new(
        params: &'a GiconParams<T>,
        model_cfg: &'a ModelConfig,
        train_regime: Option<OperatorRegime>,
        dataset: &'a Dataset,
        index: &'a PoolIndex,
    ) -> Self {
        let gctx = GraphContext::new(&dataset.graph, &dataset.edge_stats);
        Evaluator {
            params,
            model_cfg,
            train_regime,
            dataset,
            index,
            gctx,
            checkpoint_hash: 0,
            dataset_hash: 0,
        }
    }

    /// Transfer guard: the dataset's channel schema must equal the one the
    /// checkpoint was trained on.
    pub fn check_schema(&self, checkpoint_channels: &[String]) -> Result<(), EvalError> {
        let got = self.dataset.series.channel_names();
        if got != checkpoint_channels {
            return Err(EvalError::SchemaMismatch {
                expected: checkpoint_channels.to_vec(),
                got: got.to_vec(),
            });
        }
        Ok(())
    }

    fn query_feature(&self, query: &ExamplePair) -> Result<FeatureVector, EvalError> {
        let s = &self.dataset.series;
        let (tau, v, c) = (query.tau, s.n_nodes(), s.n_channels());
        let normalized: Vec<f64> = (0..tau * v * c)
            .map(|i| {
                self.dataset
                    .channel_stats
                    .normalize(query.key[i], i % c)
            })
            .collect();
        Ok(extract_feature(
            &normalized,
            tau,
            v,
            c,
            self.index.tau_r,
        )?)
    }

    /// Valid query origins in the test region for a gap.
    fn test_queries(&self, dt: usize, stride: usize) -> Vec<usize> {
        let s = &self.dataset.series;
        let tau = self.model_cfg.tau;
        let lo = self.dataset.train_end.max(tau.saturating_sub(1));
        let hi = s.horizon().saturating_sub(dt); // t + dt < T
        (lo..hi).step_by(stride).collect()
    }

    /// Evaluate one (dt, count) cell. Returns per-channel sums of squared
    /// residuals, matching noise sums, and the query count.
    fn eval_cell(
        &self,
        dt: usize,
        count: usize,
        spec: &EvalSpec,
    ) -> Result<(Vec<f64>, Vec<f64>, usize), EvalError> {
        let ds = self.dataset;
        let cfg = self.model_cfg;
        let tau = cfg.tau;
        let ct = cfg.target_channels.len();
        let v = ds.graph.n_nodes();
        let queries = self.test_queries(dt, spec.stride);
        if queries.is_empty() {
            return Err(EvalError::Spec(format!(
                "no valid test queries for dt={dt} (horizon {}, train_end {})",
                ds.series.horizon(),
                ds.train_end
            )));
        }
        let pool = self.index.pool_for_dt(dt);
        let mut sq = vec![0.0f64; ct];
        let mut sq_noise = vec![0.0f64; ct];
        let mut n_obs = 0usize;

        for &t in &queries {
            let query = make_example(&ds.series, t, dt, tau)?;
            let picked: Vec<usize> = if count == 0 {
                Vec::new()
            } else {
                let qf = self.query_feature(&query)?;
                let guard = LeakageGuard {
                    origin_t: t,
                    tau,
                    dt,
                    series_id: self.index.series_id,
                };
                let ranked = select_top_k(&pool, &qf, pool.len())?;
                let survivors: Vec<usize> = ranked
                    .into_iter()
                    .filter(|&i| !guard.excludes(&pool.entry(i), pool.tau()))
                    .collect();
                if survivors.len() < count {
                    return Err(EvalError::Spec(format!(
                        "pool too small for count {count} at dt={dt}: {} survivors",
                        survivors.len()
                    )));
                }
                match spec.selection {
                    SelectionMode::TopK => survivors[..count].to_vec(),
                    SelectionMode::Random => {
                        let mut rng = Rng::derive(
                            spec.seed,
                            "random-selection",
                            (dt as u64) << 40 | (count as u64) << 20 | t as u64,
                        );
                        let mut idx = rng.sample_without_replacement(survivors.len(), count);
                        idx.sort_unstable();
                        idx.into_iter().map(|i| survivors[i]).collect()
                    }
                }
            };
            let examples = pool.materialize(ds, &picked)?;
            let inputs: SequenceInputs<T> =
                build_sequence_inputs(cfg, &ds.channel_stats, v, &examples, &query)?;
            let pred = self.query_prediction(&inputs)?;
            accumulate_sq(
                &mut sq,
                &pred,
                &query,
                cfg,
                &ds.channel_stats,
            );

            if let NoiseMode::Gaussian { sigma } = spec.noise {
                let noise_inputs =
                    self.noise_inputs(&inputs, count, sigma, spec.seed, dt, t)?;
                let pred_noise = self.query_prediction(&noise_inputs)?;
                accumulate_sq(&mut sq_noise, &pred_noise, &query, cfg, &ds.channel_stats);
            }
            n_obs += 1;
        }
        Ok((sq, sq_noise, n_obs))
    }

    /// Forward in eval mode and de-normalize the query prediction block.
    fn query_prediction(&self, inputs: &SequenceInputs<T>) -> Result<Vec<f64>, EvalError> {
        let mut tape = Tape::<T>::new();
        let bound = BoundParams::bind(&mut tape, self.params);
        let out = forward(
            &mut tape,
            &bound,
            self.model_cfg,
            &self.gctx,
            inputs,
            Mode::Eval,
        )?;
        let ct = self.model_cfg.target_channels.len();
        let rows = out.block_rows(out.k);
        let data = tape.value(out.predictions).data();
        let mut pred = Vec::with_capacity(rows.len() * ct);
        for r in rows {
            for (ci, &ch) in self.model_cfg.target_channels.iter().enumerate() {
                pred.push(
                    self.dataset
                        .channel_stats
                        .denormalize(data[r * ct + ci].to_f64(), ch),
                );
            }
        }
        Ok(pred)
    }

    /// Replace example keys and values with i.i.d. Gaussian draws in
    /// normalized space, keeping the query.
    fn noise_inputs(
        &self,
        inputs: &SequenceInputs<T>,
        count: usize,
        sigma: f64,
        seed: u64,
        dt: usize,
        t: usize,
    ) -> Result<SequenceInputs<T>, EvalError> {
        let mut rng = Rng::derive(seed, "noise-context", (dt as u64) << 32 | t as u64);
        let mut keys: Vec<Tensor<T>> = Vec::with_capacity(count + 1);
        let mut values: Vec<Tensor<T>> = Vec::with_capacity(count);
        for i in 0..count {
            keys.push(gaussian_like(&inputs.keys[i], sigma, &mut rng));
            values.push(gaussian_like(&inputs.values[i], sigma, &mut rng));
        }
        keys.push(inputs.keys[count].clone());
        Ok(SequenceInputs {
            keys,
            values,
            n_nodes: inputs.n_nodes,
        })
    }

    fn ood(&self, dt: usize) -> bool {
        self.train_regime
            .map(|r| !r.contains(dt))
            .unwrap_or(false)
    }

    /// Run the protocol grid. Errors are recorded per cell; the sweep
    /// continues.
    pub fn run(&self, spec: &EvalSpec) -> Result<Report, EvalError> {
        spec.validate()?;
        let cfg = self.model_cfg;
        let names = self.dataset.series.channel_names();
        let v = self.dataset.graph.n_nodes();
        let mut rows = Vec::new();
        for &dt in &spec.dts {
            let mut flags_base = Vec::new();
            if self.ood(dt) {
                flags_base.push("ood".to_string());
            }
            for &count in &spec.counts {
                match self.eval_cell(dt, count, spec) {
                    Ok((sq, sq_noise, n)) => {
                        for (ci, &ch) in cfg.target_channels.iter().enumerate() {
                            let denom = (n * v) as f64;
                            let rn = match spec.noise {
                                NoiseMode::Gaussian { .. } => {
                                    Some((sq_noise[ci] / denom).sqrt())
                                }
                                NoiseMode::Off => None,
                            };
                            rows.push(ReportRow {
                                dt,
                                example_count: count,
                                channel: names[ch].clone(),
                                rmse: Some((sq[ci] / denom).sqrt()),
                                rmse_noise: rn,
                                n_queries: n,
                                flags: flags_base.clone(),
                            });
                        }
                    }
                    Err(e) => {
                        for &ch in &cfg.target_channels {
                            let mut flags = flags_base.clone();
                            flags.push(format!("error={e}").replace(',', ";"));
                            rows.push(ReportRow {
                                dt,
                                example_count: count,
                                channel: names[ch].clone(),
                                rmse: None,
                                rmse_noise: None,
                                n_queries: 0,
                                flags,
                            });
                        }
                    }
                }
            }
        }
        Ok(Report {
            rows,
            checkpoint_hash: self.checkpoint_hash,
            dataset_hash: self.dataset_hash,
            seed: spec.seed,
        })
    }

    /// RMSE versus example count over in-distribution gaps.
    pub fn cardinality_sweep(&self, spec: &EvalSpec) -> Result<Report, EvalError> {
        self.run(spec)
    }

    /// Same pipeline with gaps outside the training range; rows carry the
    /// "ood" flag.
    pub fn extrapolate_eval(&self, spec: &EvalSpec) -> Result<Report, EvalError> {
        self.run(spec)
    }

    /// Quality-vs-noise context comparison; both RMSE columns are filled.
    pub fn noise_ablation(&self, spec: &EvalSpec, sigma: f64) -> Result<Report, EvalError> {
        let mut spec = spec.clone();
        spec.noise = NoiseMode::Gaussian { sigma };
        self.run(&spec)
    }
}

fn gaussian_like<T: Real>(t: &Tensor<T>, sigma: f64, rng: &mut Rng) -> Tensor<T> {
    let data = (0..t.len())
        .map(|_| T::from_f64(sigma * rng.normal()))
        .collect();
    Tensor::from_vec(t.shape().to_vec(), data).unwrap()
}

fn accumulate_sq(
    sq: &mut [f64],
    pred: &[f64],
    query: &ExamplePair,
    cfg: &ModelConfig,
    _stats: &crate::graph::ChannelStats,
) {
    let ct = cfg.target_channels.len();
    let c = query.n_channels;
    for node in 0..query.n_nodes {
        for (ci, &ch) in cfg.target_channels.iter().enumerate() {
            let truth = query.value[node * c + ch] as f64;
            let d = pred[node * ct + ci] - truth;
            sq[ci] += d * d;
        }
    }
}

/// Evaluate a checkpoint trained on one graph against a dataset on another
/// graph; parameters are graph-size-agnostic, only the channel schema must
/// match.
pub fn transfer_eval<T: Real>(
    params: &GiconParams<T>,
    model_cfg: &ModelConfig,
    train_regime: Option<OperatorRegime>,
    checkpoint_channels: &[String],
    dataset_b: &Dataset,
    index_b: &PoolIndex,
    spec: &EvalSpec,
) -> Result<Report, EvalError> {
    let ev = Evaluator::new(params, model_cfg, train_regime, dataset_b, index_b);
    ev.check_schema(checkpoint_channels)?;
    ev.run(spec)
}
