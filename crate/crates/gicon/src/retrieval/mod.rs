//! Retrieval of contextual examples: pooled key features, exact cosine
//! top-K over a per-dt example pool, and the stochastic second-stage sample
//! used during training.
//!
//! Features are quantized to f32 on extraction so that an index loaded from
//! disk scores identically to one built in memory.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{
    make_example, read_container, write_container, Dataset, ExamplePair, FormatError,
};
use crate::rng::Rng;

pub const INDEX_MAGIC: &[u8; 8] = b"GICON-IX";
pub const INDEX_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("tau_r {tau_r} exceeds key window tau {tau}")]
    TauRTooLarge { tau_r: usize, tau: usize },
    #[error("example pool is empty")]
    EmptyPool,
    #[error("context needs {requested} examples but only {survivors} survive the leakage guard")]
    InsufficientSurvivors { survivors: usize, requested: usize },
    #[error("dimension mismatch: {0}")]
    BadDims(String),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Fixed-size representation of a key window: per-frame node means of the
/// last `tau_r` frames, concatenated in temporal order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    values: Vec<f32>,
}

impl FeatureVector {
    pub fn from_values(values: Vec<f32>) -> Self {
        FeatureVector { values }
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Node-mean pooling over the last `tau_r` frames of a key window laid out
/// [tau, n_nodes, c]. Values are whatever space the caller works in
/// (normalized, for pools built from datasets).
pub fn extract_feature(
    key: &[f64],
    tau: usize,
    n_nodes: usize,
    n_channels: usize,
    tau_r: usize,
) -> Result<FeatureVector, RetrievalError> {
    if tau_r > tau {
        return Err(RetrievalError::TauRTooLarge { tau_r, tau });
    }
    if key.len() != tau * n_nodes * n_channels || n_nodes == 0 {
        return Err(RetrievalError::BadDims(format!(
            "key has {} values for tau={} |V|={} c={}",
            key.len(),
            tau,
            n_nodes,
            n_channels
        )));
    }
    let mut values = Vec::with_capacity(tau_r * n_channels);
    for f in tau - tau_r..tau {
        for ch in 0..n_channels {
            let mut acc = 0.0f64;
            for node in 0..n_nodes {
                acc += key[(f * n_nodes + node) * n_channels + ch];
            }
            values.push((acc / n_nodes as f64) as f32);
        }
    }
    Ok(FeatureVector { values })
}

/// Cosine similarity with a degenerate-input flag: a zero vector on either
/// side yields similarity 0 and sets the flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub value: f64,
    pub degenerate: bool,
}

pub fn cosine_similarity(z1: &[f32], z2: &[f32]) -> Similarity {
    debug_assert_eq!(z1.len(), z2.len());
    let mut dot = 0.0f64;
    let mut n1 = 0.0f64;
    let mut n2 = 0.0f64;
    for (&a, &b) in z1.iter().zip(z2) {
        let (a, b) = (a as f64, b as f64);
        dot += a * b;
        n1 += a * a;
        n2 += b * b;
    }
    if n1 == 0.0 || n2 == 0.0 {
        return Similarity {
            value: 0.0,
            degenerate: true,
        };
    }
    Similarity {
        value: dot / (n1.sqrt() * n2.sqrt()),
        degenerate: false,
    }
}

/// Metadata of one pool entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub origin_t: usize,
    pub dt: usize,
    pub series_id: usize,
}

/// Features for every valid key origin of one series, shared across dt
/// partitions. Built once, persisted with `write_index`.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolIndex {
    pub tau: usize,
    pub tau_r: usize,
    pub dim: usize,
    pub series_id: usize,
    pub train_end: usize,
    /// Key origin per feature row, ascending.
    pub origins: Vec<usize>,
    /// Row-major [len(origins), dim].
    pub features: Vec<f32>,
}

impl PoolIndex {
    /// Extract features (in normalized space) for every origin whose key
    /// window fits inside the training region.
    pub fn build(
        ds: &Dataset,
        tau: usize,
        tau_r: usize,
        series_id: usize,
    ) -> Result<Self, RetrievalError> {
        if tau_r > tau {
            return Err(RetrievalError::TauRTooLarge { tau_r, tau });
        }
        let s = &ds.series;
        let (v, c) = (s.n_nodes(), s.n_channels());
        let mut origins = Vec::new();
        let mut features = Vec::new();
        let dim = tau_r * c;
        if ds.train_end < tau {
            return Ok(PoolIndex {
                tau,
                tau_r,
                dim,
                series_id,
                train_end: ds.train_end,
                origins,
                features,
            });
        }
        let mut key = vec![0.0f64; tau * v * c];
        for t in tau - 1..ds.train_end {
            for (f, frame_t) in (t + 1 - tau..=t).enumerate() {
                for node in 0..v {
                    for ch in 0..c {
                        key[(f * v + node) * c + ch] =
                            ds.channel_stats.normalize(s.value(frame_t, node, ch), ch);
                    }
                }
            }
            let fv = extract_feature(&key, tau, v, c, tau_r)?;
            origins.push(t);
            features.extend_from_slice(fv.values());
        }
        Ok(PoolIndex {
            tau,
            tau_r,
            dim,
            series_id,
            train_end: ds.train_end,
            origins,
            features,
        })
    }

    /// The dt partition: rows whose value frame still lies in the training
    /// region. All entries of the returned pool share `dt`.
    pub fn pool_for_dt(&self, dt: usize) -> ExamplePool<'_> {
        let rows = self
            .origins
            .iter()
            .enumerate()
            .filter(|(_, &t)| t + dt < self.train_end)
            .map(|(i, _)| i)
            .collect();
        ExamplePool {
            index: self,
            rows,
            dt,
        }
    }

    pub fn feature_row(&self, row: usize) -> &[f32] {
        &self.features[row * self.dim..(row + 1) * self.dim]
    }
}

/// One dt partition of a [`PoolIndex`].
#[derive(Debug, Clone)]
pub struct ExamplePool<'a> {
    index: &'a PoolIndex,
    rows: Vec<usize>,
    dt: usize,
}

impl<'a> ExamplePool<'a> {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dt(&self) -> usize {
        self.dt
    }

    pub fn tau(&self) -> usize {
        self.index.tau
    }

    pub fn entry(&self, i: usize) -> PoolEntry {
        PoolEntry {
            origin_t: self.index.origins[self.rows[i]],
            dt: self.dt,
            series_id: self.index.series_id,
        }
    }

    pub fn feature(&self, i: usize) -> &[f32] {
        self.index.feature_row(self.rows[i])
    }

    /// Cut the example pairs for the given pool indices.
    pub fn materialize(
        &self,
        ds: &Dataset,
        picked: &[usize],
    ) -> Result<Vec<ExamplePair>, crate::graph::DataError> {
        picked
            .iter()
            .map(|&i| make_example(&ds.series, self.entry(i).origin_t, self.dt, self.index.tau))
            .collect()
    }
}

/// Indices of the K most similar pool entries, score-descending, ties broken
/// by lower pool index. K beyond the pool size returns everything.
pub fn select_top_k(
    pool: &ExamplePool<'_>,
    query: &FeatureVector,
    k: usize,
) -> Result<Vec<usize>, RetrievalError> {
    if pool.is_empty() {
        return Err(RetrievalError::EmptyPool);
    }
    if query.len() != pool.index.dim {
        return Err(RetrievalError::BadDims(format!(
            "query has {} features, pool expects {}",
            query.len(),
            pool.index.dim
        )));
    }
    let mut scored: Vec<(usize, f64)> = (0..pool.len())
        .map(|i| (i, cosine_similarity(query.values(), pool.feature(i)).value))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored.into_iter().map(|(i, _)| i).collect())
}

/// The query's identity for leakage exclusion.
#[derive(Debug, Clone, Copy)]
pub struct LeakageGuard {
    pub origin_t: usize,
    pub tau: usize,
    pub dt: usize,
    pub series_id: usize,
}

impl LeakageGuard {
    /// True when the example's closed window [t-tau+1, t+dt] intersects the
    /// query's window on the same series.
    pub fn excludes(&self, entry: &PoolEntry, entry_tau: usize) -> bool {
        if entry.series_id != self.series_id {
            return false;
        }
        let q_lo = self.origin_t as i64 - self.tau as i64 + 1;
        let q_hi = self.origin_t as i64 + self.dt as i64;
        let e_lo = entry.origin_t as i64 - entry_tau as i64 + 1;
        let e_hi = entry.origin_t as i64 + entry.dt as i64;
        e_lo <= q_hi && q_lo <= e_hi
    }
}

/// Uniformly sample `k` of the ranked candidates that survive the leakage
/// guard, keeping descending-similarity order. Deterministic given the rng
/// state.
pub fn sample_context(
    pool: &ExamplePool<'_>,
    ranked: &[usize],
    k: usize,
    rng: &mut Rng,
    guard: &LeakageGuard,
) -> Result<Vec<usize>, RetrievalError> {
    let survivors: Vec<usize> = ranked
        .iter()
        .copied()
        .filter(|&i| !guard.excludes(&pool.entry(i), pool.tau()))
        .collect();
    if survivors.len() < k {
        return Err(RetrievalError::InsufficientSurvivors {
            survivors: survivors.len(),
            requested: k,
        });
    }
    let mut picked = rng.sample_without_replacement(survivors.len(), k);
    picked.sort_unstable();
    Ok(picked.into_iter().map(|p| survivors[p]).collect())
}

#[derive(Serialize, Deserialize)]
struct IndexHeader {
    version: u32,
    tau: usize,
    tau_r: usize,
    dim: usize,
    series_id: usize,
    train_end: usize,
    origins: Vec<usize>,
    dataset_hash: u64,
}

pub fn write_index(index: &PoolIndex, dataset_hash: u64, path: &Path) -> Result<(), FormatError> {
    let header = IndexHeader {
        version: INDEX_VERSION,
        tau: index.tau,
        tau_r: index.tau_r,
        dim: index.dim,
        series_id: index.series_id,
        train_end: index.train_end,
        origins: index.origins.clone(),
        dataset_hash,
    };
    write_container(
        path,
        INDEX_MAGIC,
        &serde_json::to_string(&header).map_err(FormatError::Header)?,
        &index.features,
    )
}

pub fn read_index(path: &Path) -> Result<(PoolIndex, u64), FormatError> {
    let (json, features) = read_container(path, INDEX_MAGIC)?;
    let header: IndexHeader = serde_json::from_str(&json)?;
    if header.version != INDEX_VERSION {
        return Err(FormatError::UnsupportedVersion {
            found: header.version,
            supported: INDEX_VERSION,
        });
    }
    if features.len() != header.origins.len() * header.dim {
        return Err(FormatError::Truncated(format!(
            "{} feature values for {} rows of dim {}",
            features.len(),
            header.origins.len(),
            header.dim
        )));
    }
    Ok((
        PoolIndex {
            tau: header.tau,
            tau_r: header.tau_r,
            dim: header.dim,
            series_id: header.series_id,
            train_end: header.train_end,
            origins: header.origins,
            features,
        },
        header.dataset_hash,
    ))
}

#[cfg(test)]
mod tests;
