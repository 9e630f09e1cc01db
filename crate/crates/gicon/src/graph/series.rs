//! Multichannel time series over a graph and the (key, value, dt) example
//! triples cut from them.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("invalid series: {0}")]
    InvalidSeries(String),
    #[error("unstable spec: explicit-step factor {factor:.4} must be < 1")]
    UnstableSpec { factor: f64 },
    #[error("range error: {0}")]
    Range(String),
}

/// Frames of shape [T, |V|, c] in row-major f32, with hourly timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    frames: Vec<f32>,
    horizon: usize,
    n_nodes: usize,
    n_channels: usize,
    timestamps: Vec<i64>,
    channel_names: Vec<String>,
    target_channels: Vec<usize>,
}

impl Series {
    pub fn new(
        frames: Vec<f32>,
        horizon: usize,
        n_nodes: usize,
        n_channels: usize,
        timestamps: Vec<i64>,
        channel_names: Vec<String>,
        target_channels: Vec<usize>,
    ) -> Result<Self, DataError> {
        if horizon == 0 {
            return Err(DataError::InvalidSeries("horizon must be >= 1".into()));
        }
        if frames.len() != horizon * n_nodes * n_channels {
            return Err(DataError::InvalidSeries(format!(
                "{} frame values for T={} |V|={} c={}",
                frames.len(),
                horizon,
                n_nodes,
                n_channels
            )));
        }
        if timestamps.len() != horizon {
            return Err(DataError::InvalidSeries(format!(
                "{} timestamps for horizon {}",
                timestamps.len(),
                horizon
            )));
        }
        if horizon > 1 {
            let step = timestamps[1] - timestamps[0];
            if step <= 0 {
                return Err(DataError::InvalidSeries(
                    "timestamps must be strictly increasing".into(),
                ));
            }
            for w in timestamps.windows(2) {
                if w[1] - w[0] != step {
                    return Err(DataError::InvalidSeries(
                        "timestamps must be uniformly spaced".into(),
                    ));
                }
            }
        }
        if channel_names.len() != n_channels {
            return Err(DataError::InvalidSeries(format!(
                "{} channel names for c={}",
                channel_names.len(),
                n_channels
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for &tc in &target_channels {
            if tc >= n_channels {
                return Err(DataError::InvalidSeries(format!(
                    "target channel {} out of range 0..{}",
                    tc, n_channels
                )));
            }
            if !seen.insert(tc) {
                return Err(DataError::InvalidSeries(format!(
                    "duplicate target channel {}",
                    tc
                )));
            }
        }
        Ok(Series {
            frames,
            horizon,
            n_nodes,
            n_channels,
            timestamps,
            channel_names,
            target_channels,
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn timestamps(&self) -> &[i64] {
        &self.timestamps
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn target_channels(&self) -> &[usize] {
        &self.target_channels
    }

    pub fn frames(&self) -> &[f32] {
        &self.frames
    }

    /// Frame `t` as a [|V| x c] slice.
    pub fn frame(&self, t: usize) -> &[f32] {
        let fl = self.n_nodes * self.n_channels;
        &self.frames[t * fl..(t + 1) * fl]
    }

    pub fn value(&self, t: usize, node: usize, channel: usize) -> f32 {
        self.frames[(t * self.n_nodes + node) * self.n_channels + channel]
    }
}

/// One in-context example: `key` holds the tau frames ending at `origin_t`,
/// `value` is the frame at `origin_t + dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExamplePair {
    pub key: Vec<f32>,
    pub value: Vec<f32>,
    pub tau: usize,
    pub dt: usize,
    pub origin_t: usize,
    pub n_nodes: usize,
    pub n_channels: usize,
}

impl ExamplePair {
    /// Closed time window touched by this example on its series:
    /// [origin_t - tau + 1, origin_t + dt].
    pub fn window(&self) -> (usize, usize) {
        (self.origin_t + 1 - self.tau, self.origin_t + self.dt)
    }
}

/// Cut an example at time index `t`: key = frames[t-tau+1 ..= t],
/// value = frames[t+dt].
pub fn make_example(
    series: &Series,
    t: usize,
    dt: usize,
    tau: usize,
) -> Result<ExamplePair, DataError> {
    if tau == 0 {
        return Err(DataError::Range("tau must be >= 1".into()));
    }
    if dt == 0 {
        return Err(DataError::Range("dt must be >= 1".into()));
    }
    if t + 1 < tau {
        return Err(DataError::Range(format!(
            "insufficient history: need t - tau + 1 >= 0, got t={t}, tau={tau}"
        )));
    }
    if t + dt >= series.horizon() {
        return Err(DataError::Range(format!(
            "insufficient future: need t + dt < T, got t={}, dt={}, T={}",
            t,
            dt,
            series.horizon()
        )));
    }
    let fl = series.n_nodes() * series.n_channels();
    let start = t + 1 - tau;
    let key = series.frames()[start * fl..(t + 1) * fl].to_vec();
    let value = series.frame(t + dt).to_vec();
    Ok(ExamplePair {
        key,
        value,
        tau,
        dt,
        origin_t: t,
        n_nodes: series.n_nodes(),
        n_channels: series.n_channels(),
    })
}

/// Per-channel z-score statistics fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    /// Fit over frames [0, t_end).
    pub fn fit(series: &Series, t_end: usize) -> Self {
        let c = series.n_channels();
        let t_end = t_end.min(series.horizon()).max(1);
        let mut mean = vec![0.0f64; c];
        let mut count = 0usize;
        for t in 0..t_end {
            for node in 0..series.n_nodes() {
                for ch in 0..c {
                    mean[ch] += series.value(t, node, ch) as f64;
                }
            }
            count += series.n_nodes();
        }
        for m in mean.iter_mut() {
            *m /= count as f64;
        }
        let mut var = vec![0.0f64; c];
        for t in 0..t_end {
            for node in 0..series.n_nodes() {
                for ch in 0..c {
                    let d = series.value(t, node, ch) as f64 - mean[ch];
                    var[ch] += d * d;
                }
            }
        }
        let std = var
            .iter()
            .map(|v| {
                let s = (v / count as f64).sqrt();
                if s > 1e-9 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        ChannelStats { mean, std }
    }

    pub fn normalize(&self, raw: f32, channel: usize) -> f64 {
        (raw as f64 - self.mean[channel]) / self.std[channel]
    }

    pub fn denormalize(&self, z: f64, channel: usize) -> f64 {
        z * self.std[channel] + self.mean[channel]
    }
}
