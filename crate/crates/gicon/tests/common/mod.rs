//! Shared oracles and builders for the integration suites. Everything here
//! is independent of the library's computation paths it is used to check.

#![allow(dead_code)]

use gicon::graph::{generate, Dataset, SynthSpec};
use gicon::rng::Rng;
use gicon::tensor::Tensor;

/// Singular values of an [m, n] matrix via Jacobi iteration on the Gram
/// matrix of the smaller side. Oracle only; no shortcuts shared with the
/// optimizer code.
pub fn singular_values(a: &Tensor<f64>) -> Vec<f64> {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    // work with B = X^T X where X has at least as many rows as columns
    let (rows, cols, data): (usize, usize, Vec<f64>) = if m >= n {
        (m, n, a.data().to_vec())
    } else {
        let mut at = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                at[c * m + r] = a.data()[r * n + c];
            }
        }
        (n, m, at)
    };
    let mut b = vec![0.0f64; cols * cols];
    for i in 0..rows {
        for p in 0..cols {
            for q in 0..cols {
                b[p * cols + q] += data[i * cols + p] * data[i * cols + q];
            }
        }
    }
    for _ in 0..100 {
        let mut off = 0.0;
        for p in 0..cols {
            for q in p + 1..cols {
                off += b[p * cols + q] * b[p * cols + q];
            }
        }
        if off < 1e-26 {
            break;
        }
        for p in 0..cols {
            for q in p + 1..cols {
                if b[p * cols + q].abs() < 1e-20 {
                    continue;
                }
                let theta = 0.5 * (b[q * cols + q] - b[p * cols + p]) / b[p * cols + q];
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..cols {
                    let (bip, biq) = (b[i * cols + p], b[i * cols + q]);
                    b[i * cols + p] = c * bip - s * biq;
                    b[i * cols + q] = s * bip + c * biq;
                }
                for i in 0..cols {
                    let (bpi, bqi) = (b[p * cols + i], b[q * cols + i]);
                    b[p * cols + i] = c * bpi - s * bqi;
                    b[q * cols + i] = s * bpi + c * bqi;
                }
            }
        }
    }
    let mut sv: Vec<f64> = (0..cols)
        .map(|i| b[i * cols + i].max(0.0).sqrt())
        .collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    sv
}

/// Random orthogonal matrix as a product of n Householder reflections.
pub fn random_orthogonal(rng: &mut Rng, n: usize) -> Vec<f64> {
    let mut q = vec![0.0f64; n * n];
    for i in 0..n {
        q[i * n + i] = 1.0;
    }
    for _ in 0..n {
        let v: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let v: Vec<f64> = v.iter().map(|x| x / norm).collect();
        for r in 0..n {
            let dot: f64 = (0..n).map(|c| q[r * n + c] * v[c]).sum();
            for c in 0..n {
                q[r * n + c] -= 2.0 * dot * v[c];
            }
        }
    }
    q
}

/// m x n matrix U diag(spectrum) V^T with orthogonal U, V.
pub fn matrix_with_spectrum(rng: &mut Rng, m: usize, n: usize, spectrum: &[f64]) -> Tensor<f64> {
    let k = m.min(n);
    assert_eq!(spectrum.len(), k);
    let u = random_orthogonal(rng, m);
    let v = random_orthogonal(rng, n);
    let mut out = vec![0.0f64; m * n];
    for r in 0..m {
        for c in 0..n {
            let mut acc = 0.0;
            for (j, &s) in spectrum.iter().enumerate() {
                acc += u[r * m + j] * s * v[c * n + j];
            }
            out[r * n + c] = acc;
        }
    }
    Tensor::from_vec(vec![m, n], out).unwrap()
}

/// Synthetic dataset shared by several criteria.
pub fn make_dataset(
    n_nodes: usize,
    n_channels: usize,
    horizon: usize,
    seed: u64,
    train_frac: f64,
) -> Dataset {
    let spec = SynthSpec {
        n_nodes,
        connection_radius_km: 30.0,
        n_channels,
        horizon,
        seed,
        ..SynthSpec::default()
    };
    let (g, s) = generate(&spec).unwrap();
    Dataset::assemble(g, s, train_frac).unwrap()
}

/// Pooled RMSE across report rows: root of the query-weighted mean of
/// squared per-cell RMSEs.
pub fn pooled_rmse(rows: &[gicon::eval::ReportRow], count: usize) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for r in rows.iter().filter(|r| r.example_count == count) {
        let rmse = r.rmse.expect("errored cell in pooled rmse");
        let w = r.n_queries as f64;
        num += rmse * rmse * w;
        den += w;
    }
    assert!(den > 0.0, "no rows at count {count}");
    (num / den).sqrt()
}
