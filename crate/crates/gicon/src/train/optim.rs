//! Parameter updates: orthogonalized momentum for hidden weight matrices,
//! an adaptive-moment fallback with decoupled weight decay for everything
//! else (vectors, input embeddings, the decoder head).

use std::collections::BTreeMap;

use crate::model::ParamClass;
use crate::tensor::{Real, Tensor};

use super::TrainError;

pub const MUON_MOMENTUM: f64 = 0.95;
/// Quintic iteration coefficients.
pub const NS_COEFFS: (f64, f64, f64) = (3.4445, -4.7750, 2.0315);
pub const NS_STEPS: usize = 5;
const NS_EPS: f64 = 1e-7;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Orthogonalize a 2-D matrix by the quintic Newton-Schulz iteration on the
/// Frobenius-normalized input (transposed first when tall).
pub fn newton_schulz<T: Real>(g: &Tensor<T>) -> Tensor<T> {
    assert_eq!(g.shape().len(), 2, "newton_schulz needs a matrix");
    let (rows, cols) = (g.shape()[0], g.shape()[1]);
    let tall = rows > cols;
    let (m, n) = if tall { (cols, rows) } else { (rows, cols) };

    // x = g / (||g||_F + eps), transposed if tall
    let mut norm = 0.0f64;
    for &v in g.data() {
        norm += v.to_f64() * v.to_f64();
    }
    let inv = T::from_f64(1.0 / (norm.sqrt() + NS_EPS));
    let mut x = vec![T::ZERO; m * n];
    if tall {
        for r in 0..rows {
            for c in 0..cols {
                x[c * n + r] = g.data()[r * cols + c] * inv;
            }
        }
    } else {
        for (xv, &gv) in x.iter_mut().zip(g.data()) {
            *xv = gv * inv;
        }
    }

    let (a, b, c) = (
        T::from_f64(NS_COEFFS.0),
        T::from_f64(NS_COEFFS.1),
        T::from_f64(NS_COEFFS.2),
    );
    let mut gram = vec![T::ZERO; m * m];
    let mut gram2 = vec![T::ZERO; m * m];
    let mut bx = vec![T::ZERO; m * n];
    for _ in 0..NS_STEPS {
        // gram = x x^T
        for v in gram.iter_mut() {
            *v = T::ZERO;
        }
        crate::tensor::linalg::mm_nt_acc(&mut gram, &x, &x, m, n, m);
        // gram2 = b*gram + c*gram*gram
        for v in gram2.iter_mut() {
            *v = T::ZERO;
        }
        crate::tensor::linalg::mm_acc(&mut gram2, &gram, &gram, m, m, m);
        for (g2, &g1) in gram2.iter_mut().zip(&gram) {
            *g2 = g1 * b + *g2 * c;
        }
        // x = a*x + gram2 * x
        for v in bx.iter_mut() {
            *v = T::ZERO;
        }
        crate::tensor::linalg::mm_acc(&mut bx, &gram2, &x, m, m, n);
        for (xv, &bv) in x.iter_mut().zip(&bx) {
            *xv = *xv * a + bv;
        }
    }

    if tall {
        let mut out = vec![T::ZERO; rows * cols];
        for r in 0..rows {
            for cc in 0..cols {
                out[r * cols + cc] = x[cc * n + r];
            }
        }
        Tensor::from_vec(vec![rows, cols], out).unwrap()
    } else {
        Tensor::from_vec(vec![rows, cols], x).unwrap()
    }
}

/// True when a parameter takes the orthogonalized route.
pub fn routes_to_muon(class: ParamClass, shape: &[usize]) -> bool {
    class == ParamClass::Matrix && shape.len() == 2
}

/// Momentum buffers and adaptive moments, keyed by parameter name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptState<T> {
    pub momentum: BTreeMap<String, Tensor<T>>,
    pub adam_m: BTreeMap<String, Tensor<T>>,
    pub adam_v: BTreeMap<String, Tensor<T>>,
    /// Adam timestep (shared; incremented once per optimizer step).
    pub adam_t: u64,
}

impl<T: Real> OptState<T> {
    pub fn new() -> Self {
        OptState {
            momentum: BTreeMap::new(),
            adam_m: BTreeMap::new(),
            adam_v: BTreeMap::new(),
            adam_t: 0,
        }
    }

    pub fn cast<U: Real>(&self) -> OptState<U> {
        OptState {
            momentum: self
                .momentum
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            adam_m: self
                .adam_m
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            adam_v: self
                .adam_v
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            adam_t: self.adam_t,
        }
    }
}

/// Momentum-accumulated gradient, orthogonalized, scaled by
/// sqrt(max(m,n)/min(m,n)) * 0.2, applied with decoupled weight decay.
pub fn muon_update<T: Real>(
    name: &str,
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    state: &mut OptState<T>,
    lr: f64,
    weight_decay: f64,
    step: usize,
) -> Result<(), TrainError> {
    if grad.find_nonfinite().is_some() {
        return Err(TrainError::NonFiniteGrad {
            step,
            param: name.to_string(),
        });
    }
    let buf = state
        .momentum
        .entry(name.to_string())
        .or_insert_with(|| Tensor::zeros(param.shape().to_vec()));
    let mu = T::from_f64(MUON_MOMENTUM);
    for (m, &g) in buf.data_mut().iter_mut().zip(grad.data()) {
        *m = *m * mu + g;
    }
    let ortho = newton_schulz(buf);
    let (rows, cols) = (param.shape()[0], param.shape()[1]);
    let (hi, lo) = (rows.max(cols) as f64, rows.min(cols) as f64);
    let scale = T::from_f64((hi / lo).sqrt() * 0.2 * lr);
    let decay = T::from_f64(1.0 - lr * weight_decay);
    for (p, &o) in param.data_mut().iter_mut().zip(ortho.data()) {
        *p = *p * decay - o * scale;
    }
    Ok(())
}

/// AdamW-style update with decoupled decay.
pub fn adam_update<T: Real>(
    name: &str,
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    state: &mut OptState<T>,
    lr: f64,
    weight_decay: f64,
    step: usize,
) -> Result<(), TrainError> {
    if grad.find_nonfinite().is_some() {
        return Err(TrainError::NonFiniteGrad {
            step,
            param: name.to_string(),
        });
    }
    let t = state.adam_t.max(1);
    let m = state
        .adam_m
        .entry(name.to_string())
        .or_insert_with(|| Tensor::zeros(param.shape().to_vec()));
    let b1 = T::from_f64(ADAM_BETA1);
    let one_m_b1 = T::from_f64(1.0 - ADAM_BETA1);
    for (mv, &g) in m.data_mut().iter_mut().zip(grad.data()) {
        *mv = *mv * b1 + g * one_m_b1;
    }
    let m = m.clone();
    let v = state
        .adam_v
        .entry(name.to_string())
        .or_insert_with(|| Tensor::zeros(param.shape().to_vec()));
    let b2 = T::from_f64(ADAM_BETA2);
    let one_m_b2 = T::from_f64(1.0 - ADAM_BETA2);
    for (vv, &g) in v.data_mut().iter_mut().zip(grad.data()) {
        *vv = *vv * b2 + g * g * one_m_b2;
    }
    let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
    let decay = T::from_f64(1.0 - lr * weight_decay);
    let eps = T::from_f64(ADAM_EPS);
    let step_t = T::from_f64(lr / bc1);
    let inv_bc2 = T::from_f64(1.0 / bc2);
    for ((p, &mv), &vv) in param
        .data_mut()
        .iter_mut()
        .zip(m.data())
        .zip(v.data())
    {
        let vhat = (vv * inv_bc2).sqrt() + eps;
        *p = *p * decay - mv * step_t / vhat;
    }
    Ok(())
}

/// Scale all gradients so the global L2 norm is at most `clip`.
/// Returns the pre-clip norm.
pub fn clip_global_norm<T: Real>(grads: &mut [Tensor<T>], clip: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.iter() {
        for &v in g.data() {
            sq += v.to_f64() * v.to_f64();
        }
    }
    let norm = sq.sqrt();
    if norm > clip && norm > 0.0 {
        let s = T::from_f64(clip / norm);
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}
