//! Matrix kernels shared by forward and backward passes.
//!
//! All loops are row-contiguous so the autovectorizer can do its job; there
//! is no blocking or threading. Reduction order is fixed, which the
//! determinism contract depends on.

use super::Real;

/// c[m x n] += a[m x k] * b[k x n]
pub fn mm_acc<T: Real>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (l, &a_il) in a_row.iter().enumerate() {
            let b_row = &b[l * n..(l + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_il * bv;
            }
        }
    }
}

/// c[m x n] += a[m x k] * b[n x k]^T  (dot products of rows)
pub fn mm_nt_acc<T: Real>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (j, cv) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::ZERO;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            *cv += acc;
        }
    }
}

/// c[k x n] += a[m x k]^T * b[m x n]
pub fn mm_tn_acc<T: Real>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (l, &a_il) in a_row.iter().enumerate() {
            let c_row = &mut c[l * n..(l + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_il * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    c[i * n + j] += a[i * k + l] * b[l * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn kernels_agree_with_naive() {
        let mut rng = crate::rng::Rng::seed_from(5);
        for _ in 0..10 {
            let (m, k, n) = (
                1 + rng.below(6),
                1 + rng.below(6),
                1 + rng.below(6),
            );
            let a: Vec<f64> = (0..m * k).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let b: Vec<f64> = (0..k * n).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let want = naive(&a, &b, m, k, n);

            let mut c = vec![0.0; m * n];
            mm_acc(&mut c, &a, &b, m, k, n);
            assert_eq!(c, want);

            // a * b^T via mm_nt on b stored transposed
            let mut bt = vec![0.0; k * n];
            for l in 0..k {
                for j in 0..n {
                    bt[j * k + l] = b[l * n + j];
                }
            }
            let mut c2 = vec![0.0; m * n];
            mm_nt_acc(&mut c2, &a, &bt, m, k, n);
            for (x, y) in c2.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }

            // mm_tn against a naive transpose-accumulate
            let mut c3 = vec![0.0; k * n];
            mm_tn_acc(&mut c3, &a, &naive(&a, &b, m, k, n), m, k, n);
            let mut want3 = vec![0.0; k * n];
            for i in 0..m {
                for l in 0..k {
                    for j in 0..n {
                        want3[l * n + j] += a[i * k + l] * want[i * n + j];
                    }
                }
            }
            for (x, y) in c3.iter().zip(&want3) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
