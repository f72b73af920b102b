//! Perron sum-ratio estimates, LDS certification, Schur step bounds and the
//! periodic stability report.

use serde::{Deserialize, Serialize};
use tide_autograd::{Tape, Tensor, Var};

use crate::dale::{compose_effective, DaleWeightSet};
use crate::error::{Result, TideError};

/// Normalised power iteration from the uniform vector, returning
/// `(1^T W v_K) / (1^T v_K)`. An all-zero matrix gives 0.
pub fn perron_sum_ratio(w: &Tensor, k_iters: usize) -> f64 {
    let n = w.shape()[0];
    assert_eq!(w.shape(), [n, n], "perron_sum_ratio needs a square matrix");
    let mut v = vec![1.0 / n as f64; n];
    for _ in 0..k_iters {
        let u = w.matvec(&v);
        let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        v = u.iter().map(|x| x / norm).collect();
    }
    let den: f64 = v.iter().sum();
    if den == 0.0 {
        return 0.0;
    }
    w.matvec(&v).iter().sum::<f64>() / den
}

/// Differentiable form of [`perron_sum_ratio`] on a tape.
pub fn perron_sum_ratio_tape(tape: &Tape, w: Var, k_iters: usize) -> Var {
    let n = tape.shape(w)[0];
    let mut v = tape.constant(Tensor::full(&[1, n], 1.0 / n as f64));
    for _ in 0..k_iters {
        let u = tape.matmul_with(v, w, true);
        let norm = tape.sqrt(tape.sum(tape.square(u)));
        if tape.item(norm) == 0.0 {
            return tape.scalar(0.0);
        }
        v = tape.div(u, norm);
    }
    let wv = tape.matmul_with(v, w, true);
    let den = tape.sum(v);
    if tape.item(den) == 0.0 {
        return tape.scalar(0.0);
    }
    tape.div(tape.sum(wv), den)
}

/// Largest eigenvalue of a symmetric matrix by shifted power iteration.
pub fn symmetric_lambda_max(s: &Tensor, max_iter: usize, tol: f64) -> f64 {
    let n = s.shape()[0];
    // Gershgorin shift that makes S + cI positive semidefinite.
    let mut c: f64 = 0.0;
    for i in 0..n {
        let off: f64 = (0..n).filter(|&j| j != i).map(|j| s.at(&[i, j]).abs()).sum();
        c = c.max(off - s.at(&[i, i]));
    }
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.1 * ((i * 7) % 11) as f64 / 11.0).collect();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= nv);
    // Stop on the eigen-residual; the Rayleigh quotient alone can stall
    // long before the vector has converged when the top gap is small.
    let scale = c.max(1.0);
    for _ in 0..max_iter {
        let sv = s.matvec(&v);
        let rq: f64 = sv.iter().zip(&v).map(|(a, b)| a * b).sum();
        let res = sv.iter().zip(&v).map(|(a, b)| (a - rq * b).powi(2)).sum::<f64>().sqrt();
        if res <= tol * scale {
            break;
        }
        let u: Vec<f64> = sv.iter().zip(&v).map(|(a, b)| a + c * b).collect();
        let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return -c;
        }
        v = u.iter().map(|x| x / norm).collect();
    }
    let sv = s.matvec(&v);
    sv.iter().zip(&v).map(|(a, b)| a * b).sum()
}

/// `λ_max(½(W + Wᵀ) − I)` and whether it is negative.
pub fn lds_test(w_eff: &Tensor) -> (bool, f64) {
    let d = w_eff.shape()[0];
    let s = Tensor::from_fn(&[d, d], |k| {
        let (i, j) = (k / d, k % d);
        0.5 * (w_eff.at(&[i, j]) + w_eff.at(&[j, i])) - if i == j { 1.0 } else { 0.0 }
    });
    let lam = symmetric_lambda_max(&s, 20_000, 1e-10);
    (lam < 0.0, lam)
}

/// Largest singular value by power iteration on `WᵀW`.
pub fn sigma_max(w: &Tensor, iters: usize) -> f64 {
    let (r, c) = (w.shape()[0], w.shape()[1]);
    if r == 0 || c == 0 {
        return 0.0;
    }
    let wt = w.t();
    let mut v = vec![1.0 / (c as f64).sqrt(); c];
    for _ in 0..iters {
        let g = wt.matvec(&w.matvec(&v));
        let n = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            return 0.0;
        }
        v = g.iter().map(|x| x / n).collect();
    }
    w.matvec(&v).iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `min_i 2 Re(−μ_i) / |μ_i|²` over eigenvalues `(re, im)` of the
/// continuous-time Jacobian.
pub fn schur_dt_bound(eigenvalues: &[(f64, f64)]) -> Result<f64> {
    let mut bound = f64::INFINITY;
    for &(re, im) in eigenvalues {
        if re >= 0.0 {
            return Err(TideError::Unstable { re, im });
        }
        bound = bound.min(-2.0 * re / (re * re + im * im));
    }
    Ok(bound)
}

/// `½ (x − x*)ᵀ D (x − x*)` for diagonal `D`.
pub fn lyapunov_value(x: &[f64], x_star: &[f64], d_diag: &[f64]) -> f64 {
    assert!(x.len() == x_star.len() && x.len() == d_diag.len());
    0.5 * x.iter().zip(x_star).zip(d_diag).map(|((a, b), d)| d * (a - b) * (a - b)).sum::<f64>()
}

/// Isolated excitatory iterate `(1−α)I + α W_EE` is Schur-stable iff `λ_P < 1`.
pub fn isolated_e_stable(perron_ee: f64) -> bool {
    perron_ee < 1.0
}

/// Isolated inhibitory iterate `(1−α)I − α W_II` is Schur-stable iff `λ_P < 2/α − 1`.
pub fn isolated_i_stable(perron_ii: f64, alpha_i: f64) -> bool {
    perron_ii < 2.0 / alpha_i - 1.0
}

/// One step of the linearised isolated-population iterate
/// `x ← (1−α) x + α · sign · W x`.
pub fn isolated_step(w: &Tensor, alpha: f64, sign: f64, x: &[f64]) -> Vec<f64> {
    let wx = w.matvec(x);
    x.iter().zip(&wx).map(|(a, b)| (1.0 - alpha) * a + alpha * sign * b).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralReport {
    pub step: u64,
    pub perron_ee: f64,
    pub perron_ii: f64,
    pub lds_lambda_max: f64,
    pub is_lds: bool,
    pub sigma_max_ei: f64,
    pub sigma_max_ie: f64,
    pub sigma_max_ee: f64,
    pub isolated_e_stable: bool,
    pub isolated_i_stable: bool,
}

impl SpectralReport {
    pub fn compute(w: &DaleWeightSet, alpha_i: f64, step: u64) -> Result<Self> {
        let w_eff = compose_effective(w)?;
        let (is_lds, lam) = lds_test(&w_eff);
        let perron_ee = perron_sum_ratio(&w.w_ee, 10);
        let perron_ii = perron_sum_ratio(&w.w_ii, 10);
        Ok(Self {
            step,
            perron_ee,
            perron_ii,
            lds_lambda_max: lam,
            is_lds,
            sigma_max_ei: sigma_max(&w.w_ei, 20),
            sigma_max_ie: sigma_max(&w.w_ie, 20),
            sigma_max_ee: sigma_max(&w.w_ee, 20),
            isolated_e_stable: isolated_e_stable(perron_ee),
            isolated_i_stable: isolated_i_stable(perron_ii, alpha_i),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_ones() {
        let eye = Tensor::from_fn(&[4, 4], |i| if i % 5 == 0 { 1.0 } else { 0.0 });
        for k in [0, 1, 10] {
            assert!((perron_sum_ratio(&eye, k) - 1.0).abs() < 1e-15);
        }
        assert!((perron_sum_ratio(&Tensor::full(&[3, 3], 1.0), 10) - 3.0).abs() < 1e-14);
        assert_eq!(perron_sum_ratio(&Tensor::zeros(&[3, 3]), 10), 0.0);
    }

    #[test]
    fn lds_examples() {
        let (ok, lam) = lds_test(&Tensor::zeros(&[3, 3]));
        assert!(ok && (lam + 1.0).abs() < 1e-12);
        let two = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 2.0 } else { 0.0 });
        let (ok, lam) = lds_test(&two);
        assert!(!ok && (lam - 1.0).abs() < 1e-12);
    }

    #[test]
    fn schur_examples() {
        assert!((schur_dt_bound(&[(-1.0, 0.0)]).unwrap() - 2.0).abs() < 1e-15);
        assert!((schur_dt_bound(&[(-1.0, 1.0), (-1.0, -1.0)]).unwrap() - 1.0).abs() < 1e-15);
        assert!(schur_dt_bound(&[(-1.0, 0.0), (0.0, 2.0)]).is_err());
    }

    #[test]
    fn lyapunov_examples() {
        assert_eq!(lyapunov_value(&[1.0, 2.0], &[1.0, 2.0], &[1.0, 1.0]), 0.0);
        assert_eq!(lyapunov_value(&[3.0, 4.0], &[0.0, 0.0], &[1.0, 1.0]), 12.5);
    }

    #[test]
    fn isolated_thresholds() {
        assert!(isolated_e_stable(0.9) && !isolated_e_stable(1.1));
        assert!(isolated_i_stable(8.0, 0.2) && !isolated_i_stable(10.0, 0.2));
    }
}
