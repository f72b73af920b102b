//! Wilson-Cowan rate dynamics: pre-activations, the forward-Euler update,
//! linearised simulation, fixed points and the E-I activity ratio.

use serde::{Deserialize, Serialize};
use tide_autograd::{Tape, Tensor, Var};

use crate::dale::{compose_effective, DaleWeightSet};
use crate::error::{dim_err, Result};

pub const RMS_EPS: f64 = 1e-6;
pub const RHO_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EulerConfig {
    pub tau_e: f64,
    pub tau_i: f64,
    pub dt: f64,
}

impl Default for EulerConfig {
    fn default() -> Self {
        Self { tau_e: 20.0, tau_i: 5.0, dt: 1.0 }
    }
}

impl EulerConfig {
    pub fn alpha_e(&self) -> f64 {
        self.dt / self.tau_e
    }

    pub fn alpha_i(&self) -> f64 {
        self.dt / self.tau_i
    }
}

/// Rates of one sample. `r_e_pre` is the excitatory state before lateral
/// inhibition.
#[derive(Clone, Debug, PartialEq)]
pub struct EiState {
    pub r_e: Vec<f64>,
    pub r_i: Vec<f64>,
    pub r_e_pre: Vec<f64>,
}

impl EiState {
    pub fn zeros(n_e: usize, n_i: usize) -> Self {
        Self { r_e: vec![0.0; n_e], r_i: vec![0.0; n_i], r_e_pre: vec![0.0; n_e] }
    }
}

/// `W_EE r_E − W_EI r_I + W_E^in a` and `W_IE r_E − W_II r_I + W_I^in a`
/// before normalisation.
pub fn raw_preactivations(state: &EiState, drive: &[f64], w: &DaleWeightSet) -> Result<(Vec<f64>, Vec<f64>)> {
    w.validate()?;
    if state.r_e.len() != w.n_e() || state.r_i.len() != w.n_i() || drive.len() != w.w_e_in.shape()[1] {
        return dim_err(format!(
            "state ({}, {}) / drive {} do not match weights ({}, {}, {})",
            state.r_e.len(),
            state.r_i.len(),
            drive.len(),
            w.n_e(),
            w.n_i(),
            w.w_e_in.shape()[1]
        ));
    }
    let comb = |a: Vec<f64>, b: Vec<f64>, c: Vec<f64>| -> Vec<f64> {
        a.iter().zip(&b).zip(&c).map(|((x, y), z)| x - y + z).collect()
    };
    let he = comb(w.w_ee.matvec(&state.r_e), w.w_ei.matvec(&state.r_i), w.w_e_in.matvec(drive));
    let hi = comb(w.w_ie.matvec(&state.r_e), w.w_ii.matvec(&state.r_i), w.w_i_in.matvec(drive));
    Ok((he, hi))
}

pub fn rms_normalize(h: &[f64], gain: &[f64], eps: f64) -> Vec<f64> {
    let ms = h.iter().map(|x| x * x).sum::<f64>() / h.len().max(1) as f64;
    let r = 1.0 / (ms + eps).sqrt();
    h.iter().zip(gain).map(|(x, g)| x * r * g).collect()
}

/// Normalised pre-activations with per-population gains.
pub fn compute_preactivations(
    state: &EiState,
    drive: &[f64],
    w: &DaleWeightSet,
    gain_e: &[f64],
    gain_i: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (he, hi) = raw_preactivations(state, drive, w)?;
    Ok((rms_normalize(&he, gain_e, RMS_EPS), rms_normalize(&hi, gain_i, RMS_EPS)))
}

fn euler_vec(r: &[f64], h: &[f64], corr: &[f64], alpha: f64) -> Vec<f64> {
    r.iter().zip(h).zip(corr).map(|((r, h), c)| (1.0 - alpha) * r + alpha * (h + c).max(0.0)).collect()
}

/// `r ← (1−α) r + α ReLU(h + corr)` for both populations. The returned
/// state carries `r_e_pre = r_e` (lateral inhibition has not run yet).
pub fn euler_step(
    state: &EiState,
    h_e: &[f64],
    h_i: &[f64],
    corr_e: &[f64],
    corr_i: &[f64],
    cfg: &EulerConfig,
) -> EiState {
    let r_e = euler_vec(&state.r_e, h_e, corr_e, cfg.alpha_e());
    let r_i = euler_vec(&state.r_i, h_i, corr_i, cfg.alpha_i());
    EiState { r_e_pre: r_e.clone(), r_e, r_i }
}

/// Tape form of the pre-activation assembly for batched rows.
/// Returns `(h_e, h_i, u_e, u_i)` where `u` are the drive terms.
#[allow(clippy::too_many_arguments)]
pub fn preactivations_tape(
    t: &Tape,
    r_e: Var,
    r_i: Var,
    drive: Var,
    w: [Var; 6],
    gain_e: Var,
    gain_i: Var,
) -> (Var, Var, Var, Var) {
    let [w_ee, w_ei, w_ie, w_ii, w_e_in, w_i_in] = w;
    let u_e = t.matmul_with(drive, w_e_in, true);
    let u_i = t.matmul_with(drive, w_i_in, true);
    let he = t.add(t.sub(t.matmul_with(r_e, w_ee, true), t.matmul_with(r_i, w_ei, true)), u_e);
    let hi = t.add(t.sub(t.matmul_with(r_e, w_ie, true), t.matmul_with(r_i, w_ii, true)), u_i);
    (t.rms_norm(he, Some(gain_e), RMS_EPS), t.rms_norm(hi, Some(gain_i), RMS_EPS), u_e, u_i)
}

/// Tape form of the Euler update for one population.
pub fn euler_tape(t: &Tape, r: Var, act_in: Var, alpha: f64) -> Var {
    t.add(t.scale(r, 1.0 - alpha), t.scale(t.relu(act_in), alpha))
}

/// Explicit Euler of `ẋ = (W_eff − I) x + b`; the trajectory includes `x0`.
pub fn simulate_linear(w_eff: &Tensor, b: &[f64], x0: &[f64], dt: f64, steps: usize) -> Vec<Vec<f64>> {
    let mut traj = Vec::with_capacity(steps + 1);
    let mut x = x0.to_vec();
    traj.push(x.clone());
    for _ in 0..steps {
        let wx = w_eff.matvec(&x);
        x = x.iter().zip(&wx).zip(b).map(|((x, w), b)| x + dt * (w - x + b)).collect();
        traj.push(x.clone());
    }
    traj
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Softplus,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Softplus => {
                if x > 0.0 {
                    x + (-x).exp().ln_1p()
                } else {
                    x.exp().ln_1p()
                }
            }
        }
    }
}

/// Explicit Euler of `τ ẋ = −x + φ(W_eff x + b)` with per-neuron time
/// constants; returns the state after `steps` steps.
pub fn simulate_rate(w_eff: &Tensor, b: &[f64], x0: &[f64], tau: &[f64], dt: f64, steps: usize, act: Activation) -> Vec<f64> {
    let mut x = x0.to_vec();
    for _ in 0..steps {
        let wx = w_eff.matvec(&x);
        for i in 0..x.len() {
            let a = dt / tau[i];
            x[i] = (1.0 - a) * x[i] + a * act.apply(wx[i] + b[i]);
        }
    }
    x
}

/// Picard iteration `x ← ReLU(W_eff x + b)` until the sup-norm change drops
/// below `tol`.
pub fn fixed_point_effective(w_eff: &Tensor, b: &[f64], tol: f64, max_iter: usize) -> (Vec<f64>, bool) {
    let mut x = vec![0.0; b.len()];
    for _ in 0..max_iter {
        let wx = w_eff.matvec(&x);
        let next: Vec<f64> = wx.iter().zip(b).map(|(w, b)| (w + b).max(0.0)).collect();
        let diff = next.iter().zip(&x).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        x = next;
        if diff < tol {
            return (x, true);
        }
    }
    (x, false)
}

/// Fixed point of the rate map for a constant drive `a`.
pub fn find_fixed_point(w: &DaleWeightSet, drive: &[f64], tol: f64, max_iter: usize) -> Result<(Vec<f64>, bool)> {
    let w_eff = compose_effective(w)?;
    if drive.len() != w.w_e_in.shape()[1] {
        return dim_err(format!("drive length {} vs {}", drive.len(), w.w_e_in.shape()[1]));
    }
    let mut b = w.w_e_in.matvec(drive);
    b.extend(w.w_i_in.matvec(drive));
    Ok(fixed_point_effective(&w_eff, &b, tol, max_iter))
}

/// `(‖r_E^pre‖₁ / n_E) / (‖r_I‖₁ / n_I + ε)`.
pub fn rho_ei(state: &EiState) -> f64 {
    let e = state.r_e_pre.iter().map(|x| x.abs()).sum::<f64>() / state.r_e_pre.len() as f64;
    let i = state.r_i.iter().map(|x| x.abs()).sum::<f64>() / state.r_i.len() as f64;
    e / (i + RHO_EPS)
}

/// Per-row activity ratio on a tape. Rates are non-negative, so the
/// ℓ1 norm is the plain sum.
pub fn rho_ei_tape(t: &Tape, r_e_pre: Var, r_i: Var) -> Var {
    let e = t.mean_last(r_e_pre);
    let i = t.add_scalar(t.mean_last(r_i), RHO_EPS);
    t.div(e, i)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_alphas() {
        let c = EulerConfig::default();
        assert!((c.alpha_e() - 0.05).abs() < 1e-15 && (c.alpha_i() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn rho_examples() {
        let s = EiState { r_e: vec![1.0; 4], r_e_pre: vec![1.0; 4], r_i: vec![1.0] };
        assert!((rho_ei(&s) - 1.0).abs() < 1e-7);
        let s = EiState { r_e: vec![1.0; 3], r_e_pre: vec![1.0; 3], r_i: vec![0.0; 2] };
        assert!(rho_ei(&s).is_finite() && (rho_ei(&s) - 1e8).abs() < 1.0);
    }

    #[test]
    fn scalar_linear_converges_to_two() {
        let w = Tensor::new(&[1, 1], vec![0.5]);
        let x = simulate_linear(&w, &[1.0], &[0.0], 0.1, 2000);
        assert!((x.last().unwrap()[0] - 2.0).abs() < 1e-10);
    }

    #[test]
    fn zero_weights_fixed_point_is_relu_of_drive() {
        let (x, ok) = fixed_point_effective(&Tensor::zeros(&[3, 3]), &[1.0, -2.0, 0.5], 1e-8, 10);
        assert!(ok);
        assert_eq!(x, vec![1.0, 0.0, 0.5]);
    }
}
