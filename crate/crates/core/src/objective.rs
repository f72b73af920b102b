//! Loss terms, the curriculum ramp and the weighted total.

use std::f64::consts::PI;
use std::rc::Rc;

use serde::{Deserialize, Serialize};
use tide_autograd::{Tape, Tensor, Var};

pub const GAME_CLIP: f64 = 100.0;
pub const EI_CLIP: f64 = 50.0;
pub const MIN_REGIME_GAP: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_ei: f64,
    pub lambda_game: f64,
    pub lambda_sync: f64,
    pub lambda_spec: f64,
    pub tau_ee: f64,
    pub tau_ii: f64,
    pub rho_star: f64,
    pub t_s: u64,
    pub t_w: u64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_ei: 1e-2,
            lambda_game: 1e-3,
            lambda_sync: 1e-4,
            lambda_spec: 1e-1,
            tau_ee: 15.0,
            tau_ii: 7.0,
            rho_star: 4.0,
            t_s: 1000,
            t_w: 5000,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GameVariant {
    /// Mean-field quadratic energies.
    #[default]
    Energy,
    /// Squared distance to the ReLU fixed point.
    Residual,
}

/// Per-term values of one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub task: f64,
    pub ei: f64,
    pub game: f64,
    pub sync: f64,
    pub spec: f64,
    pub curriculum: f64,
}

/// Ramp weight; continuous in `step` so it can be integrated.
pub fn curriculum(step: f64, t_s: f64, t_w: f64) -> f64 {
    assert!(t_w > 0.0, "t_w must be positive");
    if step < t_s {
        0.0
    } else if step >= t_s + t_w {
        1.0
    } else {
        0.5 * (1.0 - (PI * (step - t_s) / t_w).cos())
    }
}

/// First index of the minimum and of the maximum; ties go to the earliest.
pub fn select_steps(ce: &[f64], cert: &[f64]) -> (usize, usize) {
    let mut t_min = 0;
    let mut t_cert = 0;
    for t in 1..ce.len() {
        if ce[t] < ce[t_min] {
            t_min = t;
        }
        if cert[t] > cert[t_cert] {
            t_cert = t;
        }
    }
    (t_min, t_cert)
}

/// `½ CE(t_min) + ½ CE(t_cert)` for one sample.
pub fn task_loss(ce: &[f64], cert: &[f64]) -> f64 {
    let (a, b) = select_steps(ce, cert);
    0.5 * ce[a] + 0.5 * ce[b]
}

pub fn ei_loss(rho: f64, rho_star: f64) -> f64 {
    (rho - rho_star).clamp(-EI_CLIP, EI_CLIP).powi(2)
}

pub fn sync_loss(z: &[f64]) -> f64 {
    z.iter().map(|x| x * x).sum::<f64>() / z.len() as f64
}

pub fn spec_loss(lp_ee: f64, lp_ii: f64, tau_ee: f64, tau_ii: f64) -> f64 {
    (lp_ee - tau_ee).max(0.0).powi(2) + (lp_ii - tau_ii).max(0.0).powi(2)
}

pub fn total_loss(terms: &LossTerms, w: &LossWeights, step: u64) -> f64 {
    let c = curriculum(step as f64, w.t_s as f64, w.t_w as f64);
    terms.task + c * (w.lambda_ei * terms.ei + w.lambda_game * terms.game + w.lambda_sync * terms.sync) + w.lambda_spec * terms.spec
}

/// Population-effective scalars `(w̄_EE, w̄_EI, w̄_IE, w̄_II)`: diagonal
/// means for the recurrent blocks, full means for the cross blocks.
pub fn effective_scalars(w_ee: &Tensor, w_ei: &Tensor, w_ie: &Tensor, w_ii: &Tensor) -> (f64, f64, f64, f64) {
    let diag = |w: &Tensor| {
        let n = w.shape()[0];
        (0..n).map(|i| w.at(&[i, i])).sum::<f64>() / n as f64
    };
    (diag(w_ee), w_ei.mean(), w_ie.mean(), diag(w_ii))
}

/// Energy game loss for one sample.
#[allow(clippy::too_many_arguments)]
pub fn game_energy(
    r_e: &[f64],
    r_i: &[f64],
    u_e: &[f64],
    u_i: &[f64],
    bars: (f64, f64, f64, f64),
    d_e: f64,
    d_i: f64,
    d_model: usize,
) -> f64 {
    let (w_ee, w_ei, w_ie, w_ii) = bars;
    let rbar_e = r_e.iter().sum::<f64>() / r_e.len() as f64;
    let rbar_i = r_i.iter().sum::<f64>() / r_i.len() as f64;
    let den_e = 2.0 * (d_e - w_ee).max(MIN_REGIME_GAP);
    let den_i = 2.0 * (d_i + w_ii);
    let ee: f64 = r_e.iter().zip(u_e).map(|(r, u)| ((w_ee - d_e) * r - w_ei * rbar_i + u).powi(2) / den_e).sum::<f64>()
        / r_e.len() as f64;
    let ei: f64 = r_i.iter().zip(u_i).map(|(r, u)| (w_ie * rbar_e - (w_ii + d_i) * r + u).powi(2) / den_i).sum::<f64>()
        / r_i.len() as f64;
    (ee + ei).min(GAME_CLIP) / d_model as f64
}

/// Residual game loss over a batch of rows.
pub fn game_residual(r_e: &[Vec<f64>], r_i: &[Vec<f64>], h_e: &[Vec<f64>], h_i: &[Vec<f64>], d_model: usize) -> f64 {
    let sq = |r: &[f64], h: &[f64]| r.iter().zip(h).map(|(a, b)| (a - b.max(0.0)).powi(2)).sum::<f64>();
    let n = r_e.len() as f64;
    let mean = (0..r_e.len()).map(|b| sq(&r_e[b], &h_e[b]) + sq(&r_i[b], &h_i[b])).sum::<f64>() / n;
    (mean / d_model as f64).min(GAME_CLIP)
}

// ---- tape forms -------------------------------------------------------

/// Task loss on per-step logits `[batch, C]`. Returns the batch mean, the
/// per-sample `(t_min, t_cert)` selections and the per-step certainties.
/// With `fixed` the selections are reused instead of recomputed.
pub fn task_loss_tape(
    t: &Tape,
    logits: &[Var],
    labels: &[usize],
    fixed: Option<&[(usize, usize)]>,
) -> (Var, Vec<(usize, usize)>) {
    let b = labels.len();
    let steps = logits.len();
    let ce: Vec<Var> = logits.iter().map(|&o| t.cross_entropy_rows(o, labels)).collect();
    let sel: Vec<(usize, usize)> = match fixed {
        Some(s) => s.to_vec(),
        None => {
            let ce_v: Vec<Rc<Tensor>> = ce.iter().map(|&c| t.value(c)).collect();
            let lv: Vec<Rc<Tensor>> = logits.iter().map(|&o| t.value(o)).collect();
            (0..b)
                .map(|s| {
                    let ce_s: Vec<f64> = ce_v.iter().map(|c| c.data()[s]).collect();
                    let cert: Vec<f64> = lv.iter().map(|o| crate::readout::certainty(o.row(s))).collect();
                    select_steps(&ce_s, &cert)
                })
                .collect()
        }
    };
    let cols: Vec<Var> = ce.iter().map(|&c| t.reshape(c, &[b, 1])).collect();
    let table = if steps == 1 { cols[0] } else { t.concat(&cols) };
    let a = t.pick(table, Rc::new(sel.iter().map(|s| s.0).collect()));
    let c = t.pick(table, Rc::new(sel.iter().map(|s| s.1).collect()));
    (t.scale(t.mean(t.add(a, c)), 0.5), sel)
}

/// Batch mean of `clip(ρ − ρ*, ±50)²` on per-sample ratios `[batch]`.
pub fn ei_loss_tape(t: &Tape, rho: Var, rho_star: f64) -> Var {
    t.mean(t.square(t.clamp(t.add_scalar(rho, -rho_star), -EI_CLIP, EI_CLIP)))
}

fn diag_mean(t: &Tape, w: Var) -> Var {
    let n = t.shape(w)[0];
    let flat = t.reshape(w, &[n * n]);
    t.mean(t.gather_last(flat, Rc::new((0..n).map(|i| i * (n + 1)).collect())))
}

/// Energy game loss, batch mean of per-sample clipped values.
/// `r_*`, `u_*` are `[batch, n_*]`; weights are the recurrent blocks.
#[allow(clippy::too_many_arguments)]
pub fn game_energy_tape(
    t: &Tape,
    r_e: Var,
    r_i: Var,
    u_e: Var,
    u_i: Var,
    w: [Var; 4],
    d_e: f64,
    d_i: f64,
    d_model: usize,
) -> Var {
    let [w_ee, w_ei, w_ie, w_ii] = w;
    let b = t.shape(r_e)[0];
    let wee = diag_mean(t, w_ee);
    let wii = diag_mean(t, w_ii);
    let wei = t.mean(w_ei);
    let wie = t.mean(w_ie);
    let rbar_e = t.reshape(t.mean_last(r_e), &[b, 1]);
    let rbar_i = t.reshape(t.mean_last(r_i), &[b, 1]);
    let num_e = t.add(t.sub(t.mul(t.add_scalar(wee, -d_e), r_e), t.mul(wei, rbar_i)), u_e);
    let den_e = t.scale(t.clamp(t.add_scalar(t.neg(wee), d_e), MIN_REGIME_GAP, f64::INFINITY), 2.0);
    let num_i = t.add(t.sub(t.mul(wie, rbar_e), t.mul(t.add_scalar(wii, d_i), r_i)), u_i);
    let den_i = t.scale(t.add_scalar(wii, d_i), 2.0);
    let e_e = t.mean_last(t.div(t.square(num_e), den_e));
    let e_i = t.mean_last(t.div(t.square(num_i), den_i));
    let bracket = t.clamp(t.add(e_e, e_i), f64::NEG_INFINITY, GAME_CLIP);
    t.scale(t.mean(bracket), 1.0 / d_model as f64)
}

/// Residual game loss; `h_*` are the ReLU inputs matching `r_*`.
pub fn game_residual_tape(t: &Tape, r_e: Var, r_i: Var, h_e: Var, h_i: Var, d_model: usize) -> Var {
    let se = t.sum_last(t.square(t.sub(r_e, t.relu(h_e))));
    let si = t.sum_last(t.square(t.sub(r_i, t.relu(h_i))));
    let m = t.scale(t.mean(t.add(se, si)), 1.0 / d_model as f64);
    t.clamp(m, f64::NEG_INFINITY, GAME_CLIP)
}

/// Batch mean of `‖z‖² / d_sync`.
pub fn sync_loss_tape(t: &Tape, z: Var) -> Var {
    t.mean(t.square(z))
}

pub fn spec_loss_tape(t: &Tape, lp_ee: Var, lp_ii: Var, tau_ee: f64, tau_ii: f64) -> Var {
    let a = t.square(t.relu(t.add_scalar(lp_ee, -tau_ee)));
    let b = t.square(t.relu(t.add_scalar(lp_ii, -tau_ii)));
    t.add(a, b)
}
