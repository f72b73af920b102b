//! Stability diagnostics for a weight set, without a general eigensolver.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tide_autograd::Tensor;

use crate::dale::{compose_effective, split_populations, DaleWeightSet};
use crate::dynamics::{compute_preactivations, euler_step, rho_ei, simulate_linear, EiState, EulerConfig};
use crate::error::Result;
use crate::spectral::{
    isolated_e_stable, isolated_i_stable, lyapunov_value, perron_sum_ratio, schur_dt_bound, sigma_max,
    symmetric_lambda_max,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseReport {
    pub d_model: usize,
    pub n_e: usize,
    pub n_i: usize,
    pub perron_ee: f64,
    pub perron_ii: f64,
    pub lds_lambda_max: f64,
    pub lds_lambda_min: f64,
    pub is_lds: bool,
    /// `2/|λ_min|` of the symmetrised linearisation when it is stable.
    pub schur_dt_bound: Option<f64>,
    pub isolated_e_stable: bool,
    pub isolated_i_stable: bool,
    pub sigma_max_ei: f64,
    pub sigma_max_ie: f64,
    pub rho_ei_probe: f64,
}

/// `½(W + Wᵀ) − I`
fn symmetric_part(w_eff: &Tensor) -> Tensor {
    let d = w_eff.shape()[0];
    Tensor::from_fn(&[d, d], |k| {
        let (i, j) = (k / d, k % d);
        0.5 * (w_eff.at(&[i, j]) + w_eff.at(&[j, i])) - if i == j { 1.0 } else { 0.0 }
    })
}

/// Random weight set with the default population split.
pub fn random_weights(dim: usize, seed: u64) -> DaleWeightSet {
    let (n_e, n_i) = split_populations(dim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DaleWeightSet::random(n_e, n_i, dim, &mut rng)
}

/// Mean E-I ratio after `steps` Euler steps on `probes` random drives.
pub fn probe_rho(w: &DaleWeightSet, cfg: &EulerConfig, probes: usize, steps: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d_in = w.w_e_in.shape()[1];
    let (ne, ni) = (w.n_e(), w.n_i());
    let mut acc = 0.0;
    for _ in 0..probes {
        let drive: Vec<f64> = (0..d_in).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let mut s = EiState::zeros(ne, ni);
        for _ in 0..steps {
            let (he, hi) = compute_preactivations(&s, &drive, w, &vec![1.0; ne], &vec![1.0; ni])?;
            s = euler_step(&s, &he, &hi, &vec![0.0; ne], &vec![0.0; ni], cfg);
        }
        acc += rho_ei(&s);
    }
    Ok(acc / probes.max(1) as f64)
}

pub fn diagnose(w: &DaleWeightSet, cfg: &EulerConfig, seed: u64) -> Result<DiagnoseReport> {
    let w_eff = compose_effective(w)?;
    let s = symmetric_part(&w_eff);
    let lam_max = symmetric_lambda_max(&s, 2000, 1e-12);
    let lam_min = -symmetric_lambda_max(&s.map(|x| -x), 2000, 1e-12);
    let perron_ee = perron_sum_ratio(&w.w_ee, 10);
    let perron_ii = perron_sum_ratio(&w.w_ii, 10);
    Ok(DiagnoseReport {
        d_model: w.n_e() + w.n_i(),
        n_e: w.n_e(),
        n_i: w.n_i(),
        perron_ee,
        perron_ii,
        lds_lambda_max: lam_max,
        lds_lambda_min: lam_min,
        is_lds: lam_max < 0.0,
        schur_dt_bound: schur_dt_bound(&[(lam_max, 0.0), (lam_min, 0.0)]).ok(),
        isolated_e_stable: isolated_e_stable(perron_ee),
        isolated_i_stable: isolated_i_stable(perron_ii, cfg.alpha_i()),
        sigma_max_ei: sigma_max(&w.w_ei, 50),
        sigma_max_ie: sigma_max(&w.w_ie, 50),
        rho_ei_probe: probe_rho(w, cfg, 8, 50, seed)?,
    })
}

/// CSV of a linearised trajectory `ẋ = (W_eff − I)x + b` from zero with a
/// constant unit drive; columns are step, ‖x‖, a Lyapunov value against
/// the final state and the first few coordinates.
pub fn trajectory_csv(w: &DaleWeightSet, dt: f64, steps: usize, header: &str) -> Result<String> {
    let w_eff = compose_effective(w)?;
    let d = w_eff.shape()[0];
    let b = vec![0.1; d];
    let traj = simulate_linear(&w_eff, &b, &vec![0.0; d], dt, steps);
    let last = traj.last().cloned().unwrap_or_default();
    let show = d.min(4);
    let mut out = format!("# {header}\nstep,norm,lyapunov");
    for i in 0..show {
        out.push_str(&format!(",x{i}"));
    }
    out.push('\n');
    let ones = vec![1.0; d];
    for (k, x) in traj.iter().enumerate() {
        let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        out.push_str(&format!("{k},{n},{}", lyapunov_value(x, &last, &ones)));
        for v in &x[..show] {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    Ok(out)
}
