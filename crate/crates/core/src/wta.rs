//! Winner-take-all sparsification through an auxiliary inhibitory pool.

use rand::Rng;
use tide_autograd::{Tape, Tensor, Var};

use crate::params::{Constraint, Fwd, ParamId, ParamStore};

pub const MIN_GAMMA: f64 = 0.01;

#[derive(Clone, Debug)]
pub struct Wta {
    /// `[n_lat, n_E]`
    pub w_ei_lat: ParamId,
    /// `[n_E, n_lat]`
    pub w_ie_lat: ParamId,
    pub gamma: ParamId,
    pub k_max: usize,
    pub tol: f64,
}

impl Wta {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        n_e: usize,
        n_lat: usize,
        gamma: f64,
        k_max: usize,
        tol: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let hi = 1.0 / (n_e as f64).sqrt();
        let w_ei_lat = store.add(
            &format!("{name}.w_ei_lat"),
            Tensor::from_fn(&[n_lat, n_e], |_| rng.random::<f64>() * hi),
            Constraint::NonNeg,
        );
        let w_ie_lat = store.add(
            &format!("{name}.w_ie_lat"),
            Tensor::from_fn(&[n_e, n_lat], |_| rng.random::<f64>() * hi),
            Constraint::NonNeg,
        );
        let gamma = store.add(
            &format!("{name}.gamma"),
            Tensor::new(&[1], vec![gamma.max(MIN_GAMMA)]),
            Constraint::Range(MIN_GAMMA, f64::INFINITY),
        );
        Self { w_ei_lat, w_ie_lat, gamma, k_max, tol }
    }

    /// Unrolled loop on `[batch, n_E]`. Each row stops on its own once the
    /// sup-norm change falls below `tol`. With `fixed` the per-row iteration
    /// counts are taken from a previous pass instead of being decided here.
    pub fn forward(&self, f: &Fwd, r0: Var, fixed: Option<&[usize]>) -> (Var, Vec<usize>) {
        lateral_loop(f.t, r0, f.w(self.w_ei_lat), f.w(self.w_ie_lat), f.w(self.gamma), self.k_max, self.tol, fixed)
    }
}

#[allow(clippy::too_many_arguments)]
fn lateral_loop(
    t: &Tape,
    r0: Var,
    w_ei_lat: Var,
    w_ie_lat: Var,
    gamma: Var,
    k_max: usize,
    tol: f64,
    fixed: Option<&[usize]>,
) -> (Var, Vec<usize>) {
    let shape = t.shape(r0);
    let (b, n) = (shape[0], shape[1]);
    let mut counts = vec![0usize; b];
    let mut r = r0;
    for k in 1..=k_max {
        let active: Vec<bool> = match fixed {
            Some(c) => c.iter().map(|&c| k <= c).collect(),
            None => counts.iter().map(|&c| c == 0).collect(),
        };
        if !active.iter().any(|&a| a) {
            break;
        }
        let x_i = t.relu(t.matmul_with(r, w_ei_lat, true));
        let inhib = t.mul(gamma, t.matmul_with(x_i, w_ie_lat, true));
        let r_new = t.relu(t.sub(r0, inhib));
        let (old, new) = (t.value(r), t.value(r_new));
        for row in 0..b {
            if !active[row] {
                continue;
            }
            if fixed.is_some() {
                counts[row] = k;
                continue;
            }
            let delta = old.row(row).iter().zip(new.row(row)).fold(0.0f64, |m, (a, c)| m.max((a - c).abs()));
            if delta < tol || k == k_max {
                counts[row] = k;
            }
        }
        r = if active.iter().all(|&a| a) {
            r_new
        } else {
            let m = Tensor::from_fn(&[b, 1], |i| if active[i] { 1.0 } else { 0.0 });
            let keep = t.constant(m.map(|x| 1.0 - x));
            let m = t.constant(m);
            t.add(t.mul(r_new, m), t.mul(r, keep))
        };
    }
    debug_assert_eq!(t.shape(r), [b, n]);
    (r, counts)
}

/// Plain evaluation on a `[batch, n_E]` tensor.
pub fn lateral_inhibition(r_e: &Tensor, w_ei_lat: &Tensor, w_ie_lat: &Tensor, gamma: f64, k_max: usize, tol: f64) -> Tensor {
    let t = Tape::new();
    let r0 = t.constant(r_e.clone());
    let (out, _) = lateral_loop(
        &t,
        r0,
        t.constant(w_ei_lat.clone()),
        t.constant(w_ie_lat.clone()),
        t.constant(Tensor::new(&[1], vec![gamma])),
        k_max,
        tol,
        None,
    );
    (*t.value(out)).clone()
}
