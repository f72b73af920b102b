//! Surprise-gated persistent memory with an E-I retention gate.
//!
//! `m` and `v` are plain buffers: the write path never enters the tape,
//! only the read `f_read([m; z])` does.

use rand::Rng;
use tide_autograd::{Tensor, Var};

use crate::params::{Constraint, Fwd, Linear, ParamId, ParamStore};

pub const MIN_KAPPA: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl MemoryState {
    pub fn zeros(d_mem: usize) -> Self {
        Self { m: vec![0.0; d_mem], v: vec![0.0; d_mem] }
    }
}

/// What one memory step did; replaying it pins the write path.
#[derive(Clone, Debug, PartialEq)]
pub struct MemStep {
    pub gates: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// `‖f_rec(m) − z‖²`
pub fn surprise(recalled: &[f64], z: &[f64]) -> f64 {
    recalled.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// `sigmoid(−κ |ρ − ρ*|)`
pub fn retention_gate(rho: f64, kappa: f64, rho_star: f64) -> f64 {
    1.0 / (1.0 + (kappa * (rho - rho_star).abs()).exp())
}

/// `1[s > θ] (1 − ι)`
pub fn write_gate(s: f64, theta: f64, iota: f64) -> f64 {
    if s > theta {
        1.0 - iota
    } else {
        0.0
    }
}

/// `v ← μv + mean_b g_b f_proj(z_b)`, `m ← m + v`.
pub fn memory_write(state: &mut MemoryState, gates: &[f64], projected: &[Vec<f64>], mu: f64) {
    let nb = gates.len().max(1) as f64;
    for (k, v) in state.v.iter_mut().enumerate() {
        let w: f64 = gates.iter().zip(projected).map(|(g, p)| g * p[k]).sum::<f64>() / nb;
        *v = mu * *v + w;
    }
    for (m, v) in state.m.iter_mut().zip(&state.v) {
        *m += v;
    }
}

fn affine(w: &Tensor, b: Option<&Tensor>, x: &[f64]) -> Vec<f64> {
    let mut y = w.t().matvec(x);
    if let Some(b) = b {
        y.iter_mut().zip(b.data()).for_each(|(a, c)| *a += c);
    }
    y
}

#[derive(Clone, Debug)]
pub struct Memory {
    pub d_mem: usize,
    pub d_sync: usize,
    pub kappa: ParamId,
    pub f_rec: Linear,
    pub f_proj: Linear,
    pub f_read: Linear,
    pub theta: f64,
    pub mu: f64,
    pub rho_star: f64,
}

impl Memory {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_mem: usize,
        d_sync: usize,
        theta: f64,
        mu: f64,
        rho_star: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let kappa = store.add(&format!("{name}.kappa"), Tensor::new(&[1], vec![1.0]), Constraint::Range(MIN_KAPPA, f64::INFINITY));
        let f_rec = Linear::new(store, &format!("{name}.f_rec"), d_mem, d_sync, true, rng);
        let f_proj = Linear::new(store, &format!("{name}.f_proj"), d_sync, d_mem, true, rng);
        let f_read = Linear::new(store, &format!("{name}.f_read"), d_mem + d_sync, d_mem, true, rng);
        Self { d_mem, d_sync, kappa, f_rec, f_proj, f_read, theta, mu, rho_star }
    }

    fn lin_apply(&self, f: &Fwd, l: &Linear, x: &[f64]) -> Vec<f64> {
        let b = l.b.map(|b| f.val(b));
        affine(&f.val(l.w), b.as_deref(), x)
    }

    /// One internal step: gate and write from the current values, then read
    /// `f_read([m; z])` on the tape. `rho` is the per-sample E-I ratio.
    pub fn step(&self, f: &Fwd, state: &mut MemoryState, z: Var, rho: &[f64], fixed: Option<&MemStep>) -> (Var, MemStep) {
        let zt = f.t.value(z);
        let batch = zt.shape()[0];
        let rec = match fixed {
            Some(s) => {
                state.m.clone_from(&s.m);
                state.v.clone_from(&s.v);
                s.clone()
            }
            None => {
                let recalled = self.lin_apply(f, &self.f_rec, &state.m);
                let kappa = f.val(self.kappa).item();
                let mut gates = Vec::with_capacity(batch);
                let mut proj = Vec::with_capacity(batch);
                for b in 0..batch {
                    let s = surprise(&recalled, zt.row(b));
                    let g = write_gate(s, self.theta, retention_gate(rho[b], kappa, self.rho_star));
                    gates.push(g);
                    proj.push(if g != 0.0 { self.lin_apply(f, &self.f_proj, zt.row(b)) } else { vec![0.0; self.d_mem] });
                }
                memory_write(state, &gates, &proj, self.mu);
                MemStep { gates, m: state.m.clone(), v: state.v.clone() }
            }
        };
        let m_rows = Tensor::from_fn(&[batch, self.d_mem], |k| state.m[k % self.d_mem]);
        let x = f.t.concat(&[f.t.constant(m_rows), z]);
        (self.f_read.forward(f, x), rec)
    }
}
