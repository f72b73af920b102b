//! Pairwise-product synchronisation streams and the assembled latent.

use std::rc::Rc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tide_autograd::{Tensor, Var};

use crate::error::{dim_err, Result, TideError};
use crate::params::{Constraint, Fwd, LayerNorm, Linear, ParamId, ParamStore};

pub const SYNC_EPS: f64 = 1e-8;
pub const MAX_DECAY: f64 = 15.0;
pub const SYNC_LN_EPS: f64 = 1e-5;

/// `p` distinct `(a, b)` pairs drawn uniformly from `n_a × n_b`.
pub fn sample_pairs(n_a: usize, n_b: usize, p: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let space = n_a * n_b;
    if p > space {
        return Err(TideError::Config(format!("{p} pairs requested from a space of {space}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flat = sample(&mut rng, space, p).into_vec();
    Ok((flat.iter().map(|k| k / n_b).collect(), flat.iter().map(|k| k % n_b).collect()))
}

/// Running accumulators of one stream.
#[derive(Clone, Copy, Debug)]
pub struct SyncAcc {
    /// `[batch, p]`
    pub nu: Var,
    /// `[p]`; identical across the batch.
    pub xi: Var,
}

#[derive(Clone, Debug)]
pub struct SyncStream {
    pub idx_a: Rc<Vec<usize>>,
    pub idx_b: Rc<Vec<usize>>,
    pub delta: ParamId,
    pub proj: Linear,
    pub ln: LayerNorm,
    pub clamp_c: Option<f64>,
    pub d_out: usize,
}

impl SyncStream {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        idx: (Vec<usize>, Vec<usize>),
        d_out: usize,
        clamp_c: Option<f64>,
        rng: &mut impl Rng,
    ) -> Self {
        let p = idx.0.len();
        // kept off the clip boundary so the decay always carries gradient
        let delta = store.add(
            &format!("{name}.delta"),
            Tensor::from_fn(&[p], |_| rng.random_range(0.1..2.0)),
            Constraint::Range(0.0, MAX_DECAY),
        );
        let proj = Linear::new(store, &format!("{name}.proj"), p, 2 * d_out, true, rng);
        let ln = LayerNorm::new(store, &format!("{name}.ln"), d_out, SYNC_LN_EPS);
        Self { idx_a: Rc::new(idx.0), idx_b: Rc::new(idx.1), delta, proj, ln, clamp_c, d_out }
    }

    pub fn pairs(&self) -> usize {
        self.idx_a.len()
    }

    pub fn zero_acc(&self, f: &Fwd, batch: usize) -> SyncAcc {
        SyncAcc { nu: f.t.constant(Tensor::zeros(&[batch, self.pairs()])), xi: f.t.constant(Tensor::zeros(&[self.pairs()])) }
    }

    /// Decay, accumulate and normalise; returns the raw signal `s` and the
    /// new accumulators.
    pub fn accumulate(&self, f: &Fwd, acc: SyncAcc, x_a: Var, x_b: Var) -> (Var, SyncAcc) {
        let t = f.t;
        let r = t.clamp(t.exp(t.neg(f.w(self.delta))), (-MAX_DECAY).exp(), 1.0);
        let pi = t.mul(t.gather_last(x_a, self.idx_a.clone()), t.gather_last(x_b, self.idx_b.clone()));
        let mut nu = t.add(t.mul(r, acc.nu), pi);
        if let Some(c) = self.clamp_c {
            nu = t.clamp(nu, -c, c);
        }
        let xi = t.add_scalar(t.mul(r, acc.xi), 1.0);
        let s = t.div(nu, t.sqrt(t.add_scalar(xi, SYNC_EPS)));
        (s, SyncAcc { nu, xi })
    }

    /// `LN(GLU(s W + b))`
    pub fn project(&self, f: &Fwd, s: Var) -> Var {
        self.ln.forward(f, f.t.glu(self.proj.forward(f, s)))
    }

    pub fn update(&self, f: &Fwd, acc: SyncAcc, x_a: Var, x_b: Var) -> (Var, SyncAcc) {
        let (s, acc) = self.accumulate(f, acc, x_a, x_b);
        (self.project(f, s), acc)
    }
}

/// Layer-normalised `[z_EE; z_EI; z_II]`.
pub fn assemble_latent(f: &Fwd, parts: [Var; 3], widths: [usize; 3], ln: &LayerNorm) -> Result<Var> {
    for (v, w) in parts.iter().zip(widths) {
        if f.t.shape(*v).last() != Some(&w) {
            return dim_err(format!("sync part width {:?} vs configured {w}", f.t.shape(*v)));
        }
    }
    Ok(ln.forward(f, f.t.concat(&parts)))
}
