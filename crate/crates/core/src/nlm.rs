//! Population-specific neuron-level models: FIFO histories, exponential
//! temporal kernels and the batched per-neuron gated map.

use rand::Rng;
use tide_autograd::{Tensor, Var};

use crate::error::{dim_err, Result};
use crate::params::{uniform_fan_in, Constraint, Fwd, ParamId, ParamStore};

pub const NLM_LN_EPS: f64 = 1e-5;
pub const MIN_TEMPERATURE: f64 = 1e-2;

/// `w_m ∝ exp(−(M−m)/τ)` for `m = 1..M`, normalised to sum to one.
pub fn temporal_kernel(m_len: usize, tau: f64) -> Vec<f64> {
    assert!(tau > 0.0, "tau must be positive");
    let logits: Vec<f64> = (1..=m_len).map(|m| -((m_len - m) as f64) / tau).collect();
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Rolling window of the last `M` post-activations, `[batch, n, M]`,
/// newest in the last slot. Starts zero-filled.
#[derive(Clone, Debug, PartialEq)]
pub struct FifoBuffer {
    pub data: Tensor,
}

impl FifoBuffer {
    pub fn zeros(batch: usize, n: usize, m: usize) -> Self {
        Self { data: Tensor::zeros(&[batch, n, m]) }
    }

    pub fn window(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn push(&mut self, r: &Tensor) -> Result<()> {
        let s = self.data.shape().to_vec();
        if r.shape() != [s[0], s[1]] {
            return dim_err(format!("fifo push {:?} into {:?}", r.shape(), s));
        }
        let m = s[2];
        let d = self.data.data_mut();
        for (row, &v) in d.chunks_mut(m).zip(r.data()) {
            row.copy_within(1.., 0);
            row[m - 1] = v;
        }
        Ok(())
    }
}

/// Tape form of the push: drop the oldest slot, append `r` as newest.
pub fn fifo_push(f: &Fwd, buf: Var, r: Var) -> Var {
    let s = f.t.shape(buf);
    let (b, n, m) = (s[0], s[1], s[2]);
    let newest = f.t.reshape(r, &[b, n, 1]);
    if m == 1 {
        return newest;
    }
    f.t.concat(&[f.t.slice_last(buf, 1, m - 1), newest])
}

#[derive(Clone, Debug)]
pub struct NlmBank {
    pub n: usize,
    pub m: usize,
    pub h: usize,
    pub tau: f64,
    /// `[n, M, 2H]`
    pub w1: ParamId,
    pub b1: ParamId,
    /// `[n, H, 2]`
    pub w2: ParamId,
    pub b2: ParamId,
    pub temperature: ParamId,
}

impl NlmBank {
    pub fn new(store: &mut ParamStore, name: &str, n: usize, m: usize, h: usize, tau: f64, rng: &mut impl Rng) -> Self {
        let w1 = store.add(&format!("{name}.w1"), uniform_fan_in(&[n, m, 2 * h], m, rng), Constraint::None);
        let b1 = store.add(&format!("{name}.b1"), Tensor::zeros(&[n, 2 * h]), Constraint::None);
        let w2 = store.add(&format!("{name}.w2"), uniform_fan_in(&[n, h, 2], h, rng), Constraint::None);
        let b2 = store.add(&format!("{name}.b2"), Tensor::zeros(&[n, 2]), Constraint::None);
        let temperature = store.add(
            &format!("{name}.temperature"),
            Tensor::full(&[n], 1.0),
            Constraint::Range(MIN_TEMPERATURE, f64::INFINITY),
        );
        // biases are per-neuron matrices but behave like vectors
        store.param_mut(b1).decay = false;
        store.param_mut(b2).decay = false;
        Self { n, m, h, tau, w1, b1, w2, b2, temperature }
    }

    /// Corrections `[batch, n]` from a `[batch, n, M]` history.
    pub fn forward(&self, f: &Fwd, buf: Var) -> Result<Var> {
        let s = f.t.shape(buf);
        if s.len() != 3 || s[1] != self.n || s[2] != self.m {
            return dim_err(format!("nlm buffer {:?} vs bank n={} M={}", s, self.n, self.m));
        }
        let t = f.t;
        let kernel = t.constant(Tensor::new(&[self.m], temporal_kernel(self.m, self.tau)));
        let u = t.layer_norm(t.mul(buf, kernel), None, None, NLM_LN_EPS);
        let y = t.add(t.per_neuron(u, f.w(self.w1)), f.w(self.b1));
        let temp = t.reshape(f.w(self.temperature), &[self.n, 1]);
        let y = t.glu(t.div(y, temp));
        let y = t.glu(t.add(t.per_neuron(y, f.w(self.w2)), f.w(self.b2)));
        Ok(t.reshape(y, &[s[0], self.n]))
    }
}
