//! Cross-attention from the sync latent into backbone tokens, the gated
//! output head and entropy certainty.

use rand::Rng;
use tide_autograd::{softmax_rows, Tensor, Var};

use crate::error::{dim_err, Result};
use crate::params::{Fwd, LayerNorm, Linear, ParamStore};

pub const READOUT_LN_EPS: f64 = 1e-5;

/// Keys and values split per head, `[batch·heads, P, d_head]`.
#[derive(Clone, Copy, Debug)]
pub struct HeadKv {
    pub k: Var,
    pub v: Var,
}

#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub heads: usize,
    pub d_attn: usize,
    pub d_sync: usize,
    pub w_q: Linear,
    pub w_o: Linear,
    pub ln: LayerNorm,
    pub dropout: f64,
    pub residual: bool,
}

impl CrossAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_sync: usize,
        d_attn: usize,
        heads: usize,
        dropout: f64,
        residual: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || d_attn % heads != 0 {
            return dim_err(format!("d_attn {d_attn} is not a multiple of {heads} heads"));
        }
        let w_q = Linear::new(store, &format!("{name}.w_q"), d_sync, d_attn, true, rng);
        let w_o = Linear::new(store, &format!("{name}.w_o"), d_attn, d_sync, true, rng);
        let ln = LayerNorm::new(store, &format!("{name}.ln"), d_sync, READOUT_LN_EPS);
        Ok(Self { heads, d_attn, d_sync, w_q, w_o, ln, dropout, residual })
    }

    pub fn d_head(&self) -> usize {
        self.d_attn / self.heads
    }

    fn split_heads(&self, f: &Fwd, x: Var) -> Var {
        let s = f.t.shape(x);
        let (b, p) = (s[0], s[1]);
        let x = f.t.reshape(x, &[b, p, self.heads, self.d_head()]);
        let x = f.t.permute(x, &[0, 2, 1, 3]);
        f.t.reshape(x, &[b * self.heads, p, self.d_head()])
    }

    /// `keys`, `values`: `[batch, P, d_attn]`.
    pub fn prepare(&self, f: &Fwd, keys: Var, values: Var) -> Result<HeadKv> {
        let (ks, vs) = (f.t.shape(keys), f.t.shape(values));
        if ks.len() != 3 || ks != vs || ks[2] != self.d_attn || ks[1] == 0 {
            return dim_err(format!("keys {ks:?} / values {vs:?} vs d_attn {}", self.d_attn));
        }
        Ok(HeadKv { k: self.split_heads(f, keys), v: self.split_heads(f, values) })
    }

    /// Attention probabilities `[batch·heads, 1, P]` and the output `[batch, d_sync]`.
    pub fn forward_with_probs(&self, f: &Fwd, z: Var, kv: HeadKv) -> Result<(Var, Var)> {
        let t = f.t;
        let zs = t.shape(z);
        if zs.len() != 2 || zs[1] != self.d_sync {
            return dim_err(format!("query {zs:?} vs d_sync {}", self.d_sync));
        }
        let b = zs[0];
        let dh = self.d_head();
        let q = t.reshape(self.w_q.forward(f, z), &[b * self.heads, 1, dh]);
        let scores = t.scale(t.bmm(q, kv.k, true), 1.0 / (dh as f64).sqrt());
        let probs = t.softmax(scores);
        let attn = t.bmm(f.dropout(probs, self.dropout), kv.v, false);
        let a = self.w_o.forward(f, t.reshape(attn, &[b, self.d_attn]));
        let a = if self.residual { t.add(a, z) } else { a };
        Ok((self.ln.forward(f, a), probs))
    }

    pub fn forward(&self, f: &Fwd, z: Var, kv: HeadKv) -> Result<Var> {
        Ok(self.forward_with_probs(f, z, kv)?.0)
    }
}

#[derive(Clone, Debug)]
pub struct OutputHead {
    pub hidden: Linear,
    pub ln: LayerNorm,
    pub out: Linear,
    pub dropout: f64,
}

impl OutputHead {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize, classes: usize, dropout: f64, rng: &mut impl Rng) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), d_in, 2 * hidden, true, rng),
            ln: LayerNorm::new(store, &format!("{name}.ln"), hidden, READOUT_LN_EPS),
            out: Linear::new(store, &format!("{name}.out"), hidden, classes, true, rng),
            dropout,
        }
    }

    /// `W_out · LN(GLU(W_hidden [z; m]))`
    pub fn forward(&self, f: &Fwd, z: Var, mem: Var) -> Var {
        let x = f.t.concat(&[z, mem]);
        let h = self.ln.forward(f, f.t.glu(self.hidden.forward(f, x)));
        self.out.forward(f, f.dropout(h, self.dropout))
    }
}

/// `1 − H(softmax(o)) / ln C`
pub fn certainty(logits: &[f64]) -> f64 {
    let c = logits.len();
    assert!(c >= 2, "certainty needs at least two classes");
    let p = softmax_rows(&Tensor::new(&[1, c], logits.to_vec()));
    let h: f64 = p.data().iter().filter(|&&q| q > 0.0).map(|q| -q * q.ln()).sum();
    1.0 - h / (c as f64).ln()
}
