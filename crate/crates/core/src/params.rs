//! Named parameter and buffer storage, plus the per-forward context that
//! maps parameters onto tape leaves.

use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tide_autograd::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Constraint {
    None,
    /// Dale projection `max(w, 0)`.
    NonNeg,
    Range(f64, f64),
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
    /// Receives decoupled weight decay.
    pub decay: bool,
    pub constraint: Constraint,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Weight decay applies to matrices and kernels, not to vectors.
    pub fn add(&mut self, name: &str, value: Tensor, constraint: Constraint) -> ParamId {
        assert!(self.find(name).is_none(), "duplicate parameter {name}");
        let decay = value.ndim() >= 2;
        self.params.push(Param { name: name.to_string(), value, trainable: true, decay, constraint });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// One tape leaf per parameter, indexed by `ParamId`.
    pub fn register(&self, tape: &Tape) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| if p.trainable { tape.leaf(p.value.clone()) } else { tape.constant(p.value.clone()) })
            .collect()
    }

    /// Project every constrained parameter back onto its feasible set.
    pub fn apply_constraints(&mut self) {
        for p in &mut self.params {
            match p.constraint {
                Constraint::None => {}
                Constraint::NonNeg => crate::dale::project_dale_inplace(&mut p.value),
                Constraint::Range(lo, hi) => {
                    for x in p.value.data_mut() {
                        *x = x.clamp(lo, hi);
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(pub usize);

/// Non-differentiable state that persists across steps.
#[derive(Clone, Debug, Default)]
pub struct BufferStore {
    items: Vec<(String, Tensor)>,
}

impl BufferStore {
    pub fn add(&mut self, name: &str, value: Tensor) -> BufferId {
        assert!(self.items.iter().all(|(n, _)| n != name), "duplicate buffer {name}");
        self.items.push((name.to_string(), value));
        BufferId(self.items.len() - 1)
    }

    pub fn get(&self, id: BufferId) -> &Tensor {
        &self.items[id.0].1
    }

    pub fn set(&mut self, id: BufferId, v: Tensor) {
        assert_eq!(self.items[id.0].1.shape(), v.shape(), "buffer {} shape change", self.items[id.0].0);
        self.items[id.0].1 = v;
    }

    pub fn iter(&self) -> impl Iterator<Item = (BufferId, &str, &Tensor)> {
        self.items.iter().enumerate().map(|(i, (n, t))| (BufferId(i), n.as_str(), t))
    }

    pub fn find(&self, name: &str) -> Option<BufferId> {
        self.items.iter().position(|(n, _)| n == name).map(BufferId)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn commit(&mut self, updates: Vec<(BufferId, Tensor)>) {
        for (id, v) in updates {
            self.set(id, v);
        }
    }
}

/// Everything a module needs during one forward pass.
pub struct Fwd<'a> {
    pub t: &'a Tape,
    pub p: &'a [Var],
    pub bufs: &'a BufferStore,
    pub train: bool,
    rng: RefCell<ChaCha8Rng>,
    pending: RefCell<Vec<(BufferId, Tensor)>>,
}

impl<'a> Fwd<'a> {
    pub fn new(t: &'a Tape, p: &'a [Var], bufs: &'a BufferStore, train: bool, dropout_seed: u64) -> Self {
        Self {
            t,
            p,
            bufs,
            train,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(dropout_seed)),
            pending: RefCell::new(Vec::new()),
        }
    }

    /// Queue a buffer write; nothing is stored until the caller commits.
    pub fn stage(&self, id: BufferId, v: Tensor) {
        self.pending.borrow_mut().push((id, v));
    }

    pub fn take_pending(&self) -> Vec<(BufferId, Tensor)> {
        std::mem::take(&mut self.pending.borrow_mut())
    }

    pub fn w(&self, id: ParamId) -> Var {
        self.p[id.0]
    }

    pub fn val(&self, id: ParamId) -> std::rc::Rc<Tensor> {
        self.t.value(self.p[id.0])
    }

    /// Inverted dropout; identity outside training or at rate 0.
    pub fn dropout(&self, x: Var, rate: f64) -> Var {
        if !self.train || rate <= 0.0 {
            return x;
        }
        let shape = self.t.shape(x);
        let keep = 1.0 - rate;
        let mut rng = self.rng.borrow_mut();
        let mask = Tensor::from_fn(&shape, |_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
        let m = self.t.constant(mask);
        self.t.mul(x, m)
    }
}

/// Uniform on `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn uniform_fan_in(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let b = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| (rng.random::<f64>() * 2.0 - 1.0) * b)
}

/// `x W + b` with `W [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let w = store.add(&format!("{name}.w"), uniform_fan_in(&[d_in, d_out], d_in, rng), Constraint::None);
        let b = bias.then(|| store.add(&format!("{name}.b"), Tensor::zeros(&[d_out]), Constraint::None));
        Self { w, b, d_in, d_out }
    }

    pub fn forward(&self, f: &Fwd, x: Var) -> Var {
        f.t.linear(x, f.w(self.w), self.b.map(|b| f.w(b)))
    }

    /// Plain evaluation on one row.
    pub fn apply(&self, store_w: &Tensor, store_b: Option<&Tensor>, x: &[f64]) -> Vec<f64> {
        let mut y = store_w.t().matvec(x);
        if let Some(b) = store_b {
            for (a, c) in y.iter_mut().zip(b.data()) {
                *a += c;
            }
        }
        y
    }
}

/// Layer normalisation over the trailing axis with a learnable affine.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, eps: f64) -> Self {
        let gamma = store.add(&format!("{name}.gamma"), Tensor::full(&[d], 1.0), Constraint::None);
        let beta = store.add(&format!("{name}.beta"), Tensor::zeros(&[d]), Constraint::None);
        Self { gamma, beta, eps }
    }

    pub fn forward(&self, f: &Fwd, x: Var) -> Var {
        f.t.layer_norm(x, Some(f.w(self.gamma)), Some(f.w(self.beta)), self.eps)
    }
}
