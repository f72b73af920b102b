//! The recording and its reverse sweep.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::tensor::Tensor;
use crate::{nn, ops};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum Unary {
    Neg,
    Relu,
    Exp,
    Ln,
    Sqrt,
    Square,
    Abs,
    Sigmoid,
    Softplus,
    Tanh,
}

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Unary(Var, Unary),
    Clamp(Var, f64, f64),
    SumAll(Var),
    SumLast(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Gather(Var, Rc<Vec<usize>>),
    Pick(Var, Rc<Vec<usize>>),
    MatMul(Var, Var, bool),
    Bmm(Var, Var, bool),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gamma: Option<Var>, beta: Option<Var>, xhat: Tensor, rstd: Vec<f64> },
    RmsNorm { x: Var, gain: Option<Var>, xn: Tensor, rstd: Vec<f64> },
    Glu(Var),
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    BatchNorm2d { x: Var, gamma: Var, beta: Var, xhat: Tensor, rstd: Vec<f64> },
    AvgPool(Var),
    PerNeuron(Var, Var),
    StepEdge(Var, usize),
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b, _) | Bmm(a, b, _) => {
                vec![*a, *b]
            }
            PerNeuron(a, b) => vec![*a, *b],
            Scale(x, _) | Offset(x) | Unary(x, _) | Clamp(x, _, _) | SumAll(x) | SumLast(x) => vec![*x],
            Reshape(x) | Permute(x, _) | Slice(x, _) | Gather(x, _) | Pick(x, _) => vec![*x],
            Softmax(x) | LogSoftmax(x) | Glu(x) | AvgPool(x) | StepEdge(x, _) => vec![*x],
            Concat(xs) => xs.clone(),
            LayerNorm { x, gamma, beta, .. } => {
                let mut v = vec![*x];
                v.extend(gamma.iter().chain(beta.iter()));
                v
            }
            RmsNorm { x, gain, .. } => {
                let mut v = vec![*x];
                v.extend(gain.iter());
                v
            }
            Conv2d { x, w, .. } => vec![*x, *w],
            BatchNorm2d { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        }
    }
}

pub(crate) struct Node {
    pub value: Rc<Tensor>,
    pub op: Op,
    pub needs_grad: bool,
}

/// A reverse-mode recording. Every operation appends a node; `backward`
/// sweeps the nodes in reverse and accumulates adjoints into the leaves.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    kinks: RefCell<Option<Vec<u8>>>,
    horizon: Cell<usize>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints of the leaves reached by a backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), kinks: RefCell::new(None), horizon: Cell::new(0) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input.
    pub fn leaf(&self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, true)
    }

    /// A value that never receives an adjoint.
    pub fn constant(&self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, false)
    }

    pub fn scalar(&self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Same value, no gradient flow.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    pub(crate) fn push(&self, value: Tensor, op: Op) -> Var {
        let needs = {
            let nodes = self.nodes.borrow();
            op.parents().iter().any(|p| nodes[p.0].needs_grad)
        };
        self.push_raw(value, op, needs)
    }

    fn push_raw(&self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, needs_grad });
        Var(nodes.len() - 1)
    }

    /// Start recording which side of each ReLU / clamp / abs kink every
    /// element falls on.
    pub fn track_kinks(&self) {
        *self.kinks.borrow_mut() = Some(Vec::new());
    }

    pub fn kink_signature(&self) -> Option<Vec<u8>> {
        self.kinks.borrow().clone()
    }

    pub(crate) fn record_kinks(&self, codes: impl FnOnce() -> Vec<u8>) {
        if let Some(k) = self.kinks.borrow_mut().as_mut() {
            k.extend(codes());
        }
    }

    /// Identity that marks `x` as recurrent state entering internal step
    /// `step` (1-based). [`truncate_bptt`] may later sever these edges.
    pub fn step_edge(&self, x: Var, step: usize) -> Var {
        let v = self.value(x);
        let needs = self.requires_grad(x);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: v, op: Op::StepEdge(x, step), needs_grad: needs });
        Var(nodes.len() - 1)
    }

    fn max_step(&self) -> usize {
        self.nodes
            .borrow()
            .iter()
            .filter_map(|n| if let Op::StepEdge(_, s) = n.op { Some(s) } else { None })
            .max()
            .unwrap_or(0)
    }

    /// Reverse sweep from a scalar `loss`. Only leaves keep their adjoints.
    pub fn backward(&self, loss: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.len(), 1, "backward needs a scalar loss");
        let cutoff = match self.horizon.get() {
            0 => 0,
            k => self.max_step().saturating_sub(k),
        };
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        let mut leaves: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let mut acc = |p: Var, t: Tensor| {
                if nodes[p.0].needs_grad {
                    match &mut grads[p.0] {
                        Some(e) => e.add_assign(&t),
                        slot => *slot = Some(t),
                    }
                }
            };
            match &node.op {
                Op::Leaf => leaves[i] = Some(g),
                Op::StepEdge(x, step) => {
                    if *step > cutoff {
                        acc(*x, g);
                    }
                }
                op => backward_op(&nodes, op, &node.value, g, &mut acc),
            }
        }
        Gradients { grads: leaves }
    }
}

/// Sever gradient flow through recurrent-state edges older than `k`
/// internal steps; `k = 0` keeps full backpropagation through time.
pub fn truncate_bptt(tape: Tape, k: usize) -> Tape {
    tape.horizon.set(k);
    tape
}

fn backward_op(nodes: &[Node], op: &Op, out: &Tensor, g: Tensor, acc: &mut dyn FnMut(Var, Tensor)) {
    let val = |v: &Var| -> &Tensor { &nodes[v.0].value };
    let need = |v: &Var| nodes[v.0].needs_grad;
    match op {
        Op::Leaf | Op::StepEdge(..) => unreachable!(),
        Op::Add(a, b) => {
            if need(b) {
                acc(*b, ops::reduce_to(&g, val(b).shape()));
            }
            if need(a) {
                acc(*a, ops::reduce_to(&g, val(a).shape()));
            }
        }
        Op::Sub(a, b) => {
            if need(b) {
                let mut gb = ops::reduce_to(&g, val(b).shape());
                gb.scale_inplace(-1.0);
                acc(*b, gb);
            }
            if need(a) {
                acc(*a, ops::reduce_to(&g, val(a).shape()));
            }
        }
        Op::Mul(a, b) => {
            if need(a) {
                acc(*a, ops::reduce_to(&ops::broadcast_binary(&g, val(b), |g, b| g * b), val(a).shape()));
            }
            if need(b) {
                acc(*b, ops::reduce_to(&ops::broadcast_binary(&g, val(a), |g, a| g * a), val(b).shape()));
            }
        }
        Op::Div(a, b) => {
            let gb_over = ops::broadcast_binary(&g, val(b), |g, b| g / b);
            if need(b) {
                let t = gb_over.zip_map(out, |q, y| -q * y);
                acc(*b, ops::reduce_to(&t, val(b).shape()));
            }
            if need(a) {
                acc(*a, ops::reduce_to(&gb_over, val(a).shape()));
            }
        }
        Op::Scale(x, c) => {
            let c = *c;
            acc(*x, g.map(|v| v * c));
        }
        Op::Offset(x) => acc(*x, g),
        Op::Unary(x, u) => acc(*x, ops::unary_backward(*u, val(x), out, &g)),
        Op::Clamp(x, lo, hi) => {
            let (lo, hi) = (*lo, *hi);
            acc(*x, g.zip_map(val(x), |g, x| if x >= lo && x <= hi { g } else { 0.0 }));
        }
        Op::SumAll(x) => {
            let s = g.item();
            acc(*x, Tensor::full(val(x).shape(), s));
        }
        Op::SumLast(x) => {
            let xs = val(x);
            let n = xs.last_dim();
            let gd = g.data();
            acc(*x, Tensor::from_fn(xs.shape(), |i| gd[i / n]));
        }
        Op::Reshape(x) => acc(*x, g.reshape(val(x).shape())),
        Op::Permute(x, perm) => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            acc(*x, ops::permute(&g, &inv));
        }
        Op::Concat(xs) => {
            let mut start = 0;
            for x in xs {
                let w = val(x).last_dim();
                if need(x) {
                    acc(*x, ops::slice_last(&g, start, w));
                }
                start += w;
            }
        }
        Op::Slice(x, start) => {
            let xs = val(x);
            let (n, w) = (xs.last_dim(), g.last_dim());
            let mut t = Tensor::zeros(xs.shape());
            let td = t.data_mut();
            for (r, row) in g.data().chunks(w).enumerate() {
                td[r * n + start..r * n + start + w].copy_from_slice(row);
            }
            acc(*x, t);
        }
        Op::Gather(x, idx) => {
            let xs = val(x);
            let n = xs.last_dim();
            let mut t = Tensor::zeros(xs.shape());
            let td = t.data_mut();
            for (r, row) in g.data().chunks(idx.len()).enumerate() {
                for (j, &i) in idx.iter().enumerate() {
                    td[r * n + i] += row[j];
                }
            }
            acc(*x, t);
        }
        Op::Pick(x, idx) => {
            let xs = val(x);
            let n = xs.last_dim();
            let mut t = Tensor::zeros(xs.shape());
            let td = t.data_mut();
            for (r, &i) in idx.iter().enumerate() {
                td[r * n + i] = g.data()[r];
            }
            acc(*x, t);
        }
        Op::MatMul(a, b, tb) => nn::matmul_backward(val(a), val(b), *tb, &g, need(a), need(b), *a, *b, acc),
        Op::Bmm(a, b, tb) => nn::bmm_backward(val(a), val(b), *tb, &g, need(a), need(b), *a, *b, acc),
        Op::Softmax(x) => acc(*x, nn::softmax_backward(out, &g)),
        Op::LogSoftmax(x) => acc(*x, nn::log_softmax_backward(out, &g)),
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            nn::layer_norm_backward(nodes, *x, *gamma, *beta, xhat, rstd, &g, acc)
        }
        Op::RmsNorm { x, gain, xn, rstd } => nn::rms_norm_backward(nodes, *x, *gain, xn, rstd, &g, acc),
        Op::Glu(x) => acc(*x, nn::glu_backward(val(x), &g)),
        Op::Conv2d { x, w, stride, pad } => {
            nn::conv2d_backward(val(x), val(w), *stride, *pad, &g, need(x), need(w), *x, *w, acc)
        }
        Op::BatchNorm2d { x, gamma, beta, xhat, rstd } => {
            nn::batch_norm_backward(nodes, *x, *gamma, *beta, xhat, rstd, &g, acc)
        }
        Op::AvgPool(x) => acc(*x, nn::avg_pool_backward(val(x).shape(), &g)),
        Op::PerNeuron(x, w) => nn::per_neuron_backward(val(x), val(w), &g, need(x), need(w), *x, *w, acc),
    }
}
