#![allow(dead_code)]

use tide_core::autograd::{grad_check, GradCheckOptions, GradCheckReport, Tape, Tensor, Var};
use tide_core::params::{BufferStore, Fwd, ParamStore};

/// Finite-difference check of everything in `store` through `build`.
pub fn check_params(store: &ParamStore, bufs: &BufferStore, opts: &GradCheckOptions, build: impl Fn(&Fwd) -> Var) -> GradCheckReport {
    let values: Vec<Tensor> = store.iter().map(|(_, p)| p.value.clone()).collect();
    grad_check(
        |t: &Tape, v: &[Var]| {
            let f = Fwd::new(t, v, bufs, false, 0);
            build(&f)
        },
        &values,
        opts,
    )
}

/// Scalar reduction with fixed random weights so that every output
/// coordinate carries gradient.
pub fn probe(t: &Tape, x: Var, seed: u64) -> Var {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let shape = t.shape(x);
    let w = Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0));
    t.sum(t.mul(x, t.constant(w)))
}

pub fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}
