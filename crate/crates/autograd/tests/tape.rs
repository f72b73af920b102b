use std::rc::Rc;

use proptest::prelude::*;
use tide_autograd::{grad_check, truncate_bptt, GradCheckOptions, Tape, Tensor, Var};

fn noise(shape: &[usize], seed: u64) -> Tensor {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    Tensor::from_fn(shape, |_| {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    })
}

fn check(params: &[Tensor], f: impl Fn(&Tape, &[Var]) -> Var) -> f64 {
    let r = grad_check(f, params, &GradCheckOptions::default());
    assert!(r.checked > 0);
    r.max_rel_err
}

#[test]
fn quadratic_gradient_is_exact_to_rounding() {
    let x = noise(&[4], 1).map(|v| 0.5 * v + 1.0);
    let n = noise(&[4, 4], 2);
    let a = Tensor::from_fn(&[4, 4], |i| if i % 5 == 0 { 1.0 } else { 0.1 * n.data()[i] });
    let err = check(&[x], |t, p| {
        let a = t.constant(a.clone());
        let ax = t.matmul_with(p[0], a, true);
        let q = t.mul(ax, p[0]);
        t.scale(t.sum(q), 0.5)
    });
    assert!(err < 1e-10, "{err}");
}

#[test]
fn elementwise_ops_match_central_differences() {
    let a = noise(&[3, 4], 3);
    let b = noise(&[4], 4).map(|v| v + 2.5);
    let err = check(&[a, b], |t, p| {
        let s = t.add(p[0], p[1]);
        let m = t.mul(s, p[1]);
        let d = t.div(m, p[1]);
        let e = t.exp(t.scale(d, 0.3));
        let sg = t.sigmoid(e);
        let sp = t.softplus(t.sub(sg, p[0]));
        let th = t.tanh(sp);
        let l = t.ln(t.add_scalar(t.square(th), 1.0));
        let q = t.sqrt(t.add_scalar(l, 0.5));
        t.sum(t.neg(q))
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn general_broadcast_gradients() {
    let a = noise(&[2, 1, 3], 5);
    let b = noise(&[4, 1], 6);
    let err = check(&[a, b], |t, p| {
        let c = t.mul(p[0], p[1]);
        let d = t.add(c, p[1]);
        t.sum(t.square(d))
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn shape_ops_gradients() {
    let a = noise(&[2, 3, 4], 7);
    let b = noise(&[2, 3, 2], 8);
    let w = noise(&[5], 9);
    let err = check(&[a, b, w], |t, p| {
        let c = t.concat(&[p[0], p[1]]);
        let g = t.gather_last(c, Rc::new(vec![5, 0, 0, 3, 4]));
        let s = t.slice_last(c, 1, 5);
        let h = t.mul(t.add(g, s), p[2]);
        let perm = t.permute(h, &[2, 0, 1]);
        let r = t.reshape(perm, &[10, 3]);
        let sl = t.sum_last(t.square(r));
        let pk = t.pick(t.reshape(t.concat(&[sl, sl]), &[4, 5]), Rc::new(vec![0, 3, 2, 4]));
        t.sum(pk)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn matmul_and_bmm_gradients() {
    let a = noise(&[2, 3, 4], 10);
    let w = noise(&[4, 5], 11);
    let wt = noise(&[5, 4], 12);
    let b = noise(&[2, 4, 3], 13);
    let err = check(&[a, w, wt, b], |t, p| {
        let x = t.matmul(p[0], p[1]);
        let y = t.matmul_with(p[0], p[2], true);
        let z = t.bmm(p[0], p[3], false);
        let u = t.bmm(z, t.add(x, y), false);
        let v = t.bmm(z, t.permute(p[0], &[0, 2, 1]), true);
        t.add(t.sum(t.square(u)), t.sum(t.tanh(v)))
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn normalisation_and_softmax_gradients() {
    let x = noise(&[3, 6], 14);
    let g = noise(&[6], 15);
    let b = noise(&[6], 16);
    let err = check(&[x, g, b], |t, p| {
        let ln = t.layer_norm(p[0], Some(p[1]), Some(p[2]), 1e-5);
        let rn = t.rms_norm(p[0], Some(p[1]), 1e-6);
        let sm = t.softmax(t.add(ln, rn));
        let ls = t.log_softmax(t.mul(rn, p[2]));
        let glu = t.glu(t.add(sm, ls));
        let ce = t.cross_entropy_rows(t.concat(&[glu, glu]), &[0, 5, 2]);
        t.add(t.sum(ce), t.sum(t.square(glu)))
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn conv_batchnorm_pool_gradients() {
    let x = noise(&[2, 2, 6, 6], 17);
    let w = noise(&[3, 2, 3, 3], 18);
    let w2 = noise(&[2, 3, 5, 5], 19);
    let g = noise(&[3], 20).map(|v| v + 1.5);
    let b = noise(&[3], 21);
    let err = check(&[x, w, w2, g, b], |t, p| {
        let c = t.conv2d(p[0], p[1], 1, 1);
        let bn = t.batch_norm2d(c, p[3], p[4], 1e-5);
        let c2 = t.conv2d(t.tanh(bn), p[2], 2, 2);
        let pool = t.adaptive_avg_pool(c2, 2, 2);
        let pool2 = t.adaptive_avg_pool(bn, 4, 4);
        t.add(t.sum(t.square(pool)), t.sum(t.sigmoid(pool2)))
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn per_neuron_gradients() {
    let x = noise(&[3, 4, 5], 22);
    let w = noise(&[4, 5, 2], 23);
    let err = check(&[x, w], |t, p| t.sum(t.square(t.per_neuron(p[0], p[1]))));
    assert!(err < 1e-6, "{err}");
}

#[test]
fn relu_gradient_at_zero_is_zero() {
    let t = Tape::new();
    let x = t.leaf(Tensor::new(&[3], vec![-1.0, 0.0, 2.0]));
    let y = t.sum(t.relu(x));
    let g = t.backward(y);
    assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
}

#[test]
fn clamp_passes_gradient_on_closed_interval() {
    let t = Tape::new();
    let x = t.leaf(Tensor::new(&[4], vec![-2.0, -1.0, 1.0, 3.0]));
    let y = t.sum(t.clamp(x, -1.0, 1.0));
    assert_eq!(t.backward(y).get(x).unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);
}

#[test]
fn detached_branch_contributes_nothing() {
    let t = Tape::new();
    let x = t.leaf(Tensor::new(&[2], vec![1.0, 2.0]));
    let d = t.detach(x);
    let y = t.sum(t.mul(x, d));
    // d/dx (x * stop(x)) = stop(x)
    assert_eq!(t.backward(y).get(x).unwrap().data(), &[1.0, 2.0]);
}

#[test]
fn kink_crossings_are_skipped() {
    let x = Tensor::new(&[3], vec![1e-6, 0.5, -0.7]);
    let r = grad_check(|t, p| t.sum(t.square(t.relu(p[0]))), &[x], &GradCheckOptions::default());
    assert_eq!(r.skipped_kinks, 1);
    assert_eq!(r.checked, 2);
}

fn recurrent(t: &Tape, p: &[Var], steps: usize) -> Var {
    let mut h = t.constant(Tensor::full(&[1, 3], 0.5));
    let mut loss = t.scalar(0.0);
    for s in 1..=steps {
        let e = t.step_edge(h, s);
        h = t.tanh(t.add(t.matmul(e, p[0]), p[1]));
        loss = t.add(loss, t.sum(t.square(h)));
    }
    loss
}

fn grads_with_horizon(k: usize, steps: usize) -> Tensor {
    let t = Tape::new();
    let w = t.leaf(noise(&[3, 3], 30));
    let b = t.leaf(noise(&[3], 31));
    let loss = recurrent(&t, &[w, b], steps);
    let t = truncate_bptt(t, k);
    t.backward(loss).get(w).unwrap().clone()
}

#[test]
fn truncation_horizon_semantics() {
    let full = grads_with_horizon(0, 3);
    assert_eq!(grads_with_horizon(3, 3), full);
    assert_eq!(grads_with_horizon(7, 3), full);
    let short = grads_with_horizon(1, 3);
    assert!((&short.data()[0] - full.data()[0]).abs() > 1e-9 || short != full);
}

#[test]
fn full_horizon_matches_finite_differences() {
    let err = check(&[noise(&[3, 3], 30), noise(&[3], 31)], |t, p| recurrent(t, p, 4));
    assert!(err < 1e-6, "{err}");
}

proptest! {
    #[test]
    fn matmul_gradient_matches_fd(m in 1usize..4, k in 1usize..5, n in 1usize..4, seed in 0u64..1000) {
        let a = noise(&[m, k], seed);
        let b = noise(&[k, n], seed + 1);
        let err = check(&[a, b], |t, p| t.sum(t.tanh(t.matmul(p[0], p[1]))));
        prop_assert!(err < 1e-6);
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..7, seed in 0u64..1000) {
        let t = Tape::new();
        let x = t.constant(noise(&[rows, cols], seed).map(|v| 30.0 * v));
        let y = t.value(t.softmax(x));
        for r in 0..rows {
            let s: f64 = y.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(y.row(r).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn broadcast_add_gradient_sums_over_broadcast_axes(rows in 1usize..6, cols in 1usize..6) {
        let t = Tape::new();
        let a = t.constant(Tensor::zeros(&[rows, cols]));
        let b = t.leaf(Tensor::zeros(&[cols]));
        let y = t.sum(t.add(a, b));
        let g = t.backward(y);
        prop_assert!(g.get(b).unwrap().data().iter().all(|&v| v == rows as f64));
    }
}
