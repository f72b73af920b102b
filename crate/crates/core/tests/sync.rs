mod common;

use common::{check_params, close, probe};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;
use tide_core::autograd::{GradCheckOptions, Tape, Tensor};
use tide_core::params::{BufferStore, Fwd, LayerNorm, ParamStore};
use tide_core::sync::*;

#[test]
fn sampling_is_deterministic() {
    assert_eq!(sample_pairs(10, 7, 20, 42).unwrap(), sample_pairs(10, 7, 20, 42).unwrap());
    assert_ne!(sample_pairs(10, 7, 20, 42).unwrap(), sample_pairs(10, 7, 20, 43).unwrap());
    assert_eq!(sample_pairs(1, 1, 1, 5).unwrap(), (vec![0], vec![0]));
}

#[test]
fn full_pair_space_is_exhausted_without_repeats() {
    let (a, b) = sample_pairs(6, 4, 24, 3).unwrap();
    let set: HashSet<_> = a.iter().zip(&b).collect();
    assert_eq!(set.len(), 24);
    assert!(a.iter().all(|&i| i < 6) && b.iter().all(|&j| j < 4));
    assert!(sample_pairs(6, 4, 25, 3).is_err());
}

struct Rig {
    store: ParamStore,
    stream: SyncStream,
}

fn rig(n: usize, p: usize, d_out: usize, clamp: Option<f64>, seed: u64) -> Rig {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx = sample_pairs(n, n, p, seed).unwrap();
    let stream = SyncStream::new(&mut store, "s", idx, d_out, clamp, &mut rng);
    Rig { store, stream }
}

/// Runs `xs` through the accumulator, returning every `s` and the final `ν`.
fn accumulate_all(r: &Rig, xs: &[Tensor]) -> (Vec<Tensor>, Tensor, Tensor) {
    let t = Tape::new();
    let vars = r.store.register(&t);
    let bufs = BufferStore::default();
    let f = Fwd::new(&t, &vars, &bufs, false, 0);
    let mut acc = r.stream.zero_acc(&f, xs[0].shape()[0]);
    let mut out = Vec::new();
    for x in xs {
        let xv = t.constant(x.clone());
        let (s, next) = r.stream.accumulate(&f, acc, xv, xv);
        acc = next;
        out.push((*t.value(s)).clone());
    }
    (out, (*t.value(acc.nu)).clone(), (*t.value(acc.xi)).clone())
}

#[test]
fn zero_decay_constant_product() {
    let mut r = rig(1, 1, 2, None, 0);
    *r.store.get_mut(r.stream.delta) = Tensor::new(&[1], vec![0.0]);
    let xs = vec![Tensor::new(&[1, 1], vec![1.0]); 9];
    let (s, _, _) = accumulate_all(&r, &xs);
    for (k, v) in s.iter().enumerate() {
        let steps = (k + 1) as f64;
        assert!((v.item() - steps / (steps + 1e-8).sqrt()).abs() < 1e-12);
    }
}

#[test]
fn max_decay_forgets_history() {
    let mut r = rig(2, 3, 2, None, 1);
    *r.store.get_mut(r.stream.delta) = Tensor::full(&[3], MAX_DECAY);
    let xs = vec![Tensor::new(&[1, 2], vec![5.0, 3.0]), Tensor::new(&[1, 2], vec![0.5, 2.0])];
    let (_, nu, xi) = accumulate_all(&r, &xs);
    let (a, b) = (&r.stream.idx_a, &r.stream.idx_b);
    for k in 0..3 {
        let pi = xs[1].data()[a[k]] * xs[1].data()[b[k]];
        assert!((nu.data()[k] - pi).abs() < 1e-5 * (1.0 + pi.abs()));
        assert!((xi.data()[k] - 1.0).abs() < 1e-5);
    }
}

#[test]
fn three_step_geometric_sum() {
    let r = rig(4, 6, 3, None, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let xs: Vec<Tensor> = (0..3).map(|_| Tensor::from_fn(&[2, 4], |_| rng.random::<f64>())).collect();
    let (s, nu, xi) = accumulate_all(&r, &xs);
    let delta = r.store.get(r.stream.delta).clone();
    for row in 0..2 {
        for k in 0..6 {
            let d = (-delta.data()[k]).exp();
            let pi = |x: &Tensor| x.at(&[row, r.stream.idx_a[k]]) * x.at(&[row, r.stream.idx_b[k]]);
            let want = d * d * pi(&xs[0]) + d * pi(&xs[1]) + pi(&xs[2]);
            let count = d * d + d + 1.0;
            assert!((nu.at(&[row, k]) - want).abs() < 1e-12);
            assert!((xi.data()[k] - count).abs() < 1e-12);
            assert!((s[2].at(&[row, k]) - want / (count + SYNC_EPS).sqrt()).abs() < 1e-12);
        }
    }
}

#[test]
fn clamped_accumulator_stays_finite() {
    let mut r = rig(3, 4, 2, Some(100.0), 3);
    *r.store.get_mut(r.stream.delta) = Tensor::zeros(&[4]);
    let xs = vec![Tensor::full(&[1, 3], 1e3); 50];
    let (s, nu, xi) = accumulate_all(&r, &xs);
    assert!(nu.data().iter().all(|&v| v.is_finite() && v.abs() <= 100.0));
    assert!(xi.data().iter().all(|&v| v.is_finite() && v > 0.0));
    assert!(s.iter().all(|t| t.all_finite()));
}

#[test]
fn decay_is_clipped_by_constraints() {
    let mut r = rig(3, 4, 2, None, 4);
    *r.store.get_mut(r.stream.delta) = Tensor::new(&[4], vec![-1.0, 3.0, 20.0, 15.0]);
    r.store.apply_constraints();
    assert_eq!(r.store.get(r.stream.delta).data(), &[0.0, 3.0, 15.0, 15.0]);
}

#[test]
fn initial_decays_off_the_boundary() {
    let r = rig(5, 10, 2, None, 6);
    assert!(r.store.get(r.stream.delta).data().iter().all(|&d| (0.1..2.0).contains(&d)));
}

fn latent(parts: [Tensor; 3], widths: [usize; 3]) -> tide_core::Result<Tensor> {
    let mut store = ParamStore::new();
    let ln = LayerNorm::new(&mut store, "ln", widths.iter().sum(), 1e-5);
    let t = Tape::new();
    let vars = store.register(&t);
    let bufs = BufferStore::default();
    let f = Fwd::new(&t, &vars, &bufs, false, 0);
    let v = parts.map(|p| t.constant(p));
    assemble_latent(&f, v, widths, &ln).map(|z| (*t.value(z)).clone())
}

#[test]
fn latent_examples() {
    let z = latent([Tensor::zeros(&[2, 3]), Tensor::zeros(&[2, 2]), Tensor::zeros(&[2, 1])], [3, 2, 1]).unwrap();
    assert!(z.data().iter().all(|&x| x == 0.0));
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mk = |n: usize, rng: &mut ChaCha8Rng| Tensor::from_fn(&[1, n], |_| rng.random::<f64>() * 4.0 - 1.0);
    let (a, b, c) = (mk(8, &mut rng), mk(4, &mut rng), mk(4, &mut rng));
    let z = latent([a.clone(), b.clone(), c.clone()], [8, 4, 4]).unwrap();
    let mean = z.data().iter().sum::<f64>() / 16.0;
    let var = z.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 16.0;
    assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-3);
    let swapped = latent([a, c, b], [8, 4, 4]).unwrap();
    assert_ne!(z, swapped);
    assert!(latent([Tensor::zeros(&[1, 3]), Tensor::zeros(&[1, 2]), Tensor::zeros(&[1, 2])], [3, 2, 1]).is_err());
}

#[test]
fn projection_output_width() {
    let r = rig(4, 5, 3, None, 8);
    let t = Tape::new();
    let vars = r.store.register(&t);
    let bufs = BufferStore::default();
    let f = Fwd::new(&t, &vars, &bufs, false, 0);
    let acc = r.stream.zero_acc(&f, 2);
    let x = t.constant(Tensor::full(&[2, 4], 0.5));
    let (z, _) = r.stream.update(&f, acc, x, x);
    assert_eq!(t.shape(z), vec![2, 3]);
}

#[test]
fn decay_gradient_matches_differences() {
    let r = rig(4, 6, 3, None, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let xs: Vec<Tensor> = (0..4).map(|_| Tensor::from_fn(&[2, 4], |_| rng.random::<f64>())).collect();
    let bufs = BufferStore::default();
    let rep = check_params(&r.store, &bufs, &GradCheckOptions::default(), |f| {
        let mut acc = r.stream.zero_acc(f, 2);
        let mut total = f.t.scalar(0.0);
        for (k, x) in xs.iter().enumerate() {
            let xv = f.t.constant(x.clone());
            let (z, next) = r.stream.update(f, acc, xv, xv);
            acc = next;
            total = f.t.add(total, probe(f.t, z, k as u64));
        }
        total
    });
    assert!(rep.per_tensor[0] < 1e-4, "delta rel err {}", rep.per_tensor[0]);
    assert!(rep.max_rel_err < 1e-4, "{rep:?}");
}

proptest! {
    #[test]
    fn xi_positive_after_one_update(seed in 0u64..1000, delta in 0.0f64..15.0) {
        let mut r = rig(3, 5, 2, None, seed);
        *r.store.get_mut(r.stream.delta) = Tensor::full(&[5], delta);
        let (_, _, xi) = accumulate_all(&r, &[Tensor::full(&[1, 3], 0.3)]);
        prop_assert!(xi.data().iter().all(|&v| v > 0.0));
        prop_assert!(close(xi.data(), &[1.0; 5], 0.0));
    }
}
