mod common;

use common::{check_params, probe};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tide_core::autograd::{GradCheckOptions, Tape, Tensor};
use tide_core::backbone::*;
use tide_core::params::{BufferStore, Fwd, ParamStore};

/// Direct seven-loop convolution with zero padding.
fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (b, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[b, co, ho, wo]);
    for n in 0..b {
        for o in 0..co {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for di in 0..k {
                            for dj in 0..k {
                                let (y, xx) = ((i * stride + di) as isize - pad as isize, (j * stride + dj) as isize - pad as isize);
                                if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < wd {
                                    acc += x.at(&[n, ci, y as usize, xx as usize]) * w.at(&[o, ci, di, dj]);
                                }
                            }
                        }
                    }
                    out.set(&[n, o, i, j], acc);
                }
            }
        }
    }
    out
}

#[test]
fn conv_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (stride, pad, k) in [(1, 0, 3), (1, 1, 3), (2, 1, 3), (1, 2, 5), (3, 0, 1)] {
        let x = Tensor::from_fn(&[2, 3, 9, 7], |_| rng.random_range(-1.0..1.0));
        let w = Tensor::from_fn(&[4, 3, k, k], |_| rng.random_range(-1.0..1.0));
        let t = Tape::new();
        let got = t.conv2d(t.constant(x.clone()), t.constant(w.clone()), stride, pad);
        let want = naive_conv(&x, &w, stride, pad);
        assert_eq!(t.shape(got), want.shape().to_vec());
        for (a, b) in t.value(got).data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

fn branch(scale: usize, c_in: usize, c_out: usize, seed: u64) -> (ParamStore, BufferStore, CenterSurround) {
    let mut store = ParamStore::new();
    let mut bufs = BufferStore::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cs = CenterSurround::new(&mut store, &mut bufs, "cs", scale, c_in, c_out, 0.5, &mut rng);
    (store, bufs, cs)
}

fn raw(store: &ParamStore, bufs: &BufferStore, cs: &CenterSurround, x: &Tensor) -> Tensor {
    let t = Tape::new();
    let vars = store.register(&t);
    let f = Fwd::new(&t, &vars, bufs, false, 0);
    let out = cs.raw(&f, t.constant(x.clone())).unwrap();
    (*t.value(out)).clone()
}

#[test]
fn surround_always_wider_than_center() {
    for s in SCALES {
        let (_, _, cs) = branch(s, 2, 2, 0);
        assert_eq!(cs.k_s, 2 * s + 1);
        assert!(cs.k_s > cs.k_c);
    }
}

#[test]
fn balanced_dog_cancels_constant_input() {
    for s in SCALES {
        let (mut store, bufs, cs) = branch(s, 3, 2, 1);
        cs.dog_init(&mut store, 1.0, 1.0);
        let n = 2 * cs.k_s + 3;
        let out = raw(&store, &bufs, &cs, &Tensor::full(&[1, 3, n, n], 2.5));
        let m = cs.k_s / 2;
        for i in m..n - m {
            for j in m..n - m {
                for o in 0..2 {
                    assert!(out.at(&[0, o, i, j]).abs() < 1e-12);
                }
            }
        }
    }
}

fn rot90(x: &Tensor) -> Tensor {
    let (c, n) = (x.shape()[1], x.shape()[2]);
    Tensor::from_fn(&[1, c, n, n], |k| {
        let (ch, i, j) = (k / (n * n), (k / n) % n, k % n);
        x.at(&[0, ch, j, n - 1 - i])
    })
}

fn shift(x: &Tensor, dy: usize, dx: usize) -> Tensor {
    let (c, n) = (x.shape()[1], x.shape()[2]);
    Tensor::from_fn(&[1, c, n, n], |k| {
        let (ch, i, j) = (k / (n * n), (k / n) % n, k % n);
        if i >= dy && j >= dx {
            x.at(&[0, ch, i - dy, j - dx])
        } else {
            0.0
        }
    })
}

/// Random image supported on the central `n − 2·margin` square.
fn blob(c: usize, n: usize, margin: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(&[1, c, n, n], |k| {
        let (i, j) = ((k / n) % n, k % n);
        if (margin..n - margin).contains(&i) && (margin..n - margin).contains(&j) {
            rng.random::<f64>()
        } else {
            0.0
        }
    })
}

#[test]
fn dog_commutes_with_shift_and_rotation() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for s in SCALES {
        let (mut store, bufs, cs) = branch(s, 2, 3, 3);
        cs.dog_init(&mut store, 1.0, 1.0);
        let n = 24;
        let x = blob(2, n, 9, &mut rng);
        let y = raw(&store, &bufs, &cs, &x);
        let rotated = raw(&store, &bufs, &cs, &rot90(&x));
        let shifted = raw(&store, &bufs, &cs, &shift(&x, 2, 3));
        for (a, b) in rot90(&y).data().iter().zip(rotated.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in shift(&y, 2, 3).data().iter().zip(shifted.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn dog_freezes_filters() {
    let (mut store, _, cs) = branch(2, 1, 1, 4);
    cs.dog_init(&mut store, 0.8, 2.0);
    for id in [cs.center, cs.surround, cs.w_c, cs.w_s] {
        assert!(!store.param(id).trainable);
    }
    assert_eq!(store.get(cs.w_s).item(), 2.0);
    assert!((store.get(cs.surround).sum() - 1.0).abs() < 1e-12);
}

#[test]
fn branch_gradient_matches_differences() {
    let (store, bufs, cs) = branch(2, 2, 2, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = Tensor::from_fn(&[1, 2, 6, 6], |_| rng.random_range(-1.0..1.0));
    let rep = check_params(&store, &bufs, &GradCheckOptions::default(), |f| probe(f.t, cs.raw(f, f.t.constant(x.clone())).unwrap(), 1));
    assert!(rep.max_rel_err < 1e-4, "{rep:?}");
}

#[test]
fn positional_encoding_examples() {
    let pe = positional_encoding_2d(4, 8);
    assert_eq!(pe.shape(), &[16, 8]);
    assert_eq!(&pe.row(0)[..], &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    assert!((pe.at(&[4, 0]) - 1f64.sin()).abs() < 1e-15);
    assert!((pe.at(&[1, 4]) - 1f64.sin()).abs() < 1e-15);
    for i in 0..16 {
        for j in 0..i {
            assert_ne!(pe.row(i), pe.row(j));
        }
    }
}

proptest! {
    #[test]
    fn positional_encoding_bounded(grid in 1usize..10, dim in 2usize..40) {
        let pe = positional_encoding_2d(grid, dim);
        prop_assert!(pe.data().iter().all(|v| v.abs() <= 1.0));
    }
}

#[test]
fn shape_gate() {
    let cfg = BackboneConfig::default();
    assert!(check_shape(&cfg, [1, 28, 28]).is_ok());
    assert!(check_shape(&cfg, [3, 32, 32]).is_ok());
    assert!(check_shape(&cfg, [1, 4, 4]).is_err());
    assert!(check_shape(&BackboneConfig { allow_custom_shape: true, ..cfg }, [1, 4, 4]).is_ok());
}

#[test]
fn token_shapes() {
    let cfg = BackboneConfig { stem_channels: 4, branch_channels: 2, agg_channels: 6, grid: 3, stem_stride: 2, ..Default::default() };
    let mut store = ParamStore::new();
    let mut bufs = BufferStore::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let bb = Backbone::new(&mut store, &mut bufs, &cfg, [1, 28, 28], 5, &mut rng).unwrap();
    assert_eq!(bb.tokens(), 9);
    let t = Tape::new();
    let vars = store.register(&t);
    let f = Fwd::new(&t, &vars, &bufs, true, 0);
    let out = bb.forward(&f, t.constant(Tensor::from_fn(&[2, 1, 28, 28], |_| rng.random::<f64>()))).unwrap();
    assert_eq!(t.shape(out.keys), vec![2, 9, 5]);
    assert_eq!(t.shape(out.values), vec![2, 9, 5]);
    assert!(bb.forward(&f, t.constant(Tensor::zeros(&[2, 3, 32, 32]))).is_err());
}
