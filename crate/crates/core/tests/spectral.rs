use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tide_core::autograd::{grad_check, GradCheckOptions, Tape, Tensor};
use tide_core::dale::DaleWeightSet;
use tide_core::dynamics::simulate_linear;
use tide_core::spectral::*;

fn to_na(w: &Tensor) -> DMatrix<f64> {
    let (r, c) = (w.shape()[0], w.shape()[1]);
    DMatrix::from_row_slice(r, c, w.data())
}

/// Dominant eigenvalue modulus and the gap to the next one.
fn dominant(w: &Tensor) -> (f64, f64) {
    let mut mods: Vec<f64> = to_na(w).complex_eigenvalues().iter().map(|z| z.norm()).collect();
    mods.sort_by(|a, b| b.partial_cmp(a).unwrap());
    (mods[0], mods[0] - mods.get(1).copied().unwrap_or(0.0))
}

fn op_norm(w: &Tensor) -> f64 {
    to_na(w).singular_values().max()
}

#[test]
fn perron_examples() {
    for n in [1, 3, 7] {
        let eye = Tensor::from_fn(&[n, n], |k| if k / n == k % n { 1.0 } else { 0.0 });
        for k in [0, 1, 10, 50] {
            assert!((perron_sum_ratio(&eye, k) - 1.0).abs() < 1e-14);
        }
    }
    assert!((perron_sum_ratio(&Tensor::full(&[3, 3], 1.0), 10) - 3.0).abs() < 1e-14);
    assert_eq!(perron_sum_ratio(&Tensor::zeros(&[4, 4]), 10), 0.0);
}

#[test]
fn perron_matches_eigensolver() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut tested = 0;
    while tested < 20 {
        let w = Tensor::from_fn(&[8, 8], |_| rng.random::<f64>());
        let (lam, gap) = dominant(&w);
        if gap < 0.1 {
            continue;
        }
        let est = perron_sum_ratio(&w, 200);
        assert!((est - lam).abs() < 1e-6, "{est} vs {lam}");
        assert!(est <= op_norm(&w) + 1e-9);
        tested += 1;
    }
}

#[test]
fn perron_equals_norm_when_symmetric() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10 {
        let a = Tensor::from_fn(&[6, 6], |_| rng.random::<f64>());
        let s = Tensor::from_fn(&[6, 6], |k| a.data()[k] + a.at(&[k % 6, k / 6]));
        assert!((perron_sum_ratio(&s, 500) - op_norm(&s)).abs() < 1e-9);
    }
}

#[test]
fn perron_gradient_matches_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..3 {
        let w = Tensor::from_fn(&[5, 5], |_| 0.1 + rng.random::<f64>());
        let err = grad_check(|t: &Tape, v: &[_]| perron_sum_ratio_tape(t, v[0], 10), &[w], &GradCheckOptions::default()).max_rel_err;
        assert!(err < 1e-5, "rel err {err}");
        let t = Tape::new();
        let x = t.leaf(Tensor::from_fn(&[5, 5], |_| 0.1 + rng.random::<f64>()));
        let plain = perron_sum_ratio(&t.value(x), 10);
        assert!((t.item(perron_sum_ratio_tape(&t, x, 10)) - plain).abs() < 1e-12);
    }
}

#[test]
fn lds_examples() {
    let (ok, lam) = lds_test(&Tensor::zeros(&[4, 4]));
    assert!(ok && (lam + 1.0).abs() < 1e-12);
    let two = Tensor::from_fn(&[3, 3], |k| if k % 4 == 0 { 2.0 } else { 0.0 });
    let (ok, lam) = lds_test(&two);
    assert!(!ok && (lam - 1.0).abs() < 1e-12);
}

fn random_orthogonal(n: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
    a.qr().q()
}

#[test]
fn lds_lambda_matches_construction() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10 {
        let n = 6;
        let q = random_orthogonal(n, &mut rng);
        let eig: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let w = &q * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(eig.clone())) * q.transpose();
        let t = Tensor::from_fn(&[n, n], |k| w[(k / n, k % n)]);
        let want = eig.iter().cloned().fold(f64::MIN, f64::max) - 1.0;
        let (ok, lam) = lds_test(&t);
        assert!((lam - want).abs() < 1e-8, "{lam} vs {want}");
        assert_eq!(ok, want < 0.0);
    }
}

#[test]
fn schur_examples() {
    assert!((schur_dt_bound(&[(-1.0, 0.0)]).unwrap() - 2.0).abs() < 1e-15);
    assert!((schur_dt_bound(&[(-1.0, 1.0), (-1.0, -1.0)]).unwrap() - 1.0).abs() < 1e-15);
    assert!(schur_dt_bound(&[(-1.0, 0.0), (0.0, 2.0)]).is_err());
    assert!(schur_dt_bound(&[(0.3, 0.0)]).is_err());
}

#[test]
fn lyapunov_examples() {
    assert_eq!(lyapunov_value(&[1.0, 2.0], &[1.0, 2.0], &[3.0, 4.0]), 0.0);
    assert!((lyapunov_value(&[3.0, 4.0], &[0.0, 0.0], &[1.0, 1.0]) - 12.5).abs() < 1e-15);
}

#[test]
fn lyapunov_decreases_along_lds_trajectory() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut done = 0;
    while done < 5 {
        let w = Tensor::from_fn(&[6, 6], |_| rng.random_range(-0.3..0.3));
        if !lds_test(&w).0 {
            continue;
        }
        let b: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x0: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
        let a = to_na(&w) - DMatrix::identity(6, 6);
        let x_star = a.clone().lu().solve(&(-nalgebra::DVector::from_vec(b.clone()))).unwrap();
        let traj = simulate_linear(&w, &b, &x0, 0.05, 400);
        let ones = vec![1.0; 6];
        let vs: Vec<f64> = traj.iter().map(|x| lyapunov_value(x, x_star.as_slice(), &ones)).collect();
        for k in 1..vs.len() {
            if vs[k - 1] > 1e-20 {
                assert!(vs[k] < vs[k - 1], "V rose at step {k}");
            }
        }
        done += 1;
    }
}

#[test]
fn sigma_max_matches_svd() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let w = Tensor::from_fn(&[7, 3], |_| rng.random::<f64>());
    assert!((sigma_max(&w, 200) - op_norm(&w)).abs() < 1e-8);
    assert_eq!(sigma_max(&Tensor::zeros(&[2, 2]), 20), 0.0);
}

#[test]
fn isolated_bounds() {
    assert!(isolated_e_stable(0.9) && !isolated_e_stable(1.1));
    assert!(isolated_i_stable(8.0, 0.2) && !isolated_i_stable(10.0, 0.2));
}

#[test]
fn report_fields() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = DaleWeightSet::random(8, 2, 4, &mut rng);
    let r = SpectralReport::compute(&w, 0.2, 300).unwrap();
    assert_eq!(r.step, 300);
    assert!(r.perron_ee >= 0.0 && r.perron_ii >= 0.0 && r.sigma_max_ei >= 0.0 && r.sigma_max_ie >= 0.0);
    let j = serde_json::to_value(&r).unwrap();
    assert!(j.get("lds_lambda_max").is_some());
}

proptest! {
    #[test]
    fn perron_nonneg_and_bounded(d in prop::collection::vec(0.0f64..3.0, 16)) {
        let w = Tensor::new(&[4, 4], d);
        let p = perron_sum_ratio(&w, 10);
        prop_assert!(p >= 0.0);
        prop_assert!(p <= op_norm(&w) + 1e-9);
    }
}
