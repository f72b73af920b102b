use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tide_core::autograd::{grad_check, GradCheckOptions, Tape, Tensor, Var};
use tide_core::objective::*;

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.shape()[0]).map(|i| t.row(i).to_vec()).collect()
}

fn rand_t(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

#[test]
fn curriculum_examples() {
    assert_eq!(curriculum(0.0, 1000.0, 5000.0), 0.0);
    assert_eq!(curriculum(999.0, 1000.0, 5000.0), 0.0);
    assert_eq!(curriculum(1000.0, 1000.0, 5000.0), 0.0);
    assert!((curriculum(3500.0, 1000.0, 5000.0) - 0.5).abs() < 1e-15);
    assert_eq!(curriculum(6000.0, 1000.0, 5000.0), 1.0);
    assert_eq!(curriculum(1e9, 1000.0, 5000.0), 1.0);
}

#[test]
fn ramp_residual_averages_three_eighths() {
    // composite Simpson on the ramp interval
    let (t_s, t_w) = (200.0, 800.0);
    let n = 2000;
    let h = t_w / n as f64;
    let g = |s: f64| (1.0 - curriculum(s, t_s, t_w)).powi(2);
    let mut acc = g(t_s) + g(t_s + t_w);
    for k in 1..n {
        acc += if k % 2 == 1 { 4.0 } else { 2.0 } * g(t_s + k as f64 * h);
    }
    let mean = acc * h / 3.0 / t_w;
    assert!((mean - 0.375).abs() < 1e-6, "{mean}");
}

proptest! {
    #[test]
    fn curriculum_monotone_and_bounded(a in 0.0f64..10_000.0, b in 0.0f64..10_000.0) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let (cl, ch) = (curriculum(lo, 1000.0, 5000.0), curriculum(hi, 1000.0, 5000.0));
        prop_assert!((0.0..=1.0).contains(&cl) && (0.0..=1.0).contains(&ch));
        prop_assert!(cl <= ch);
    }
}

#[test]
fn selection_examples() {
    assert_eq!(select_steps(&[2.0, 1.0, 1.0, 3.0], &[0.1, 0.9, 0.9, 0.2]), (1, 1));
    assert_eq!(select_steps(&[1.0, 1.0], &[0.5, 0.5]), (0, 0));
    assert_eq!(select_steps(&[3.0, 2.0, 1.0], &[0.9, 0.5, 0.1]), (2, 0));
    assert_eq!(task_loss(&[3.0, 2.0, 1.0], &[0.9, 0.5, 0.1]), 2.0);
    assert_eq!(task_loss(&[0.7], &[0.2]), 0.7);
}

#[test]
fn scalar_losses() {
    assert_eq!(ei_loss(4.0, 4.0), 0.0);
    assert_eq!(ei_loss(2.0, 4.0), 4.0);
    assert_eq!(ei_loss(1000.0, 4.0), EI_CLIP * EI_CLIP);
    assert_eq!(ei_loss(-1000.0, 4.0), EI_CLIP * EI_CLIP);
    assert_eq!(sync_loss(&[1.0, -1.0, 2.0, 0.0]), 1.5);
    assert_eq!(spec_loss(10.0, 5.0, 15.0, 7.0), 0.0);
    assert_eq!(spec_loss(17.0, 10.0, 15.0, 7.0), 13.0);
}

#[test]
fn total_respects_curriculum() {
    let w = LossWeights::default();
    let terms = LossTerms { task: 1.0, ei: 2.0, game: 3.0, sync: 4.0, spec: 5.0, ..Default::default() };
    assert!((total_loss(&terms, &w, 0) - (1.0 + 0.1 * 5.0)).abs() < 1e-15);
    let full = 1.0 + 1e-2 * 2.0 + 1e-3 * 3.0 + 1e-4 * 4.0 + 0.1 * 5.0;
    assert!((total_loss(&terms, &w, 10_000) - full).abs() < 1e-15);
    let mid = 1.0 + 0.5 * (1e-2 * 2.0 + 1e-3 * 3.0 + 1e-4 * 4.0) + 0.1 * 5.0;
    assert!((total_loss(&terms, &w, 3500) - mid).abs() < 1e-14);
}

#[test]
fn effective_scalar_example() {
    let w_ee = Tensor::new(&[2, 2], vec![1.0, 9.0, 9.0, 3.0]);
    let w_ii = Tensor::new(&[1, 1], vec![0.5]);
    let w_ei = Tensor::new(&[2, 1], vec![1.0, 2.0]);
    let w_ie = Tensor::new(&[1, 2], vec![4.0, 6.0]);
    assert_eq!(effective_scalars(&w_ee, &w_ei, &w_ie, &w_ii), (2.0, 1.5, 5.0, 0.5));
}

#[test]
fn energy_examples() {
    let bars = (0.5, 0.2, 0.3, 0.1);
    assert_eq!(game_energy(&[0.0; 3], &[0.0; 2], &[0.0; 3], &[0.0; 2], bars, 1.0, 1.0, 8), 0.0);
    let huge = game_energy(&[0.0; 3], &[0.0; 2], &[1e4; 3], &[0.0; 2], bars, 1.0, 1.0, 8);
    assert_eq!(huge, GAME_CLIP / 8.0);
    // one E and one I unit, written out
    let (r_e, r_i, u_e, u_i): (f64, f64, f64, f64) = (0.8, 0.3, 0.2, -0.1);
    let ee = ((0.5 - 1.0) * r_e - 0.2 * r_i + u_e).powi(2) / (2.0 * 0.5);
    let ei = (0.3 * r_e - (0.1 + 1.0) * r_i + u_i).powi(2) / (2.0 * 1.1);
    let got = game_energy(&[r_e], &[r_i], &[u_e], &[u_i], bars, 1.0, 1.0, 4);
    assert!((got - (ee + ei) / 4.0).abs() < 1e-15);
}

#[test]
fn energy_denominator_is_floored() {
    let bars = (2.0, 0.0, 0.0, 0.0);
    let got = game_energy(&[1.0], &[0.0], &[0.0], &[0.0], bars, 1.0, 1.0, 1);
    assert!((got - 1.0 / (2.0 * MIN_REGIME_GAP)).abs() < 1e-12);
}

#[test]
fn residual_examples() {
    let z = vec![vec![0.0; 2]];
    assert_eq!(game_residual(&[vec![1.0, 0.0]], &[vec![0.5]], &[vec![1.0, -3.0]], &[vec![0.5]], 3), 0.0);
    let got = game_residual(&[vec![1.0, 2.0]], &[vec![0.0, 0.0]], &[vec![0.0, -1.0]], &z, 2);
    assert_eq!(got, 2.5);
    assert_eq!(game_residual(&[vec![1e3]], &[vec![0.0]], &[vec![0.0]], &[vec![0.0]], 1), GAME_CLIP);
}

struct Batch {
    r_e: Tensor,
    r_i: Tensor,
    u_e: Tensor,
    u_i: Tensor,
    w: [Tensor; 4],
}

fn batch(seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Batch {
        r_e: rand_t(&[3, 4], 0.0, 1.0, &mut rng),
        r_i: rand_t(&[3, 2], 0.0, 1.0, &mut rng),
        u_e: rand_t(&[3, 4], -1.0, 1.0, &mut rng),
        u_i: rand_t(&[3, 2], -1.0, 1.0, &mut rng),
        w: [
            rand_t(&[4, 4], 0.0, 0.3, &mut rng),
            rand_t(&[4, 2], 0.0, 0.3, &mut rng),
            rand_t(&[2, 4], 0.0, 0.3, &mut rng),
            rand_t(&[2, 2], 0.0, 0.3, &mut rng),
        ],
    }
}

fn energy_tape(t: &Tape, b: &Batch, w: [Var; 4]) -> Var {
    let c = |x: &Tensor| t.constant(x.clone());
    game_energy_tape(t, c(&b.r_e), c(&b.r_i), c(&b.u_e), c(&b.u_i), w, 1.0, 1.0, 6)
}

#[test]
fn energy_tape_matches_plain() {
    let b = batch(1);
    let t = Tape::new();
    let w = b.w.clone().map(|x| t.constant(x));
    let got = t.item(energy_tape(&t, &b, w));
    let bars = effective_scalars(&b.w[0], &b.w[1], &b.w[2], &b.w[3]);
    let (re, ri, ue, ui) = (rows(&b.r_e), rows(&b.r_i), rows(&b.u_e), rows(&b.u_i));
    let want = (0..3).map(|k| game_energy(&re[k], &ri[k], &ue[k], &ui[k], bars, 1.0, 1.0, 6)).sum::<f64>() / 3.0;
    assert!((got - want).abs() < 1e-14);
}

#[test]
fn energy_gradient_matches_differences() {
    let b = batch(2);
    let rep = grad_check(|t: &Tape, v: &[Var]| energy_tape(t, &b, [v[0], v[1], v[2], v[3]]), &b.w, &GradCheckOptions::default());
    assert!(rep.max_rel_err < 1e-5, "{rep:?}");
}

#[test]
fn residual_tape_matches_plain() {
    let b = batch(3);
    let t = Tape::new();
    let c = |x: &Tensor| t.constant(x.clone());
    let got = t.item(game_residual_tape(&t, c(&b.r_e), c(&b.r_i), c(&b.u_e), c(&b.u_i), 6));
    let want = game_residual(&rows(&b.r_e), &rows(&b.r_i), &rows(&b.u_e), &rows(&b.u_i), 6);
    assert!((got - want).abs() < 1e-14);
}

#[test]
fn task_tape_matches_plain_and_replays() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let logits: Vec<Tensor> = (0..4).map(|_| rand_t(&[3, 5], -2.0, 2.0, &mut rng)).collect();
    let labels = [1, 4, 0];
    let t = Tape::new();
    let vars: Vec<Var> = logits.iter().map(|l| t.constant(l.clone())).collect();
    let (loss, sel) = task_loss_tape(&t, &vars, &labels, None);
    let mut want = 0.0;
    for (s, &y) in labels.iter().enumerate() {
        let ce: Vec<f64> = logits
            .iter()
            .map(|l| {
                let row = l.row(s);
                let mx = row.iter().cloned().fold(f64::MIN, f64::max);
                mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln() - row[y]
            })
            .collect();
        let cert: Vec<f64> = logits.iter().map(|l| tide_core::readout::certainty(l.row(s))).collect();
        assert_eq!(sel[s], select_steps(&ce, &cert));
        want += task_loss(&ce, &cert) / 3.0;
    }
    assert!((t.item(loss) - want).abs() < 1e-12);
    let forced = vec![(3, 3); 3];
    let (again, kept) = task_loss_tape(&t, &vars, &labels, Some(&forced));
    assert_eq!(kept, forced);
    let last = t.cross_entropy_rows(vars[3], &labels);
    assert!((t.item(again) - t.value(last).mean()).abs() < 1e-12);
}

#[test]
fn ei_and_spec_tapes_match_plain() {
    let t = Tape::new();
    let rho = t.constant(Tensor::new(&[3], vec![3.0, 4.5, 100.0]));
    let want = (ei_loss(3.0, 4.0) + ei_loss(4.5, 4.0) + ei_loss(100.0, 4.0)) / 3.0;
    assert!((t.item(ei_loss_tape(&t, rho, 4.0)) - want).abs() < 1e-12);
    let s = spec_loss_tape(&t, t.scalar(17.0), t.scalar(10.0), 15.0, 7.0);
    assert_eq!(t.item(s), 13.0);
    let z = t.constant(Tensor::new(&[2, 2], vec![1.0, -1.0, 2.0, 0.0]));
    assert_eq!(t.item(sync_loss_tape(&t, z)), 1.5);
}

#[test]
fn weights_reject_unknown_keys() {
    let w: LossWeights = toml::from_str("lambda_ei = 0.5").unwrap();
    assert_eq!(w.lambda_ei, 0.5);
    assert_eq!(w.rho_star, 4.0);
    assert!(toml::from_str::<LossWeights>("lambda_eii = 0.5").is_err());
}
