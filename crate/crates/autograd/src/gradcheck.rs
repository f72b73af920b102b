//! Central-difference verification of tape gradients.

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Denominator floor for the relative error, so that gradients at the
    /// finite-difference noise level are compared absolutely.
    pub floor: f64,
    /// Coordinates whose perturbation by `kink_probe * eps` moves any ReLU,
    /// clamp or abs input across its kink are skipped.
    pub kink_probe: f64,
    /// Check at most this many coordinates per tensor (evenly strided).
    pub max_coords: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { eps: 1e-5, floor: 1e-6, kink_probe: 10.0, max_coords: usize::MAX }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(tensor, coordinate, analytic, numeric)` at the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
    pub skipped_kinks: usize,
    /// Largest relative error per input tensor.
    pub per_tensor: Vec<f64>,
}

fn eval<F>(f: &F, params: &[Tensor], track: bool) -> (f64, Option<Vec<u8>>)
where
    F: Fn(&Tape, &[Var]) -> Var,
{
    let tape = Tape::new();
    if track {
        tape.track_kinks();
    }
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let out = f(&tape, &vars);
    (tape.item(out), tape.kink_signature())
}

/// Compare the tape gradient of the scalar built by `f` against central
/// differences in every coordinate of `params`.
pub fn grad_check<F>(f: F, params: &[Tensor], opts: &GradCheckOptions) -> GradCheckReport
where
    F: Fn(&Tape, &[Var]) -> Var,
{
    let tape = Tape::new();
    tape.track_kinks();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&tape, &vars);
    let base_sig = tape.kink_signature();
    let grads = tape.backward(out);
    let analytic: Vec<Tensor> =
        vars.iter().zip(params).map(|(v, p)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape()))).collect();
    drop(tape);

    let mut report = GradCheckReport { per_tensor: vec![0.0; params.len()], ..Default::default() };
    let mut work: Vec<Tensor> = params.to_vec();
    for (ti, p) in params.iter().enumerate() {
        let stride = p.len().div_ceil(opts.max_coords.max(1)).max(1);
        for ci in (0..p.len()).step_by(stride) {
            let x0 = p.data()[ci];
            let probe = opts.eps * opts.kink_probe;
            work[ti].data_mut()[ci] = x0 + probe;
            let (_, s_hi) = eval(&f, &work, true);
            work[ti].data_mut()[ci] = x0 - probe;
            let (_, s_lo) = eval(&f, &work, true);
            if s_hi != base_sig || s_lo != base_sig {
                report.skipped_kinks += 1;
                work[ti].data_mut()[ci] = x0;
                continue;
            }
            work[ti].data_mut()[ci] = x0 + opts.eps;
            let (fp, _) = eval(&f, &work, false);
            work[ti].data_mut()[ci] = x0 - opts.eps;
            let (fm, _) = eval(&f, &work, false);
            work[ti].data_mut()[ci] = x0;
            let num = (fp - fm) / (2.0 * opts.eps);
            let ana = analytic[ti].data()[ci];
            let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(opts.floor);
            report.checked += 1;
            report.per_tensor[ti] = report.per_tensor[ti].max(rel);
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                if rel >= report.max_rel_err {
                    report.worst = Some((ti, ci, ana, num));
                }
            }
        }
    }
    report
}
