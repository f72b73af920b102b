//! Non-negative weight blocks and the sign-masked effective matrix.

use rand::Rng;
use tide_autograd::Tensor;

use crate::error::{dim_err, Result, TideError};

/// `(n_E, n_I)` with `n_E = floor(0.8 * d_model)`.
pub fn split_populations(d_model: usize) -> (usize, usize) {
    let n_e = (d_model * 4) / 5;
    (n_e, d_model - n_e)
}

/// Element-wise `max(w, 0)`.
pub fn project_dale(w: &Tensor) -> Tensor {
    w.map(|x| x.max(0.0))
}

pub fn project_dale_inplace(w: &mut Tensor) {
    for x in w.data_mut() {
        *x = x.max(0.0);
    }
}

/// Uniform on `[0, 1/sqrt(fan_in)]` for a block stored `[rows, fan_in]`.
pub fn dale_uniform(rows: usize, fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let hi = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(&[rows, fan_in], |_| rng.random::<f64>() * hi)
}

/// The four recurrent blocks plus the drive projections. Blocks are stored
/// `[post, pre]`, so `W_EE r_E` is a plain matrix-vector product.
#[derive(Clone, Debug, PartialEq)]
pub struct DaleWeightSet {
    pub w_ee: Tensor,
    pub w_ei: Tensor,
    pub w_ie: Tensor,
    pub w_ii: Tensor,
    pub w_e_in: Tensor,
    pub w_i_in: Tensor,
}

impl DaleWeightSet {
    pub fn random(n_e: usize, n_i: usize, d_sync: usize, rng: &mut impl Rng) -> Self {
        let hi = 1.0 / (d_sync.max(1) as f64).sqrt();
        let mut sym = |r: usize, c: usize| Tensor::from_fn(&[r, c], |_| (rng.random::<f64>() * 2.0 - 1.0) * hi);
        let w_e_in = sym(n_e, d_sync);
        let w_i_in = sym(n_i, d_sync);
        Self {
            w_ee: dale_uniform(n_e, n_e, rng),
            w_ei: dale_uniform(n_e, n_i, rng),
            w_ie: dale_uniform(n_i, n_e, rng),
            w_ii: dale_uniform(n_i, n_i, rng),
            w_e_in,
            w_i_in,
        }
    }

    pub fn n_e(&self) -> usize {
        self.w_ee.shape()[0]
    }

    pub fn n_i(&self) -> usize {
        self.w_ii.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        let (ne, ni) = (self.n_e(), self.n_i());
        let want = [
            ("w_ee", &self.w_ee, [ne, ne]),
            ("w_ei", &self.w_ei, [ne, ni]),
            ("w_ie", &self.w_ie, [ni, ne]),
            ("w_ii", &self.w_ii, [ni, ni]),
        ];
        for (name, t, s) in want {
            if t.shape() != s {
                return dim_err(format!("{name} has shape {:?}, expected {s:?}", t.shape()));
            }
        }
        if self.w_e_in.shape()[0] != ne || self.w_i_in.shape()[0] != ni || self.w_e_in.shape()[1] != self.w_i_in.shape()[1] {
            return dim_err("drive projections do not match population sizes");
        }
        Ok(())
    }

    /// Smallest entry over the four constrained blocks.
    pub fn min_entry(&self) -> f64 {
        [&self.w_ee, &self.w_ei, &self.w_ie, &self.w_ii].iter().map(|t| t.min()).fold(f64::INFINITY, f64::min)
    }

    pub fn project(&mut self) {
        for t in [&mut self.w_ee, &mut self.w_ei, &mut self.w_ie, &mut self.w_ii] {
            project_dale_inplace(t);
        }
    }
}

/// Column signs of the effective matrix: `+1` for excitatory presynaptic
/// neurons, `-1` for inhibitory ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SignMask {
    pub n_e: usize,
    pub n_i: usize,
}

impl SignMask {
    pub fn sign(&self, col: usize) -> f64 {
        if col < self.n_e {
            1.0
        } else {
            -1.0
        }
    }

    pub fn matrix(&self) -> Tensor {
        let d = self.n_e + self.n_i;
        Tensor::from_fn(&[d, d], |i| self.sign(i % d))
    }
}

/// `[[W_EE, -W_EI], [W_IE, -W_II]]`.
pub fn compose_effective(w: &DaleWeightSet) -> Result<Tensor> {
    compose_blocks(&w.w_ee, &w.w_ei, &w.w_ie, &w.w_ii)
}

pub fn compose_blocks(ee: &Tensor, ei: &Tensor, ie: &Tensor, ii: &Tensor) -> Result<Tensor> {
    let (ne, ni) = (ee.shape()[0], ii.shape()[0]);
    if ee.shape() != [ne, ne] || ei.shape() != [ne, ni] || ie.shape() != [ni, ne] || ii.shape() != [ni, ni] {
        return dim_err(format!(
            "blocks {:?} {:?} {:?} {:?} do not tile a square matrix",
            ee.shape(),
            ei.shape(),
            ie.shape(),
            ii.shape()
        ));
    }
    let d = ne + ni;
    let mut out = Tensor::zeros(&[d, d]);
    for r in 0..d {
        for c in 0..d {
            let v = match (r < ne, c < ne) {
                (true, true) => ee.at(&[r, c]),
                (true, false) => -ei.at(&[r, c - ne]),
                (false, true) => ie.at(&[r - ne, c]),
                (false, false) => -ii.at(&[r - ne, c - ne]),
            };
            out.set(&[r, c], v);
        }
    }
    Ok(out)
}

/// Inverse of [`compose_blocks`]: magnitudes of the four blocks.
pub fn split_effective(w_eff: &Tensor, n_e: usize) -> (Tensor, Tensor, Tensor, Tensor) {
    let d = w_eff.shape()[0];
    let ni = d - n_e;
    let blk = |r0: usize, c0: usize, r: usize, c: usize| Tensor::from_fn(&[r, c], |i| w_eff.at(&[r0 + i / c, c0 + i % c]).abs());
    (blk(0, 0, n_e, n_e), blk(0, n_e, n_e, ni), blk(n_e, 0, ni, n_e), blk(n_e, n_e, ni, ni))
}

/// `project_dale(w - lr * grad)`.
pub fn projected_gradient_step(w: &Tensor, grad: &Tensor, lr: f64) -> Result<Tensor> {
    if w.shape() != grad.shape() {
        return dim_err(format!("weight {:?} vs gradient {:?}", w.shape(), grad.shape()));
    }
    if !grad.all_finite() {
        return Err(TideError::NonFinite("gradient".into()));
    }
    Ok(w.zip_map(grad, |a, g| (a - lr * g).max(0.0)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_clamps_negatives() {
        let w = Tensor::new(&[2, 2], vec![1.0, -2.0, 0.5, 0.0]);
        assert_eq!(project_dale(&w).data(), &[1.0, 0.0, 0.5, 0.0]);
    }

    #[test]
    fn scalar_blocks_compose_with_signs() {
        let s = |v| Tensor::new(&[1, 1], vec![v]);
        let w = compose_blocks(&s(2.0), &s(3.0), &s(1.0), &s(4.0)).unwrap();
        assert_eq!(w.data(), &[2.0, -3.0, 1.0, -4.0]);
    }

    #[test]
    fn mismatched_blocks_are_rejected() {
        let z = |r, c| Tensor::zeros(&[r, c]);
        assert!(compose_blocks(&z(2, 2), &z(2, 1), &z(1, 2), &z(2, 2)).is_err());
    }

    #[test]
    fn gradient_step_examples() {
        let w = Tensor::new(&[1, 1], vec![1.0]);
        assert_eq!(projected_gradient_step(&w, &Tensor::new(&[1, 1], vec![2.0]), 1.0).unwrap().data(), &[0.0]);
        assert_eq!(projected_gradient_step(&w, &Tensor::zeros(&[1, 1]), 1.0).unwrap(), w);
        assert!(projected_gradient_step(&w, &Tensor::new(&[1, 1], vec![f64::NAN]), 1.0).is_err());
    }

    #[test]
    fn population_split() {
        assert_eq!(split_populations(256), (204, 52));
        assert_eq!(split_populations(64), (51, 13));
        assert_eq!(split_populations(5), (4, 1));
    }
}
