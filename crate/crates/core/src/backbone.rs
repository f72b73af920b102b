//! Shallow hierarchical-receptive-field backbone: stem, multi-scale
//! center-surround bank, aggregation, token grid with positional encoding
//! and key/value projections.

use rand::Rng;
use serde::{Deserialize, Serialize};
use tide_autograd::{channel_stats, Tensor, Var};

use crate::error::{dim_err, Result};
use crate::params::{uniform_fan_in, BufferId, BufferStore, Constraint, Fwd, Linear, ParamId, ParamStore};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const SCALES: [usize; 4] = [1, 2, 4, 8];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub stem_channels: usize,
    pub branch_channels: usize,
    pub agg_channels: usize,
    pub grid: usize,
    /// Stride of the first stem convolution.
    pub stem_stride: usize,
    /// Initial surround gain `w_s`.
    pub surround_gain: f64,
    /// Accept inputs other than 1×28×28 and 3×32×32.
    pub allow_custom_shape: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stem_channels: 32,
            branch_channels: 32,
            agg_channels: 128,
            grid: 8,
            stem_stride: 1,
            surround_gain: 0.5,
            allow_custom_shape: false,
        }
    }
}

/// Conv weights `[c_out, c_in, k, k]`, uniform fan-in init.
fn conv_weight(store: &mut ParamStore, name: &str, c_out: usize, c_in: usize, k: usize, rng: &mut impl Rng) -> ParamId {
    store.add(name, uniform_fan_in(&[c_out, c_in, k, k], c_in * k * k, rng), Constraint::None)
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, bufs: &mut BufferStore, name: &str, c: usize) -> Self {
        Self {
            gamma: store.add(&format!("{name}.gamma"), Tensor::full(&[c], 1.0), Constraint::None),
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(&[c]), Constraint::None),
            running_mean: bufs.add(&format!("{name}.running_mean"), Tensor::zeros(&[c])),
            running_var: bufs.add(&format!("{name}.running_var"), Tensor::full(&[c], 1.0)),
            channels: c,
        }
    }

    /// Batch statistics in training (running stats are staged), running
    /// statistics otherwise.
    pub fn forward(&self, f: &Fwd, x: Var) -> Var {
        let t = f.t;
        let c = self.channels;
        if f.train {
            let xv = t.value(x);
            let s = xv.shape();
            let n = (s[0] * s[2] * s[3]) as f64;
            let (m, v) = channel_stats(&xv);
            let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let rm = f.bufs.get(self.running_mean);
            let rv = f.bufs.get(self.running_var);
            let new_m = Tensor::from_fn(&[c], |i| (1.0 - BN_MOMENTUM) * rm.data()[i] + BN_MOMENTUM * m[i]);
            let new_v = Tensor::from_fn(&[c], |i| (1.0 - BN_MOMENTUM) * rv.data()[i] + BN_MOMENTUM * v[i] * unbias);
            f.stage(self.running_mean, new_m);
            f.stage(self.running_var, new_v);
            t.batch_norm2d(x, f.w(self.gamma), f.w(self.beta), BN_EPS)
        } else {
            let rm = f.bufs.get(self.running_mean);
            let rv = f.bufs.get(self.running_var);
            let mean = t.constant(Tensor::new(&[1, c, 1, 1], rm.data().to_vec()));
            let inv = t.constant(Tensor::from_fn(&[1, c, 1, 1], |i| 1.0 / (rv.data()[i] + BN_EPS).sqrt()));
            let g = t.reshape(f.w(self.gamma), &[1, c, 1, 1]);
            let b = t.reshape(f.w(self.beta), &[1, c, 1, 1]);
            t.add(t.mul(t.mul(t.sub(x, mean), inv), g), b)
        }
    }
}

/// Conv (no bias) → BN → ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub w: ParamId,
    pub bn: BatchNorm,
    pub stride: usize,
    pub pad: usize,
}

impl ConvBnRelu {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        bufs: &mut BufferStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            w: conv_weight(store, &format!("{name}.w"), c_out, c_in, k, rng),
            bn: BatchNorm::new(store, bufs, &format!("{name}.bn"), c_out),
            stride,
            pad: k / 2,
        }
    }

    pub fn forward(&self, f: &Fwd, x: Var) -> Var {
        let c = f.t.conv2d(x, f.w(self.w), self.stride, self.pad);
        f.t.relu(self.bn.forward(f, c))
    }
}

/// Discretised isotropic Gaussian on a `k×k` grid, normalised to sum 1.
pub fn gaussian_kernel(k: usize, sigma: f64) -> Vec<f64> {
    let c = (k as f64 - 1.0) / 2.0;
    let mut g: Vec<f64> = (0..k * k)
        .map(|i| {
            let (y, x) = ((i / k) as f64 - c, (i % k) as f64 - c);
            (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// `w_c · C(x) − w_s · S(x)` followed by BN and ReLU.
#[derive(Clone, Debug)]
pub struct CenterSurround {
    pub scale: usize,
    pub k_c: usize,
    pub k_s: usize,
    pub center: ParamId,
    pub surround: ParamId,
    pub w_c: ParamId,
    pub w_s: ParamId,
    pub bn: BatchNorm,
    pub c_in: usize,
    pub c_out: usize,
}

impl CenterSurround {
    /// The center kernel is 3×3 except at scale 1, where it is 1×1 so the
    /// surround (3×3) stays strictly larger.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        bufs: &mut BufferStore,
        name: &str,
        scale: usize,
        c_in: usize,
        c_out: usize,
        surround_gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let k_s = 2 * scale + 1;
        let k_c = if scale == 1 { 1 } else { 3 };
        Self {
            scale,
            k_c,
            k_s,
            center: conv_weight(store, &format!("{name}.center"), c_out, c_in, k_c, rng),
            surround: conv_weight(store, &format!("{name}.surround"), c_out, c_in, k_s, rng),
            w_c: store.add(&format!("{name}.w_c"), Tensor::new(&[1], vec![1.0]), Constraint::None),
            w_s: store.add(&format!("{name}.w_s"), Tensor::new(&[1], vec![surround_gain]), Constraint::None),
            bn: BatchNorm::new(store, bufs, &format!("{name}.bn"), c_out),
            c_in,
            c_out,
        }
    }

    /// Pre-normalisation difference `w_c C(x) − w_s S(x)`, same spatial size.
    pub fn raw(&self, f: &Fwd, x: Var) -> Result<Var> {
        let s = f.t.shape(x);
        if s.len() != 4 || s[1] != self.c_in {
            return dim_err(format!("center-surround input {s:?} vs {} channels", self.c_in));
        }
        let t = f.t;
        let c = t.conv2d(x, f.w(self.center), 1, self.k_c / 2);
        let sr = t.conv2d(x, f.w(self.surround), 1, self.k_s / 2);
        Ok(t.sub(t.mul(f.w(self.w_c), c), t.mul(f.w(self.w_s), sr)))
    }

    pub fn forward(&self, f: &Fwd, x: Var) -> Result<Var> {
        let r = self.raw(f, x)?;
        Ok(f.t.relu(self.bn.forward(f, r)))
    }

    /// Difference-of-Gaussians: center `G_σ`, surround `G_{κσ}`, gains
    /// `(1, κ)`, every channel pair sharing `G / c_in`. Filters and gains
    /// become non-trainable.
    pub fn dog_init(&self, store: &mut ParamStore, sigma: f64, kappa: f64) {
        let fill = |k: usize, sig: f64| {
            let g = gaussian_kernel(k, sig);
            Tensor::from_fn(&[self.c_out, self.c_in, k, k], |i| g[i % (k * k)] / self.c_in as f64)
        };
        *store.get_mut(self.center) = fill(self.k_c, sigma);
        *store.get_mut(self.surround) = fill(self.k_s, kappa * sigma);
        *store.get_mut(self.w_c) = Tensor::new(&[1], vec![1.0]);
        *store.get_mut(self.w_s) = Tensor::new(&[1], vec![kappa]);
        for id in [self.center, self.surround, self.w_c, self.w_s] {
            store.param_mut(id).trainable = false;
        }
    }
}

/// Fixed 2-D sinusoidal encoding `[grid², dim]`: the first half of the
/// channels encodes the row, the second half the column.
pub fn positional_encoding_2d(grid: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let enc = |pos: f64, c: usize, width: usize| {
        let k = (c / 2) as f64;
        let freq = 1.0 / 10000f64.powf(2.0 * k / width.max(1) as f64);
        if c % 2 == 0 {
            (pos * freq).sin()
        } else {
            (pos * freq).cos()
        }
    };
    Tensor::from_fn(&[grid * grid, dim], |i| {
        let (p, c) = (i / dim, i % dim);
        let (row, col) = ((p / grid) as f64, (p % grid) as f64);
        if c < half {
            enc(row, c, half)
        } else {
            enc(col, c - half, dim - half)
        }
    })
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub in_shape: [usize; 3],
    pub stem: [ConvBnRelu; 2],
    pub branches: Vec<CenterSurround>,
    pub agg1: ConvBnRelu,
    pub agg2: ConvBnRelu,
    pub pe: Tensor,
    pub key: Linear,
    pub value: Linear,
    pub d_attn: usize,
}

/// Keys and values `[batch, P, d_attn]`.
#[derive(Clone, Copy, Debug)]
pub struct BackboneOutput {
    pub keys: Var,
    pub values: Var,
}

impl Backbone {
    pub fn new(
        store: &mut ParamStore,
        bufs: &mut BufferStore,
        cfg: &BackboneConfig,
        in_shape: [usize; 3],
        d_attn: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        check_shape(cfg, in_shape)?;
        if cfg.stem_stride == 0 || cfg.grid == 0 {
            return dim_err("stem stride and grid must be positive");
        }
        let c = in_shape[0];
        let stem = [
            ConvBnRelu::new(store, bufs, "backbone.stem0", c, cfg.stem_channels, 3, cfg.stem_stride, rng),
            ConvBnRelu::new(store, bufs, "backbone.stem1", cfg.stem_channels, cfg.stem_channels, 3, 1, rng),
        ];
        let branches = SCALES
            .iter()
            .map(|&s| {
                CenterSurround::new(
                    store,
                    bufs,
                    &format!("backbone.cs{s}"),
                    s,
                    cfg.stem_channels,
                    cfg.branch_channels,
                    cfg.surround_gain,
                    rng,
                )
            })
            .collect();
        let cat = SCALES.len() * cfg.branch_channels;
        let agg1 = ConvBnRelu::new(store, bufs, "backbone.agg1", cat, cfg.agg_channels, 1, 1, rng);
        let agg2 = ConvBnRelu::new(store, bufs, "backbone.agg2", cfg.agg_channels, cfg.agg_channels, 3, 1, rng);
        let key = Linear::new(store, "backbone.key", cfg.agg_channels, d_attn, true, rng);
        let value = Linear::new(store, "backbone.value", cfg.agg_channels, d_attn, true, rng);
        Ok(Self {
            cfg: cfg.clone(),
            in_shape,
            stem,
            branches,
            agg1,
            agg2,
            pe: positional_encoding_2d(cfg.grid, cfg.agg_channels),
            key,
            value,
            d_attn,
        })
    }

    pub fn tokens(&self) -> usize {
        self.cfg.grid * self.cfg.grid
    }

    /// `x`: `[batch, C, H, W]`.
    pub fn forward(&self, f: &Fwd, x: Var) -> Result<BackboneOutput> {
        let s = f.t.shape(x);
        if s.len() != 4 || s[1..] != self.in_shape {
            return dim_err(format!("image batch {s:?} vs expected {:?}", self.in_shape));
        }
        let t = f.t;
        let g = self.cfg.grid;
        let h = self.stem[1].forward(f, self.stem[0].forward(f, x));
        let mut outs = Vec::with_capacity(self.branches.len());
        for b in &self.branches {
            let y = b.forward(f, h)?;
            let y = t.adaptive_avg_pool(y, g, g);
            // channel concat happens on the trailing axis below
            outs.push(t.permute(y, &[0, 2, 3, 1]));
        }
        let cat = t.permute(t.concat(&outs), &[0, 3, 1, 2]);
        let a = self.agg2.forward(f, self.agg1.forward(f, cat));
        let a = t.adaptive_avg_pool(a, g, g);
        let tokens = t.reshape(t.permute(a, &[0, 2, 3, 1]), &[s[0], g * g, self.cfg.agg_channels]);
        let tokens = t.add(tokens, t.constant(self.pe.clone()));
        Ok(BackboneOutput { keys: self.key.forward(f, tokens), values: self.value.forward(f, tokens) })
    }
}

pub fn check_shape(cfg: &BackboneConfig, in_shape: [usize; 3]) -> Result<()> {
    if cfg.allow_custom_shape || in_shape == [1, 28, 28] || in_shape == [3, 32, 32] {
        Ok(())
    } else {
        dim_err(format!("unsupported input shape {in_shape:?}; expected 1x28x28 or 3x32x32"))
    }
}
