//! Layer-level operations: products, normalisations, convolutions, pooling.

use crate::gemm::{gemm, gemm_strided};
use crate::tape::{Node, Op, Tape, Var};
use crate::tensor::Tensor;

type Acc<'a> = &'a mut dyn FnMut(Var, Tensor);

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn matmul_backward(
    a: &Tensor,
    b: &Tensor,
    tb: bool,
    g: &Tensor,
    need_a: bool,
    need_b: bool,
    va: Var,
    vb: Var,
    acc: Acc,
) {
    let k = a.last_dim();
    let m = a.len() / k;
    let n = g.last_dim();
    if need_a {
        let mut ga = vec![0.0; m * k];
        // dA = G * op(B)^T
        gemm(m, n, k, g.data(), false, b.data(), !tb, &mut ga, 0.0);
        acc(va, Tensor::new(a.shape(), ga));
    }
    if need_b {
        let mut gb = vec![0.0; k * n];
        if tb {
            gemm(n, m, k, g.data(), true, a.data(), false, &mut gb, 0.0);
        } else {
            gemm(k, m, n, a.data(), true, g.data(), false, &mut gb, 0.0);
        }
        acc(vb, Tensor::new(b.shape(), gb));
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn bmm_backward(
    a: &Tensor,
    b: &Tensor,
    tb: bool,
    g: &Tensor,
    need_a: bool,
    need_b: bool,
    va: Var,
    vb: Var,
    acc: Acc,
) {
    let (bs, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let n = g.shape()[2];
    if need_a {
        let mut ga = vec![0.0; bs * m * k];
        for i in 0..bs {
            gemm(
                m,
                n,
                k,
                &g.data()[i * m * n..],
                false,
                &b.data()[i * k * n..],
                !tb,
                &mut ga[i * m * k..],
                0.0,
            );
        }
        acc(va, Tensor::new(a.shape(), ga));
    }
    if need_b {
        let mut gb = vec![0.0; bs * k * n];
        for i in 0..bs {
            let (gi, ai, out) = (&g.data()[i * m * n..], &a.data()[i * m * k..], &mut gb[i * k * n..]);
            if tb {
                gemm(n, m, k, gi, true, ai, false, out, 0.0);
            } else {
                gemm(k, m, n, ai, true, gi, false, out, 0.0);
            }
        }
        acc(vb, Tensor::new(b.shape(), gb));
    }
}

pub(crate) fn softmax_rows(x: &Tensor) -> Tensor {
    let n = x.last_dim();
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(n) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = row.iter().map(|&v| (v - m).exp()).sum();
        out.extend(row.iter().map(|&v| (v - m).exp() / s));
    }
    Tensor::new(x.shape(), out)
}

pub(crate) fn softmax_backward(y: &Tensor, g: &Tensor) -> Tensor {
    let n = y.last_dim();
    let mut out = Vec::with_capacity(y.len());
    for (yr, gr) in y.data().chunks(n).zip(g.data().chunks(n)) {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        out.extend(yr.iter().zip(gr).map(|(y, g)| y * (g - dot)));
    }
    Tensor::new(y.shape(), out)
}

pub(crate) fn log_softmax_backward(y: &Tensor, g: &Tensor) -> Tensor {
    let n = y.last_dim();
    let mut out = Vec::with_capacity(y.len());
    for (yr, gr) in y.data().chunks(n).zip(g.data().chunks(n)) {
        let s: f64 = gr.iter().sum();
        out.extend(yr.iter().zip(gr).map(|(y, g)| g - y.exp() * s));
    }
    Tensor::new(y.shape(), out)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn layer_norm_backward(
    nodes: &[Node],
    x: Var,
    gamma: Option<Var>,
    beta: Option<Var>,
    xhat: &Tensor,
    rstd: &[f64],
    g: &Tensor,
    acc: Acc,
) {
    let n = xhat.last_dim();
    let gam = gamma.map(|v| nodes[v.0].value.clone());
    if let Some(gv) = gamma {
        if nodes[gv.0].needs_grad {
            let mut dg = vec![0.0; n];
            for (xr, gr) in xhat.data().chunks(n).zip(g.data().chunks(n)) {
                for j in 0..n {
                    dg[j] += xr[j] * gr[j];
                }
            }
            acc(gv, Tensor::new(&[n], dg));
        }
    }
    if let Some(bv) = beta {
        if nodes[bv.0].needs_grad {
            let mut db = vec![0.0; n];
            for gr in g.data().chunks(n) {
                for j in 0..n {
                    db[j] += gr[j];
                }
            }
            acc(bv, Tensor::new(&[n], db));
        }
    }
    if nodes[x.0].needs_grad {
        let mut dx = Vec::with_capacity(g.len());
        let mut dxh = vec![0.0; n];
        for (r, (xr, gr)) in xhat.data().chunks(n).zip(g.data().chunks(n)).enumerate() {
            for j in 0..n {
                dxh[j] = gr[j] * gam.as_ref().map_or(1.0, |t| t.data()[j]);
            }
            let m1 = dxh.iter().sum::<f64>() / n as f64;
            let m2 = dxh.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
            dx.extend((0..n).map(|j| rstd[r] * (dxh[j] - m1 - xr[j] * m2)));
        }
        acc(x, Tensor::new(xhat.shape(), dx));
    }
}

pub(crate) fn rms_norm_backward(
    nodes: &[Node],
    x: Var,
    gain: Option<Var>,
    xn: &Tensor,
    rstd: &[f64],
    g: &Tensor,
    acc: Acc,
) {
    let n = xn.last_dim();
    let gv = gain.map(|v| nodes[v.0].value.clone());
    if let Some(gn) = gain {
        if nodes[gn.0].needs_grad {
            let mut dg = vec![0.0; n];
            for (xr, gr) in xn.data().chunks(n).zip(g.data().chunks(n)) {
                for j in 0..n {
                    dg[j] += xr[j] * gr[j];
                }
            }
            acc(gn, Tensor::new(&[n], dg));
        }
    }
    if nodes[x.0].needs_grad {
        let mut dx = Vec::with_capacity(g.len());
        let mut d = vec![0.0; n];
        for (r, (xr, gr)) in xn.data().chunks(n).zip(g.data().chunks(n)).enumerate() {
            for j in 0..n {
                d[j] = gr[j] * gv.as_ref().map_or(1.0, |t| t.data()[j]);
            }
            let m = d.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
            dx.extend((0..n).map(|j| rstd[r] * (d[j] - xr[j] * m)));
        }
        acc(x, Tensor::new(xn.shape(), dx));
    }
}

pub(crate) fn glu_backward(x: &Tensor, g: &Tensor) -> Tensor {
    let n = x.last_dim();
    let h = n / 2;
    let mut out = Vec::with_capacity(x.len());
    for (xr, gr) in x.data().chunks(n).zip(g.data().chunks(h)) {
        let (a, b) = xr.split_at(h);
        out.extend((0..h).map(|j| gr[j] * sigmoid(b[j])));
        out.extend((0..h).map(|j| {
            let s = sigmoid(b[j]);
            gr[j] * a[j] * s * (1.0 - s)
        }));
    }
    Tensor::new(x.shape(), out)
}

fn conv_out(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    (h + 2 * pad - k) / stride + 1
}

/// Columns `[c*kh*kw, ho*wo]` for one image `[c, h, w]`.
#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f64], c: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize, col: &mut [f64]) {
    let (ho, wo) = (conv_out(h, kh, stride, pad), conv_out(w, kw, stride, pad));
    let n = ho * wo;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &mut col[((ci * kh + ki) * kw + kj) * n..][..n];
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    let dst = &mut row[oi * wo..(oi + 1) * wo];
                    if ii < 0 || ii >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &x[(ci * h + ii as usize) * w..][..w];
                    for (oj, d) in dst.iter_mut().enumerate() {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        *d = if jj < 0 || jj >= w as isize { 0.0 } else { src[jj as usize] };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(col: &[f64], c: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize, x: &mut [f64]) {
    let (ho, wo) = (conv_out(h, kh, stride, pad), conv_out(w, kw, stride, pad));
    let n = ho * wo;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &col[((ci * kh + ki) * kw + kj) * n..][..n];
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let dst = &mut x[(ci * h + ii as usize) * w..][..w];
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj >= 0 && jj < w as isize {
                            dst[jj as usize] += row[oi * wo + oj];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(x: &Tensor, wt: &Tensor, stride: usize, pad: usize) -> Tensor {
    let [n, c, h, w] = dims4(x);
    let [o, ci, kh, kw] = dims4(wt);
    assert_eq!(c, ci, "conv2d channel mismatch: input {c}, kernel {ci}");
    assert!(h + 2 * pad >= kh && w + 2 * pad >= kw, "kernel larger than padded input");
    let (ho, wo) = (conv_out(h, kh, stride, pad), conv_out(w, kw, stride, pad));
    let kk = c * kh * kw;
    let mut col = vec![0.0; kk * ho * wo];
    let mut out = vec![0.0; n * o * ho * wo];
    for b in 0..n {
        im2col(&x.data()[b * c * h * w..], c, h, w, kh, kw, stride, pad, &mut col);
        gemm(o, kk, ho * wo, wt.data(), false, &col, false, &mut out[b * o * ho * wo..], 0.0);
    }
    Tensor::new(&[n, o, ho, wo], out)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    x: &Tensor,
    wt: &Tensor,
    stride: usize,
    pad: usize,
    g: &Tensor,
    need_x: bool,
    need_w: bool,
    vx: Var,
    vw: Var,
    acc: Acc,
) {
    let [n, c, h, w] = dims4(x);
    let [o, _, kh, kw] = dims4(wt);
    let (ho, wo) = (g.shape()[2], g.shape()[3]);
    let kk = c * kh * kw;
    let p = ho * wo;
    let mut col = vec![0.0; kk * p];
    let mut gw = if need_w { vec![0.0; o * kk] } else { Vec::new() };
    let mut gx = if need_x { vec![0.0; x.len()] } else { Vec::new() };
    for b in 0..n {
        let gb = &g.data()[b * o * p..];
        if need_w {
            im2col(&x.data()[b * c * h * w..], c, h, w, kh, kw, stride, pad, &mut col);
            gemm(o, p, kk, gb, false, &col, true, &mut gw, 1.0);
        }
        if need_x {
            gemm(kk, o, p, wt.data(), true, gb, false, &mut col, 0.0);
            col2im(&col, c, h, w, kh, kw, stride, pad, &mut gx[b * c * h * w..]);
        }
    }
    if need_w {
        acc(vw, Tensor::new(wt.shape(), gw));
    }
    if need_x {
        acc(vx, Tensor::new(x.shape(), gx));
    }
}

fn dims4(t: &Tensor) -> [usize; 4] {
    let s = t.shape();
    assert_eq!(s.len(), 4, "expected a 4-D tensor, got {s:?}");
    [s[0], s[1], s[2], s[3]]
}

/// Per-channel mean and biased variance of an `[n, c, h, w]` tensor.
pub fn channel_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let [n, c, h, w] = dims4(x);
    let hw = h * w;
    let m = (n * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            s += x.data()[(b * c + ch) * hw..][..hw].iter().sum::<f64>();
        }
        let mu = s / m;
        let mut v = 0.0;
        for b in 0..n {
            v += x.data()[(b * c + ch) * hw..][..hw].iter().map(|a| (a - mu) * (a - mu)).sum::<f64>();
        }
        mean[ch] = mu;
        var[ch] = v / m;
    }
    (mean, var)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn batch_norm_backward(
    nodes: &[Node],
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: &Tensor,
    rstd: &[f64],
    g: &Tensor,
    acc: Acc,
) {
    let [n, c, h, w] = dims4(xhat);
    let hw = h * w;
    let m = (n * hw) as f64;
    let gam = nodes[gamma.0].value.clone();
    let mut sg = vec![0.0; c];
    let mut sgx = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let o = (b * c + ch) * hw;
            for i in o..o + hw {
                sg[ch] += g.data()[i];
                sgx[ch] += g.data()[i] * xhat.data()[i];
            }
        }
    }
    if nodes[x.0].needs_grad {
        let mut dx = vec![0.0; xhat.len()];
        for b in 0..n {
            for ch in 0..c {
                let o = (b * c + ch) * hw;
                let k = gam.data()[ch] * rstd[ch] / m;
                for i in o..o + hw {
                    dx[i] = k * (m * g.data()[i] - sg[ch] - xhat.data()[i] * sgx[ch]);
                }
            }
        }
        acc(x, Tensor::new(xhat.shape(), dx));
    }
    if nodes[gamma.0].needs_grad {
        acc(gamma, Tensor::new(&[c], sgx));
    }
    if nodes[beta.0].needs_grad {
        acc(beta, Tensor::new(&[c], sg));
    }
}

fn pool_window(i: usize, inp: usize, out: usize) -> (usize, usize) {
    (i * inp / out, ((i + 1) * inp).div_ceil(out))
}

pub(crate) fn avg_pool_backward(in_shape: &[usize], g: &Tensor) -> Tensor {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (oh, ow) = (g.shape()[2], g.shape()[3]);
    let mut dx = vec![0.0; n * c * h * w];
    for p in 0..n * c {
        for i in 0..oh {
            let (r0, r1) = pool_window(i, h, oh);
            for j in 0..ow {
                let (c0, c1) = pool_window(j, w, ow);
                let v = g.data()[(p * oh + i) * ow + j] / ((r1 - r0) * (c1 - c0)) as f64;
                for r in r0..r1 {
                    for cc in c0..c1 {
                        dx[(p * h + r) * w + cc] += v;
                    }
                }
            }
        }
    }
    Tensor::new(in_shape, dx)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn per_neuron_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    need_x: bool,
    need_w: bool,
    vx: Var,
    vw: Var,
    acc: Acc,
) {
    let (b, n, m) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let k = w.shape()[2];
    if need_x {
        let mut dx = vec![0.0; x.len()];
        for i in 0..n {
            // dX_i [b, m] = G_i [b, k] * W_i^T [k, m]
            unsafe {
                gemm_strided(
                    b,
                    k,
                    m,
                    g.data().as_ptr().add(i * k),
                    (n * k) as isize,
                    1,
                    w.data().as_ptr().add(i * m * k),
                    1,
                    k as isize,
                    dx.as_mut_ptr().add(i * m),
                    (n * m) as isize,
                    1,
                    0.0,
                );
            }
        }
        acc(vx, Tensor::new(x.shape(), dx));
    }
    if need_w {
        let mut dw = vec![0.0; w.len()];
        for i in 0..n {
            // dW_i [m, k] = X_i^T [m, b] * G_i [b, k]
            unsafe {
                gemm_strided(
                    m,
                    b,
                    k,
                    x.data().as_ptr().add(i * m),
                    1,
                    (n * m) as isize,
                    g.data().as_ptr().add(i * k),
                    (n * k) as isize,
                    1,
                    dw.as_mut_ptr().add(i * m * k),
                    k as isize,
                    1,
                    0.0,
                );
            }
        }
        acc(vw, Tensor::new(w.shape(), dw));
    }
}

impl Tape {
    /// `a [.., k] x b [k, n]`, or `b [n, k]` transposed when `tb`.
    pub fn matmul_with(&self, a: Var, b: Var, tb: bool) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(bv.ndim(), 2, "matmul right operand must be 2-D");
        let k = av.last_dim();
        let m = av.len() / k;
        let (bk, n) = if tb { (bv.shape()[1], bv.shape()[0]) } else { (bv.shape()[0], bv.shape()[1]) };
        assert_eq!(k, bk, "matmul inner dimension mismatch: {:?} x {:?}", av.shape(), bv.shape());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), tb, &mut out, 0.0);
        let mut shape = av.shape()[..av.ndim() - 1].to_vec();
        shape.push(n);
        self.push(Tensor::new(&shape, out), Op::MatMul(a, b, tb))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        self.matmul_with(a, b, false)
    }

    /// `x W + b` with `W` stored `[in, out]`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w);
        match b {
            Some(b) => self.add(y, b),
            None => y,
        }
    }

    /// Batched product of `[g, m, k]` with `[g, k, n]` (or `[g, n, k]` when `tb`).
    pub fn bmm(&self, a: Var, b: Var, tb: bool) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (g, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        assert_eq!(bv.shape()[0], g);
        let (bk, n) = if tb { (bv.shape()[2], bv.shape()[1]) } else { (bv.shape()[1], bv.shape()[2]) };
        assert_eq!(k, bk, "bmm inner dimension mismatch");
        let mut out = vec![0.0; g * m * n];
        for i in 0..g {
            gemm(m, k, n, &av.data()[i * m * k..], false, &bv.data()[i * k * n..], tb, &mut out[i * m * n..], 0.0);
        }
        self.push(Tensor::new(&[g, m, n], out), Op::Bmm(a, b, tb))
    }

    pub fn softmax(&self, x: Var) -> Var {
        let v = softmax_rows(&self.value(x));
        self.push(v, Op::Softmax(x))
    }

    pub fn log_softmax(&self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.last_dim();
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(n) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|&v| v - lse));
        }
        self.push(Tensor::new(xv.shape(), out), Op::LogSoftmax(x))
    }

    /// Normalise over the trailing axis, then optional affine.
    pub fn layer_norm(&self, x: Var, gamma: Option<Var>, beta: Option<Var>, eps: f64) -> Var {
        let xv = self.value(x);
        let n = xv.last_dim();
        let mut xhat = Vec::with_capacity(xv.len());
        let mut rstd = Vec::with_capacity(xv.len() / n);
        for row in xv.data().chunks(n) {
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            xhat.extend(row.iter().map(|v| (v - mu) * r));
        }
        let xhat = Tensor::new(xv.shape(), xhat);
        let gv = gamma.map(|g| self.value(g));
        let bv = beta.map(|b| self.value(b));
        let y = Tensor::from_fn(xv.shape(), |i| {
            let j = i % n;
            xhat.data()[i] * gv.as_ref().map_or(1.0, |t| t.data()[j]) + bv.as_ref().map_or(0.0, |t| t.data()[j])
        });
        self.push(y, Op::LayerNorm { x, gamma, beta, xhat, rstd })
    }

    /// Root-mean-square normalisation over the trailing axis with optional gain.
    pub fn rms_norm(&self, x: Var, gain: Option<Var>, eps: f64) -> Var {
        let xv = self.value(x);
        let n = xv.last_dim();
        let mut xn = Vec::with_capacity(xv.len());
        let mut rstd = Vec::with_capacity(xv.len() / n);
        for row in xv.data().chunks(n) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / n as f64;
            let r = 1.0 / (ms + eps).sqrt();
            rstd.push(r);
            xn.extend(row.iter().map(|v| v * r));
        }
        let xn = Tensor::new(xv.shape(), xn);
        let gv = gain.map(|g| self.value(g));
        let y = Tensor::from_fn(xv.shape(), |i| xn.data()[i] * gv.as_ref().map_or(1.0, |t| t.data()[i % n]));
        self.push(y, Op::RmsNorm { x, gain, xn, rstd })
    }

    /// Gated linear unit over the trailing axis: `a * sigmoid(b)` for halves `[a | b]`.
    pub fn glu(&self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.last_dim();
        assert!(n % 2 == 0, "GLU needs an even trailing dimension, got {n}");
        let h = n / 2;
        let mut out = Vec::with_capacity(xv.len() / 2);
        for row in xv.data().chunks(n) {
            out.extend((0..h).map(|j| row[j] * sigmoid(row[h + j])));
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = h;
        self.push(Tensor::new(&shape, out), Op::Glu(x))
    }

    /// 2-D cross-correlation, `x [n, c, h, w]`, `w [o, c, kh, kw]`, zero padding.
    pub fn conv2d(&self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let v = conv2d_forward(&self.value(x), &self.value(w), stride, pad);
        self.push(v, Op::Conv2d { x, w, stride, pad })
    }

    /// Batch normalisation with batch statistics over `(n, h, w)`.
    pub fn batch_norm2d(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let [n, c, h, w] = dims4(&xv);
        let (mean, var) = channel_stats(&xv);
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let hw = h * w;
        let xhat = Tensor::from_fn(xv.shape(), |i| {
            let ch = (i / hw) % c;
            (xv.data()[i] - mean[ch]) * rstd[ch]
        });
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let y = Tensor::from_fn(&[n, c, h, w], |i| {
            let ch = (i / hw) % c;
            xhat.data()[i] * gv.data()[ch] + bv.data()[ch]
        });
        self.push(y, Op::BatchNorm2d { x, gamma, beta, xhat, rstd })
    }

    /// Adaptive average pooling of `[n, c, h, w]` to `[n, c, oh, ow]`.
    pub fn adaptive_avg_pool(&self, x: Var, oh: usize, ow: usize) -> Var {
        let xv = self.value(x);
        let [n, c, h, w] = dims4(&xv);
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            for i in 0..oh {
                let (r0, r1) = pool_window(i, h, oh);
                for j in 0..ow {
                    let (c0, c1) = pool_window(j, w, ow);
                    let mut s = 0.0;
                    for r in r0..r1 {
                        s += xv.data()[(p * h + r) * w + c0..(p * h + r) * w + c1].iter().sum::<f64>();
                    }
                    out[(p * oh + i) * ow + j] = s / ((r1 - r0) * (c1 - c0)) as f64;
                }
            }
        }
        self.push(Tensor::new(&[n, c, oh, ow], out), Op::AvgPool(x))
    }

    /// Independent linear map per neuron: `x [b, n, m]`, `w [n, m, k]` to `[b, n, k]`.
    pub fn per_neuron(&self, x: Var, w: Var) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        let (b, n, m) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        assert_eq!(&wv.shape()[..2], &[n, m], "per-neuron weight shape mismatch");
        let k = wv.shape()[2];
        let mut out = vec![0.0; b * n * k];
        for i in 0..n {
            unsafe {
                gemm_strided(
                    b,
                    m,
                    k,
                    xv.data().as_ptr().add(i * m),
                    (n * m) as isize,
                    1,
                    wv.data().as_ptr().add(i * m * k),
                    k as isize,
                    1,
                    out.as_mut_ptr().add(i * k),
                    (n * k) as isize,
                    1,
                    0.0,
                );
            }
        }
        self.push(Tensor::new(&[b, n, k], out), Op::PerNeuron(x, w))
    }

    /// Cross-entropy per row of `logits [r, c]` against integer labels.
    pub fn cross_entropy_rows(&self, logits: Var, labels: &[usize]) -> Var {
        let ls = self.log_softmax(logits);
        let p = self.pick(ls, std::rc::Rc::new(labels.to_vec()));
        self.neg(p)
    }
}
