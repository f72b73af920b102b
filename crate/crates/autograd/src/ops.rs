//! Elementwise, broadcasting, reduction and shape operations.

use std::rc::Rc;

use crate::tape::{Op, Tape, Unary, Var};
use crate::tensor::Tensor;

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => panic!("cannot broadcast {a:?} with {b:?}"),
        };
    }
    out
}

fn strip_ones(s: &[usize]) -> &[usize] {
    let k = s.iter().take_while(|&&d| d == 1).count();
    &s[k..]
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    let s = strip_ones(small);
    s.len() <= big.len() && big[big.len() - s.len()..] == *s
}

/// Flat source index in `inp` for every flat index of `out`.
fn index_map(out: &[usize], inp: &[usize]) -> Vec<usize> {
    let n = out.len();
    let mut strides = vec![0usize; n];
    let mut s = 1;
    for i in (0..inp.len()).rev() {
        let j = i + n - inp.len();
        strides[j] = if inp[i] == 1 { 0 } else { s };
        s *= inp[i];
    }
    let total: usize = out.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; n];
    let mut off = 0usize;
    for _ in 0..total {
        map.push(off);
        for d in (0..n).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out[d] {
                break;
            }
            off -= strides[d] * out[d];
            idx[d] = 0;
        }
    }
    map
}

pub(crate) fn broadcast_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let shape = broadcast_shape(a.shape(), b.shape());
    let (ad, bd) = (a.data(), b.data());
    if a.shape() == shape.as_slice() && is_suffix(b.shape(), &shape) {
        let m = bd.len();
        return Tensor::from_fn(&shape, |i| f(ad[i], bd[i % m]));
    }
    if b.shape() == shape.as_slice() && is_suffix(a.shape(), &shape) {
        let m = ad.len();
        return Tensor::from_fn(&shape, |i| f(ad[i % m], bd[i]));
    }
    let ma = index_map(&shape, a.shape());
    let mb = index_map(&shape, b.shape());
    Tensor::from_fn(&shape, |i| f(ad[ma[i]], bd[mb[i]]))
}

/// Sum `g` over the axes that were broadcast to reach it from `shape`.
pub(crate) fn reduce_to(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let n: usize = shape.iter().product();
    let mut out = vec![0.0; n];
    if n == 1 {
        out[0] = g.sum();
    } else if is_suffix(shape, g.shape()) {
        for (i, &v) in g.data().iter().enumerate() {
            out[i % n] += v;
        }
    } else {
        let m = index_map(g.shape(), shape);
        for (i, &v) in g.data().iter().enumerate() {
            out[m[i]] += v;
        }
    }
    Tensor::new(shape, out)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn unary_forward(u: Unary, x: f64) -> f64 {
    match u {
        Unary::Neg => -x,
        Unary::Relu => x.max(0.0),
        Unary::Exp => x.exp(),
        Unary::Ln => x.ln(),
        Unary::Sqrt => x.sqrt(),
        Unary::Square => x * x,
        Unary::Abs => x.abs(),
        Unary::Sigmoid => sigmoid(x),
        Unary::Softplus => softplus(x),
        Unary::Tanh => x.tanh(),
    }
}

pub(crate) fn unary_backward(u: Unary, x: &Tensor, y: &Tensor, g: &Tensor) -> Tensor {
    let (xd, yd, gd) = (x.data(), y.data(), g.data());
    Tensor::from_fn(x.shape(), |i| {
        let d = match u {
            Unary::Neg => -1.0,
            Unary::Relu => {
                if xd[i] > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Exp => yd[i],
            Unary::Ln => 1.0 / xd[i],
            Unary::Sqrt => 0.5 / yd[i],
            Unary::Square => 2.0 * xd[i],
            Unary::Abs => {
                if xd[i] > 0.0 {
                    1.0
                } else if xd[i] < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Sigmoid => yd[i] * (1.0 - yd[i]),
            Unary::Softplus => sigmoid(xd[i]),
            Unary::Tanh => 1.0 - yd[i] * yd[i],
        };
        gd[i] * d
    })
}

pub(crate) fn permute(x: &Tensor, perm: &[usize]) -> Tensor {
    let s = x.shape();
    assert_eq!(perm.len(), s.len(), "permutation rank mismatch");
    let n = s.len();
    let mut in_strides = vec![1usize; n];
    for i in (0..n.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * s[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = x.len();
    let xd = x.data();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; n];
    let mut off = 0usize;
    for _ in 0..total {
        out.push(xd[off]);
        for d in (0..n).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::new(&out_shape, out)
}

pub(crate) fn slice_last(x: &Tensor, start: usize, len: usize) -> Tensor {
    let n = x.last_dim();
    assert!(start + len <= n, "slice {start}..{} out of range {n}", start + len);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = len;
    let mut out = Vec::with_capacity(x.len() / n * len);
    for row in x.data().chunks(n) {
        out.extend_from_slice(&row[start..start + len]);
    }
    Tensor::new(&shape, out)
}

impl Tape {
    fn unary(&self, x: Var, u: Unary) -> Var {
        let v = self.value(x).map(|a| unary_forward(u, a));
        self.push(v, Op::Unary(x, u))
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let v = broadcast_binary(&self.value(a), &self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let v = broadcast_binary(&self.value(a), &self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let v = broadcast_binary(&self.value(a), &self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        let v = broadcast_binary(&self.value(a), &self.value(b), |x, y| x / y);
        self.push(v, Op::Div(a, b))
    }

    pub fn scale(&self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|a| a * c);
        self.push(v, Op::Scale(x, c))
    }

    pub fn add_scalar(&self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|a| a + c);
        self.push(v, Op::Offset(x))
    }

    pub fn neg(&self, x: Var) -> Var {
        self.unary(x, Unary::Neg)
    }

    pub fn relu(&self, x: Var) -> Var {
        let xv = self.value(x);
        self.record_kinks(|| xv.data().iter().map(|&a| (a > 0.0) as u8).collect());
        self.unary(x, Unary::Relu)
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn ln(&self, x: Var) -> Var {
        self.unary(x, Unary::Ln)
    }

    pub fn sqrt(&self, x: Var) -> Var {
        self.unary(x, Unary::Sqrt)
    }

    pub fn square(&self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    pub fn abs(&self, x: Var) -> Var {
        let xv = self.value(x);
        self.record_kinks(|| xv.data().iter().map(|&a| (a > 0.0) as u8 + (a >= 0.0) as u8).collect());
        self.unary(x, Unary::Abs)
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn softplus(&self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    /// Elementwise clip to `[lo, hi]`; the adjoint passes on the closed interval.
    pub fn clamp(&self, x: Var, lo: f64, hi: f64) -> Var {
        let xv = self.value(x);
        self.record_kinks(|| xv.data().iter().map(|&a| (a >= lo) as u8 + (a > hi) as u8).collect());
        let v = xv.map(|a| a.clamp(lo, hi));
        self.push(v, Op::Clamp(x, lo, hi))
    }

    pub fn sum(&self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::SumAll(x))
    }

    pub fn mean(&self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum over the trailing axis.
    pub fn sum_last(&self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.last_dim();
        let shape = &xv.shape()[..xv.ndim().saturating_sub(1)];
        let out: Vec<f64> = xv.data().chunks(n).map(|r| r.iter().sum()).collect();
        self.push(Tensor::new(shape, out), Op::SumLast(x))
    }

    pub fn mean_last(&self, x: Var) -> Var {
        let n = self.value(x).last_dim() as f64;
        let s = self.sum_last(x);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Var {
        let v = (*self.value(x)).clone().reshape(shape);
        self.push(v, Op::Reshape(x))
    }

    pub fn permute(&self, x: Var, perm: &[usize]) -> Var {
        let v = permute(&self.value(x), perm);
        self.push(v, Op::Permute(x, perm.to_vec()))
    }

    /// 2-D transpose.
    pub fn transpose(&self, x: Var) -> Var {
        self.permute(x, &[1, 0])
    }

    /// Concatenate along the trailing axis.
    pub fn concat(&self, xs: &[Var]) -> Var {
        let vals: Vec<_> = xs.iter().map(|&x| self.value(x)).collect();
        let lead = &vals[0].shape()[..vals[0].ndim() - 1];
        let rows: usize = lead.iter().product();
        let widths: Vec<usize> = vals.iter().map(|v| v.last_dim()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for v in &vals {
            assert_eq!(&v.shape()[..v.ndim() - 1], lead, "concat leading shapes differ");
        }
        for r in 0..rows {
            for (v, &w) in vals.iter().zip(&widths) {
                out.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        self.push(Tensor::new(&shape, out), Op::Concat(xs.to_vec()))
    }

    /// `x[..., start..start + len]`.
    pub fn slice_last(&self, x: Var, start: usize, len: usize) -> Var {
        let v = slice_last(&self.value(x), start, len);
        self.push(v, Op::Slice(x, start))
    }

    /// `x[..., idx]` along the trailing axis.
    pub fn gather_last(&self, x: Var, idx: Rc<Vec<usize>>) -> Var {
        let xv = self.value(x);
        let n = xv.last_dim();
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = idx.len();
        let mut out = Vec::with_capacity(xv.len() / n * idx.len());
        for row in xv.data().chunks(n) {
            out.extend(idx.iter().map(|&i| row[i]));
        }
        self.push(Tensor::new(&shape, out), Op::Gather(x, idx))
    }

    /// One trailing-axis element per row: `out[r] = x[r, idx[r]]`.
    pub fn pick(&self, x: Var, idx: Rc<Vec<usize>>) -> Var {
        let xv = self.value(x);
        let n = xv.last_dim();
        assert_eq!(xv.len() / n, idx.len(), "pick needs one index per row");
        let out: Vec<f64> = idx.iter().enumerate().map(|(r, &i)| xv.data()[r * n + i]).collect();
        let shape = &xv.shape()[..xv.ndim() - 1];
        self.push(Tensor::new(shape, out), Op::Pick(x, idx))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes_follow_numpy_rules() {
        assert_eq!(broadcast_shape(&[4, 1, 3], &[5, 1]), vec![4, 5, 3]);
        assert_eq!(broadcast_shape(&[2, 3], &[]), vec![2, 3]);
    }

    #[test]
    fn general_broadcast_matches_manual_loop() {
        let a = Tensor::from_fn(&[2, 1, 3], |i| i as f64);
        let b = Tensor::from_fn(&[4, 1], |i| 10.0 * i as f64);
        let c = broadcast_binary(&a, &b, |x, y| x + y);
        assert_eq!(c.shape(), &[2, 4, 3]);
        for i in 0..2 {
            for j in 0..4 {
                for k in 0..3 {
                    assert_eq!(c.at(&[i, j, k]), a.at(&[i, 0, k]) + b.at(&[j, 0]));
                }
            }
        }
        let r = reduce_to(&c, &[4, 1]);
        for j in 0..4 {
            assert_eq!(r.at(&[j, 0]), (0..2).flat_map(|i| (0..3).map(move |k| (i, k))).map(|(i, k)| c.at(&[i, j, k])).sum::<f64>());
        }
    }

    #[test]
    fn permute_roundtrip() {
        let x = Tensor::from_fn(&[2, 3, 4], |i| i as f64);
        let y = permute(&x, &[2, 0, 1]);
        assert_eq!(y.shape(), &[4, 2, 3]);
        assert_eq!(y.at(&[3, 1, 2]), x.at(&[1, 2, 3]));
        assert_eq!(permute(&y, &[1, 2, 0]), x);
    }
}
