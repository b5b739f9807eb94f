use super::{numel, strides, Tensor};
use crate::error::{Error, Result};

/// `log(1 + e^x)`, returning `x` itself above 30 where the correction is below f64 resolution.
pub fn softplus_scalar(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::shape(op, a, b)),
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside the broadcast `out` shape (zero where broadcast).
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides(shape);
    let off = out.len() - shape.len();
    (0..out.len())
        .map(|i| if i < off || shape[i - off] == 1 { 0 } else { s[i - off] })
        .collect()
}

/// Visit every output element with the matching flat offsets into `a` and `b`.
pub(crate) fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let total = numel(out);
    if total == 0 {
        return;
    }
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut o = 0;
    while o < total {
        // constant-stride copies of the row loop let the common cases vectorize
        match (ia, ib) {
            (1, 1) => (0..inner).for_each(|j| f(o + j, oa + j, ob + j)),
            (1, 0) => (0..inner).for_each(|j| f(o + j, oa + j, ob)),
            (0, 1) => (0..inner).for_each(|j| f(o + j, oa, ob + j)),
            _ => (0..inner).for_each(|j| f(o + j, oa + j * ia, ob + j * ib)),
        }
        o += inner;
        // advance outer multi-index
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Sum a gradient of the broadcast shape back down to an operand's shape.
pub(crate) fn reduce_to(g: &[f64], out: &[usize], shape: &[usize]) -> Vec<f64> {
    if out == shape {
        return g.to_vec();
    }
    let mut acc = vec![0.0; numel(shape)];
    let s = broadcast_strides(shape, out);
    let zeros = vec![0; out.len()];
    for_each_broadcast(out, &s, &zeros, |o, ia, _| acc[ia] += g[o]);
    acc
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl Tensor {
    fn binary(&self, other: &Tensor, kind: Binary) -> Result<Tensor> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        let out_shape = broadcast_shape(name, self.shape(), other.shape())?;
        let a = self.data();
        let b = other.data();
        let data: Vec<f64> = if self.shape() == other.shape() {
            match kind {
                Binary::Add => a.iter().zip(b.iter()).map(|(x, y)| x + y).collect(),
                Binary::Sub => a.iter().zip(b.iter()).map(|(x, y)| x - y).collect(),
                Binary::Mul => a.iter().zip(b.iter()).map(|(x, y)| x * y).collect(),
                Binary::Div => a.iter().zip(b.iter()).map(|(x, y)| x / y).collect(),
            }
        } else {
            let sa = broadcast_strides(self.shape(), &out_shape);
            let sb = broadcast_strides(other.shape(), &out_shape);
            let mut out = vec![0.0; numel(&out_shape)];
            match kind {
                Binary::Add => for_each_broadcast(&out_shape, &sa, &sb, |o, i, j| out[o] = a[i] + b[j]),
                Binary::Sub => for_each_broadcast(&out_shape, &sa, &sb, |o, i, j| out[o] = a[i] - b[j]),
                Binary::Mul => for_each_broadcast(&out_shape, &sa, &sb, |o, i, j| out[o] = a[i] * b[j]),
                Binary::Div => for_each_broadcast(&out_shape, &sa, &sb, |o, i, j| out[o] = a[i] / b[j]),
            }
            out
        };
        drop(a);
        drop(b);
        let (lhs, rhs) = (self.clone(), other.clone());
        let os = out_shape.clone();
        Ok(Tensor::from_op(
            name,
            out_shape,
            data,
            vec![self.clone(), other.clone()],
            move |g| {
                let (need_a, need_b) = (lhs.requires_grad(), rhs.requires_grad());
                let (ga, gb) = match kind {
                    Binary::Add => (
                        need_a.then(|| reduce_to(g, &os, lhs.shape())),
                        need_b.then(|| reduce_to(g, &os, rhs.shape())),
                    ),
                    Binary::Sub => (
                        need_a.then(|| reduce_to(g, &os, lhs.shape())),
                        need_b.then(|| {
                            let mut r = reduce_to(g, &os, rhs.shape());
                            r.iter_mut().for_each(|v| *v = -*v);
                            r
                        }),
                    ),
                    Binary::Mul | Binary::Div => {
                        let a = lhs.data();
                        let b = rhs.data();
                        let sa = broadcast_strides(lhs.shape(), &os);
                        let sb = broadcast_strides(rhs.shape(), &os);
                        let div = matches!(kind, Binary::Div);
                        let ga = need_a.then(|| {
                            let mut acc = vec![0.0; lhs.numel()];
                            if div {
                                for_each_broadcast(&os, &sa, &sb, |o, i, j| acc[i] += g[o] / b[j]);
                            } else {
                                for_each_broadcast(&os, &sa, &sb, |o, i, j| acc[i] += g[o] * b[j]);
                            }
                            acc
                        });
                        let gb = need_b.then(|| {
                            let mut acc = vec![0.0; rhs.numel()];
                            if div {
                                for_each_broadcast(&os, &sa, &sb, |o, i, j| acc[j] += -g[o] * a[i] / (b[j] * b[j]));
                            } else {
                                for_each_broadcast(&os, &sa, &sb, |o, i, j| acc[j] += g[o] * a[i]);
                            }
                            acc
                        });
                        (ga, gb)
                    }
                };
                vec![ga, gb]
            },
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Binary::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Binary::Mul)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Binary::Div)
    }

    /// Pointwise map with derivative expressed through input `x` and output `y`.
    fn unary(&self, name: &'static str, f: impl Fn(f64) -> f64, df: fn(f64, f64) -> f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&x| f(x)).collect();
        let input = self.clone();
        let out = data.clone();
        Tensor::from_op(name, self.shape().to_vec(), data, vec![self.clone()], move |g| {
            let x = input.data();
            let gi = g
                .iter()
                .zip(x.iter().zip(&out))
                .map(|(g, (&x, &y))| g * df(x, y))
                .collect();
            vec![Some(gi)]
        })
    }

    pub fn neg(&self) -> Tensor {
        self.unary("neg", |x| -x, |_, _| -1.0)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|x| x * c).collect();
        Tensor::from_op("scale", self.shape().to_vec(), data, vec![self.clone()], move |g| {
            vec![Some(g.iter().map(|v| v * c).collect())]
        })
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|x| x + c).collect();
        Tensor::from_op(
            "add_scalar",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            move |g| vec![Some(g.to_vec())],
        )
    }

    /// `e^x`; `-inf` maps to an exact zero whose gradient is zero.
    pub fn exp(&self) -> Tensor {
        self.unary("exp", f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Tensor {
        self.unary("ln", f64::ln, |x, _| 1.0 / x)
    }

    pub fn softplus(&self) -> Tensor {
        self.unary(
            "softplus",
            softplus_scalar,
            |x, _| if x > 30.0 { 1.0 } else { sigmoid(x) },
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary("sigmoid", sigmoid, |_, y| y * (1.0 - y))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&self) -> Tensor {
        self.unary(
            "silu",
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    pub fn relu(&self) -> Tensor {
        self.unary("relu", |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn square(&self) -> Tensor {
        self.unary("square", |x| x * x, |x, _| 2.0 * x)
    }

    /// `1 / sqrt(x)`.
    pub fn rsqrt(&self) -> Tensor {
        self.unary("rsqrt", |x| 1.0 / x.sqrt(), |_, y| -0.5 * y * y * y)
    }
}
