use serde::{Deserialize, Serialize};

use super::elementwise::sigmoid;
use super::Tensor;
use crate::error::{Error, Result};

/// Pointwise nonlinearity used by state-transform blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Silu,
    Relu,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: &Tensor) -> Tensor {
        match self {
            Activation::Silu => x.silu(),
            Activation::Relu => x.relu(),
            Activation::Sigmoid => x.sigmoid(),
        }
    }

    /// Scalar form, bitwise equal to [`Activation::apply`] elementwise.
    pub fn scalar(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x * sigmoid(x),
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
        }
    }
}

impl Tensor {
    /// Max-subtracted softmax over the last dim.
    ///
    /// `-inf` entries get exactly zero weight; a row that is entirely `-inf`
    /// becomes all zeros instead of NaN.
    pub fn softmax_lastdim(&self) -> Result<Tensor> {
        let ext = *self
            .shape()
            .last()
            .ok_or_else(|| Error::dim("softmax", "rank-0 input"))?;
        if ext == 0 {
            return Err(Error::dim("softmax", "last dim must be at least 1"));
        }
        let x = self.data();
        if x.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let mut out = vec![0.0; x.len()];
        for (row, dst) in x.chunks_exact(ext).zip(out.chunks_exact_mut(ext)) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                continue;
            }
            let mut s = 0.0;
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = (v - m).exp();
                s += *d;
            }
            let inv = 1.0 / s;
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        drop(x);
        let y = out.clone();
        Ok(Tensor::from_op(
            "softmax",
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            move |g| {
                let mut gi = vec![0.0; g.len()];
                for ((gr, yr), dst) in g
                    .chunks_exact(ext)
                    .zip(y.chunks_exact(ext))
                    .zip(gi.chunks_exact_mut(ext))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((d, &gv), &yv) in dst.iter_mut().zip(gr).zip(yr) {
                        *d = yv * (gv - dot);
                    }
                }
                vec![Some(gi)]
            },
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `[N, V]` logits.
    /// Rows whose target is `None` are ignored.
    pub fn cross_entropy(&self, targets: &[Option<usize>]) -> Result<Tensor> {
        if self.rank() != 2 || self.shape()[0] != targets.len() {
            return Err(Error::dim(
                "cross_entropy",
                format!("logits {:?} vs {} targets", self.shape(), targets.len()),
            ));
        }
        let v = self.shape()[1];
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::Argument("cross_entropy: every position is ignored".into()));
        }
        if let Some(&bad) = targets.iter().flatten().find(|&&t| t >= v) {
            return Err(Error::Index {
                op: "cross_entropy",
                index: bad,
                extent: v,
            });
        }
        let x = self.data();
        let mut probs = vec![0.0; x.len()];
        let mut total = 0.0;
        for (r, (row, dst)) in x.chunks_exact(v).zip(probs.chunks_exact_mut(v)).enumerate() {
            let Some(t) = targets[r] else { continue };
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for (d, &z) in dst.iter_mut().zip(row) {
                *d = (z - m).exp();
                s += *d;
            }
            total += m + s.ln() - row[t];
            dst.iter_mut().for_each(|d| *d /= s);
        }
        drop(x);
        let loss = total / count as f64;
        let targets = targets.to_vec();
        Ok(Tensor::from_op(
            "cross_entropy",
            vec![],
            vec![loss],
            vec![self.clone()],
            move |g| {
                let scale = g[0] / count as f64;
                let mut gi = probs;
                for (r, row) in gi.chunks_exact_mut(v).enumerate() {
                    match targets[r] {
                        Some(t) => {
                            row.iter_mut().for_each(|p| *p *= scale);
                            row[t] -= scale;
                        }
                        None => row.iter_mut().for_each(|p| *p = 0.0),
                    }
                }
                vec![Some(gi)]
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    #[test]
    fn softmax_examples() {
        let x = Tensor::new(&[2], vec![0., 0.]).unwrap();
        assert_eq!(x.softmax_lastdim().unwrap().to_vec(), vec![0.5, 0.5]);
        let m = Tensor::new(&[2], vec![0., f64::NEG_INFINITY]).unwrap();
        assert_eq!(m.softmax_lastdim().unwrap().to_vec(), vec![1., 0.]);
        let all = Tensor::new(&[2], vec![f64::NEG_INFINITY; 2]).unwrap();
        assert_eq!(all.softmax_lastdim().unwrap().to_vec(), vec![0., 0.]);
        let nan = Tensor::new(&[2], vec![0., f64::NAN]).unwrap();
        assert!(matches!(nan.softmax_lastdim(), Err(Error::Numeric(_))));
    }

    #[test]
    fn softmax_direct_formula() {
        let x = Tensor::new(&[3], vec![1., 2., 3.]).unwrap();
        let y = x.softmax_lastdim().unwrap().to_vec();
        let z: f64 = [1f64, 2., 3.].iter().map(|v| v.exp()).sum();
        for (i, v) in [1f64, 2., 3.].iter().enumerate() {
            assert!((y[i] - v.exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_matmul_chain_grad() {
        let a = Tensor::new(&[3, 4], (0..12).map(|i| (i as f64 * 0.41).sin()).collect()).unwrap();
        let w = Tensor::new(&[4, 5], (0..20).map(|i| (i as f64 * 0.23).cos()).collect()).unwrap();
        let r = Tensor::new(&[3, 5], (0..15).map(|i| i as f64 * 0.1 - 0.7).collect()).unwrap();
        let err = grad_check(|t| Ok(t.matmul(&w)?.softmax_lastdim()?.mul(&r)?.sum_all()), &a, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn cross_entropy_cases() {
        let v = 8;
        let logits = Tensor::zeros(&[3, v]);
        let l = logits.cross_entropy(&[Some(1), None, Some(7)]).unwrap().item().unwrap();
        assert!((l - (v as f64).ln()).abs() < 1e-12);
        let mut d = vec![0.0; 2 * v];
        d[3] = 100.0;
        d[v + 5] = 100.0;
        let sharp = Tensor::new(&[2, v], d).unwrap();
        assert!(sharp.cross_entropy(&[Some(3), Some(5)]).unwrap().item().unwrap() < 1e-40);
        assert!(logits.cross_entropy(&[None, None, None]).is_err());
        let x = Tensor::new(&[3, 4], (0..12).map(|i| (i as f64 * 0.77).sin() * 2.0).collect()).unwrap();
        let err = grad_check(|t| t.cross_entropy(&[Some(0), None, Some(3)]), &x, 1e-5).unwrap();
        assert!(err < 1e-7, "{err}");
    }
}
