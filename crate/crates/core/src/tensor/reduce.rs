use super::{norm_dim, Tensor};
use crate::error::Result;

/// Split a shape around `dim` into (outer, extent, inner).
pub(crate) fn split_at_dim(shape: &[usize], dim: usize) -> (usize, usize, usize) {
    let outer = shape[..dim].iter().product();
    let inner = shape[dim + 1..].iter().product();
    (outer, shape[dim], inner)
}

fn reduced_shape(shape: &[usize], dim: usize, keepdim: bool) -> Vec<usize> {
    let mut s = shape.to_vec();
    if keepdim {
        s[dim] = 1;
    } else {
        s.remove(dim);
    }
    s
}

impl Tensor {
    pub fn sum_all(&self) -> Tensor {
        let total: f64 = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op("sum_all", vec![], vec![total], vec![self.clone()], move |g| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel().max(1);
        self.sum_all().scale(1.0 / n as f64)
    }

    /// Sum along `dim`; an empty extent sums to zero.
    pub fn sum(&self, dim: isize, keepdim: bool) -> Result<Tensor> {
        let d = norm_dim("sum", dim, self.rank())?;
        let (outer, ext, inner) = split_at_dim(self.shape(), d);
        let x = self.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for e in 0..ext {
                let src = &x[(o * ext + e) * inner..(o * ext + e + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        drop(x);
        Ok(Tensor::from_op(
            "sum",
            reduced_shape(self.shape(), d, keepdim),
            out,
            vec![self.clone()],
            move |g| {
                let mut gi = vec![0.0; outer * ext * inner];
                for o in 0..outer {
                    for e in 0..ext {
                        gi[(o * ext + e) * inner..(o * ext + e + 1) * inner]
                            .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(gi)]
            },
        ))
    }

    pub fn mean(&self, dim: isize, keepdim: bool) -> Result<Tensor> {
        let d = norm_dim("mean", dim, self.rank())?;
        let ext = self.shape()[d].max(1);
        Ok(self.sum(dim, keepdim)?.scale(1.0 / ext as f64))
    }

    /// Max along `dim`; gradient flows to the first maximal element.
    pub fn max(&self, dim: isize, keepdim: bool) -> Result<Tensor> {
        let d = norm_dim("max", dim, self.rank())?;
        let (outer, ext, inner) = split_at_dim(self.shape(), d);
        let x = self.data();
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for e in 0..ext {
                for i in 0..inner {
                    let v = x[(o * ext + e) * inner + i];
                    if v > out[o * inner + i] || e == 0 {
                        out[o * inner + i] = v;
                        arg[o * inner + i] = e;
                    }
                }
            }
        }
        drop(x);
        Ok(Tensor::from_op(
            "max",
            reduced_shape(self.shape(), d, keepdim),
            out,
            vec![self.clone()],
            move |g| {
                let mut gi = vec![0.0; outer * ext * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        gi[(o * ext + arg[o * inner + i]) * inner + i] += g[o * inner + i];
                    }
                }
                vec![Some(gi)]
            },
        ))
    }

    /// Inclusive cumulative sum along `dim`.
    pub fn cumsum(&self, dim: isize) -> Result<Tensor> {
        let d = norm_dim("cumsum", dim, self.rank())?;
        let (outer, ext, inner) = split_at_dim(self.shape(), d);
        let mut out = self.to_vec();
        for o in 0..outer {
            for e in 1..ext {
                for i in 0..inner {
                    out[(o * ext + e) * inner + i] += out[(o * ext + e - 1) * inner + i];
                }
            }
        }
        Ok(Tensor::from_op(
            "cumsum",
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            move |g| {
                // reverse cumulative sum
                let mut gi = g.to_vec();
                for o in 0..outer {
                    for e in (0..ext.saturating_sub(1)).rev() {
                        for i in 0..inner {
                            gi[(o * ext + e) * inner + i] += gi[(o * ext + e + 1) * inner + i];
                        }
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
    fn basic_reductions() {
        let x = Tensor::new(&[3], vec![1., 2., 3.]).unwrap();
        assert_eq!(x.cumsum(0).unwrap().to_vec(), vec![1., 3., 6.]);
        let m = Tensor::new(&[2], vec![-1., -5.]).unwrap();
        assert_eq!(m.max(0, false).unwrap().to_vec(), vec![-1.]);
        let empty = Tensor::zeros(&[2, 0]);
        assert_eq!(empty.sum(1, false).unwrap().to_vec(), vec![0., 0.]);
        assert_eq!(Tensor::zeros(&[0]).sum_all().item().unwrap(), 0.0);
        assert!(x.sum(1, false).is_err());
        assert!(x.cumsum(-2).is_err());
    }

    #[test]
    fn dims_and_keepdim() {
        let x = Tensor::new(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(x.sum(0, false).unwrap().to_vec(), vec![5., 7., 9.]);
        let s = x.sum(-1, true).unwrap();
        assert_eq!(s.shape(), &[2, 1]);
        assert_eq!(s.to_vec(), vec![6., 15.]);
        assert_eq!(x.cumsum(0).unwrap().to_vec(), vec![1., 2., 3., 5., 7., 9.]);
    }

    #[test]
    fn reduction_gradients() {
        let x = Tensor::new(&[2, 3, 2], (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let w = Tensor::new(&[2, 2], vec![0.3, -1.2, 0.8, 2.0]).unwrap();
        let err = grad_check(|t| Ok(t.sum(1, false)?.mul(&w)?.sum_all()), &x, 1e-5).unwrap();
        assert!(err < 1e-8);
        let w3 = Tensor::new(&[2, 3, 2], (0..12).map(|i| i as f64 - 4.0).collect()).unwrap();
        let err = grad_check(|t| Ok(t.cumsum(1)?.mul(&w3)?.sum_all()), &x, 1e-5).unwrap();
        assert!(err < 1e-8);
        let err = grad_check(
            |t| Ok(t.max(2, false)?.mul(&Tensor::ones(&[2, 3]))?.sum_all()),
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8);
    }
}
