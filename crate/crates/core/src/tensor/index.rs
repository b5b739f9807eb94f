use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::{numel, Tensor};
use crate::error::{Error, Result};

/// Integer tensor used for token ids, positions and selected indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexTensor {
    pub shape: Vec<usize>,
    pub data: Vec<usize>,
}

impl IndexTensor {
    pub fn new(shape: &[usize], data: Vec<usize>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::dim(
                "index_tensor",
                format!("shape {:?} holds {} values, got {}", shape, numel(shape), data.len()),
            ));
        }
        Ok(IndexTensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_vec(data: Vec<usize>) -> Self {
        IndexTensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Descending order with ties broken toward the lower index.
pub(crate) fn desc_then_index(a: (f64, usize), b: (f64, usize)) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1))
}

/// Top-`k` of a row as `(value, index)` pairs, sorted by [`desc_then_index`].
pub(crate) fn topk_row(row: &[f64], k: usize) -> Vec<(f64, usize)> {
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for (i, &v) in row.iter().enumerate() {
        if best.len() == k {
            if k == 0 || v <= best[k - 1].0 {
                continue;
            }
            best.pop();
        }
        // insertion point keeps equal values in index order
        let pos = best.partition_point(|&(bv, _)| bv >= v);
        best.insert(pos, (v, i));
    }
    best
}

impl Tensor {
    /// Largest `k` entries of each last-dim row, values descending, ties to the lower index.
    ///
    /// Values carry gradients back to the selected positions; indices are constants.
    pub fn topk_lastdim(&self, k: usize) -> Result<(Tensor, IndexTensor)> {
        let ext = *self.shape().last().ok_or_else(|| Error::dim("topk", "rank-0 input"))?;
        if k > ext {
            return Err(Error::Argument(format!("topk: k={k} exceeds last-dim extent {ext}")));
        }
        let rows = self.numel().checked_div(ext).unwrap_or(0);
        let x = self.data();
        let mut vals = Vec::with_capacity(rows * k);
        let mut idx = Vec::with_capacity(rows * k);
        for r in 0..rows {
            for (v, i) in topk_row(&x[r * ext..(r + 1) * ext], k) {
                vals.push(v);
                idx.push(i);
            }
        }
        drop(x);
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = k;
        let indices = IndexTensor::new(&shape, idx)?;
        let values = self.take_along_lastdim(&indices)?;
        debug_assert_eq!(values.to_vec(), vals);
        Ok((values, indices))
    }

    /// `out[..., j] = x[..., idx[..., j]]` with leading dims shared.
    pub fn take_along_lastdim(&self, idx: &IndexTensor) -> Result<Tensor> {
        let r = self.rank();
        if r == 0 || idx.shape.len() != r || idx.shape[..r - 1] != self.shape()[..r - 1] {
            return Err(Error::shape("take_along_lastdim", self.shape(), &idx.shape));
        }
        let ext = self.shape()[r - 1];
        let k = idx.shape[r - 1];
        if let Some(&bad) = idx.data.iter().find(|&&i| i >= ext) {
            return Err(Error::Index {
                op: "take_along_lastdim",
                index: bad,
                extent: ext,
            });
        }
        let rows = idx.numel().checked_div(k).unwrap_or(0);
        let x = self.data();
        let mut out = Vec::with_capacity(idx.numel());
        for row in 0..rows {
            for j in 0..k {
                out.push(x[row * ext + idx.data[row * k + j]]);
            }
        }
        drop(x);
        let n_in = self.numel();
        let sel = idx.data.clone();
        Ok(Tensor::from_op(
            "take_along_lastdim",
            idx.shape.clone(),
            out,
            vec![self.clone()],
            move |g| {
                let mut gi = vec![0.0; n_in];
                for row in 0..rows {
                    for j in 0..k {
                        gi[row * ext + sel[row * k + j]] += g[row * k + j];
                    }
                }
                vec![Some(gi)]
            },
        ))
    }

    /// Stack rows of a 2-d table at `indices`; output shape is `indices.shape ++ [cols]`.
    /// Backward scatter-adds, so repeated indices accumulate.
    pub fn gather_rows(&self, indices: &IndexTensor) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::dim(
                "gather_rows",
                format!("table must be 2-d, got {:?}", self.shape()),
            ));
        }
        let (rows, cols) = (self.shape()[0], self.shape()[1]);
        if let Some(&bad) = indices.data.iter().find(|&&i| i >= rows) {
            return Err(Error::Index {
                op: "gather_rows",
                index: bad,
                extent: rows,
            });
        }
        let x = self.data();
        let mut out = Vec::with_capacity(indices.numel() * cols);
        for &i in &indices.data {
            out.extend_from_slice(&x[i * cols..(i + 1) * cols]);
        }
        drop(x);
        let mut shape = indices.shape.clone();
        shape.push(cols);
        let sel = indices.data.clone();
        Ok(Tensor::from_op(
            "gather_rows",
            shape,
            out,
            vec![self.clone()],
            move |g| {
                let mut gi = vec![0.0; rows * cols];
                for (n, &i) in sel.iter().enumerate() {
                    for (d, s) in gi[i * cols..(i + 1) * cols]
                        .iter_mut()
                        .zip(&g[n * cols..(n + 1) * cols])
                    {
                        *d += s;
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
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn topk_examples() {
        let x = Tensor::new(&[3], vec![3., 1., 2.]).unwrap();
        let (v, i) = x.topk_lastdim(2).unwrap();
        assert_eq!(v.to_vec(), vec![3., 2.]);
        assert_eq!(i.data, vec![0, 2]);
        let tie = Tensor::new(&[2], vec![5., 5.]).unwrap();
        let (v, i) = tie.topk_lastdim(1).unwrap();
        assert_eq!((v.to_vec(), i.data), (vec![5.], vec![0]));
        assert!(x.topk_lastdim(4).is_err());
    }

    #[test]
    fn topk_matches_full_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for k in [1, 3, 7, 16] {
            let x = Tensor::randn(&[16], 1.0, &mut rng);
            let mut all: Vec<(f64, usize)> = x.to_vec().into_iter().zip(0..).collect();
            all.sort_by(|a, b| desc_then_index(*a, *b));
            let (v, i) = x.topk_lastdim(k).unwrap();
            assert_eq!(v.to_vec(), all[..k].iter().map(|p| p.0).collect::<Vec<_>>());
            assert_eq!(i.data, all[..k].iter().map(|p| p.1).collect::<Vec<_>>());
        }
        // integer-valued rows with many ties
        let x = Tensor::new(&[10], vec![1., 3., 3., 0., 3., 1., 2., 2., 3., 0.]).unwrap();
        let (_, i) = x.topk_lastdim(6).unwrap();
        assert_eq!(i.data, vec![1, 2, 4, 8, 6, 7]);
    }

    #[test]
    fn gather_rows_examples() {
        let t = Tensor::param(&[2, 2], vec![1., 2., 3., 4.]).unwrap();
        let g = t.gather_rows(&IndexTensor::from_vec(vec![1, 0])).unwrap();
        assert_eq!(g.to_vec(), vec![3., 4., 1., 2.]);
        let rep = t.gather_rows(&IndexTensor::from_vec(vec![0, 0])).unwrap();
        assert_eq!(rep.to_vec(), vec![1., 2., 1., 2.]);
        rep.sum_all().backward().unwrap();
        assert_eq!(t.grad().unwrap(), vec![2., 2., 0., 0.]);
        assert!(matches!(
            t.gather_rows(&IndexTensor::from_vec(vec![2])),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn gather_rows_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = Tensor::randn(&[7, 3], 1.0, &mut rng);
        let idx = IndexTensor::new(&[2, 3], vec![6, 0, 3, 3, 1, 5]).unwrap();
        let g = t.gather_rows(&idx).unwrap();
        assert_eq!(g.shape(), &[2, 3, 3]);
        let td = t.data();
        let mut expect = Vec::new();
        for &i in &idx.data {
            for c in 0..3 {
                expect.push(td[i * 3 + c]);
            }
        }
        assert_eq!(g.to_vec(), expect);
    }
}
