use super::reduce::split_at_dim;
use super::{norm_dim, numel, strides, Tensor};
use crate::error::{Error, Result};

impl Tensor {
    /// Copying reshape; element order is unchanged.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(Error::shape("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            |g| vec![Some(g.to_vec())],
        ))
    }

    /// Reorder dims: output dim `i` is input dim `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let r = self.rank();
        let mut seen = vec![false; r];
        if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim(
                "permute",
                format!("{perm:?} is not a permutation of rank {r}"),
            ));
        }
        let in_shape = self.shape().to_vec();
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let data = permute_copy(&self.data(), &in_shape, perm);
        let mut inverse = vec![0; r];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let os = out_shape.clone();
        Ok(Tensor::from_op(
            "permute",
            out_shape,
            data,
            vec![self.clone()],
            move |g| vec![Some(permute_copy(g, &os, &inverse))],
        ))
    }

    /// Concatenate along `dim`; all other extents must agree.
    pub fn concat(tensors: &[Tensor], dim: isize) -> Result<Tensor> {
        let first = tensors
            .first()
            .ok_or_else(|| Error::Argument("concat of zero tensors".into()))?;
        let d = norm_dim("concat", dim, first.rank())?;
        for t in tensors {
            let ok = t.rank() == first.rank()
                && t.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == d || a == b);
            if !ok {
                return Err(Error::shape("concat", first.shape(), t.shape()));
            }
        }
        let mut out_shape = first.shape().to_vec();
        out_shape[d] = tensors.iter().map(|t| t.shape()[d]).sum();
        let (outer, total, inner) = split_at_dim(&out_shape, d);
        let exts: Vec<usize> = tensors.iter().map(|t| t.shape()[d]).collect();
        let mut data = vec![0.0; outer * total * inner];
        let mut start = 0;
        for (t, &e) in tensors.iter().zip(&exts) {
            let x = t.data();
            for o in 0..outer {
                let dst = (o * total + start) * inner;
                data[dst..dst + e * inner].copy_from_slice(&x[o * e * inner..(o + 1) * e * inner]);
            }
            start += e;
        }
        Ok(Tensor::from_op("concat", out_shape, data, tensors.to_vec(), move |g| {
            let mut res = Vec::with_capacity(exts.len());
            let mut start = 0;
            for &e in &exts {
                let mut gi = vec![0.0; outer * e * inner];
                for o in 0..outer {
                    let src = (o * total + start) * inner;
                    gi[o * e * inner..(o + 1) * e * inner].copy_from_slice(&g[src..src + e * inner]);
                }
                res.push(Some(gi));
                start += e;
            }
            res
        }))
    }

    /// Half-open range `[start, end)` along `dim`.
    pub fn slice(&self, dim: isize, start: usize, end: usize) -> Result<Tensor> {
        let d = norm_dim("slice", dim, self.rank())?;
        let ext = self.shape()[d];
        if start > end || end > ext {
            return Err(Error::dim(
                "slice",
                format!("range {start}..{end} outside extent {ext}"),
            ));
        }
        let (outer, _, inner) = split_at_dim(self.shape(), d);
        let len = end - start;
        let x = self.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&x[(o * ext + start) * inner..(o * ext + end) * inner]);
        }
        drop(x);
        let mut out_shape = self.shape().to_vec();
        out_shape[d] = len;
        Ok(Tensor::from_op(
            "slice",
            out_shape,
            data,
            vec![self.clone()],
            move |g| {
                let mut gi = vec![0.0; outer * ext * inner];
                for o in 0..outer {
                    gi[(o * ext + start) * inner..(o * ext + end) * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gi)]
            },
        ))
    }

    /// Pad `dim` with `before`/`after` copies of `value`.
    pub fn pad(&self, dim: isize, before: usize, after: usize, value: f64) -> Result<Tensor> {
        let d = norm_dim("pad", dim, self.rank())?;
        if before == 0 && after == 0 {
            return Ok(self.clone());
        }
        let mut parts = Vec::new();
        let mut pad_shape = self.shape().to_vec();
        if before > 0 {
            pad_shape[d] = before;
            parts.push(Tensor::full(&pad_shape, value));
        }
        parts.push(self.clone());
        if after > 0 {
            pad_shape[d] = after;
            parts.push(Tensor::full(&pad_shape, value));
        }
        Tensor::concat(&parts, d as isize)
    }

    /// Tile `times` copies along `dim` (torch `repeat` on one axis).
    pub fn repeat_dim(&self, dim: isize, times: usize) -> Result<Tensor> {
        if times == 1 {
            return Ok(self.clone());
        }
        let copies = vec![self.clone(); times];
        Tensor::concat(&copies, dim)
    }

    /// Replace entries where `mask` is true with `value`; those entries get no gradient.
    pub fn masked_fill(&self, mask: &[bool], value: f64) -> Result<Tensor> {
        if mask.len() != self.numel() {
            return Err(Error::dim(
                "masked_fill",
                format!("mask has {} entries, tensor {}", mask.len(), self.numel()),
            ));
        }
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(mask)
            .map(|(&x, &m)| if m { value } else { x })
            .collect();
        let mask = mask.to_vec();
        Ok(Tensor::from_op(
            "masked_fill",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            move |g| {
                vec![Some(
                    g.iter().zip(&mask).map(|(&g, &m)| if m { 0.0 } else { g }).collect(),
                )]
            },
        ))
    }
}

/// Row-major copy of `x` (shape `shape`) with dims reordered by `perm`.
fn permute_copy(x: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let n = numel(shape);
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return out;
    }
    let r = shape.len();
    if r == 0 || perm.iter().enumerate().all(|(i, &p)| i == p) {
        out.extend_from_slice(&x[..n]);
        return out;
    }
    let src = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let gather: Vec<usize> = perm.iter().map(|&p| src[p]).collect();
    let (inner, step) = (out_shape[r - 1], gather[r - 1]);
    let mut idx = vec![0usize; r];
    let mut off = 0usize;
    loop {
        if step == 1 {
            out.extend_from_slice(&x[off..off + inner]);
        } else {
            out.extend((0..inner).map(|j| x[off + j * step]));
        }
        let mut d = r - 1;
        loop {
            if d == 0 {
                return out;
            }
            d -= 1;
            idx[d] += 1;
            off += gather[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= gather[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}
