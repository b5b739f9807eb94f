//! Rotary position embedding shared by attention (Q/K) and SSD (C/B).
//!
//! Frequencies are laid out as `concat(freqs, freqs)` across the `d` lanes so
//! lane `i` pairs with lane `i + d/2`, matching [`rotate_half`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RopeConfig {
    pub head_dim: usize,
    #[serde(default = "default_base")]
    pub base: f64,
    pub max_position_embeddings: usize,
    #[serde(default = "default_scaling")]
    pub scaling_factor: f64,
}

fn default_base() -> f64 {
    10000.0
}

fn default_scaling() -> f64 {
    1.0
}

impl RopeConfig {
    pub fn new(head_dim: usize, max_position_embeddings: usize) -> Self {
        RopeConfig {
            head_dim,
            base: default_base(),
            max_position_embeddings,
            scaling_factor: default_scaling(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 || !self.head_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "rope head_dim must be even and positive, got {}",
                self.head_dim
            )));
        }
        if self.base.is_nan() || self.base <= 1.0 {
            return Err(Error::Config(format!("rope base must exceed 1, got {}", self.base)));
        }
        if self.scaling_factor.is_nan() || self.scaling_factor < 1.0 {
            return Err(Error::Config(format!(
                "rope scaling_factor must be >= 1, got {}",
                self.scaling_factor
            )));
        }
        if self.max_position_embeddings == 0 {
            return Err(Error::Config("rope max_position_embeddings must be positive".into()));
        }
        Ok(())
    }

    /// Base actually used for a request covering `seq_len` positions.
    ///
    /// Past `max_position_embeddings` the base grows by
    /// `((s·seq_len/max) - (s - 1))^(d/(d-2))`.
    pub fn effective_base(&self, seq_len: usize) -> Result<f64> {
        if seq_len <= self.max_position_embeddings {
            return Ok(self.base);
        }
        let d = self.head_dim as f64;
        if self.head_dim <= 2 {
            return Err(Error::Argument(format!(
                "rope base rescaling needs head_dim > 2 (got {}) for sequence length {seq_len}",
                self.head_dim
            )));
        }
        let s = self.scaling_factor;
        let ratio = s * seq_len as f64 / self.max_position_embeddings as f64 - (s - 1.0);
        Ok(self.base * ratio.powf(d / (d - 2.0)))
    }
}

fn inv_freq_for_base(head_dim: usize, base: f64) -> Vec<f64> {
    (0..head_dim / 2)
        .map(|i| 1.0 / base.powf((2 * i) as f64 / head_dim as f64))
        .collect()
}

/// Rotation frequencies `base^(-2(i-1)/d)` for `i = 1..=d/2`, descending from 1.
pub fn build_inv_freq(cfg: &RopeConfig) -> Vec<f64> {
    inv_freq_for_base(cfg.head_dim, cfg.base)
}

/// Per-position cosine and sine tables, `positions × head_dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RopeCache {
    pub head_dim: usize,
    pub positions: Vec<usize>,
    pub base: f64,
    pub cos: Vec<f64>,
    pub sin: Vec<f64>,
}

impl RopeCache {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn cos_tensor(&self) -> Tensor {
        Tensor::new(&[self.len(), self.head_dim], self.cos.clone()).expect("cache shape")
    }

    pub fn sin_tensor(&self) -> Tensor {
        Tensor::new(&[self.len(), self.head_dim], self.sin.clone()).expect("cache shape")
    }

    /// Tables shaped to broadcast against a tensor of `rank` whose sequence axis is `seq_dim`
    /// and whose last axis holds the rotated lanes.
    fn broadcast_tables(&self, rank: usize, seq_dim: usize) -> Result<(Tensor, Tensor)> {
        let mut shape = vec![self.len()];
        shape.extend(std::iter::repeat_n(1, rank - seq_dim - 2));
        shape.push(self.head_dim);
        Ok((
            Tensor::new(&shape, self.cos.clone())?,
            Tensor::new(&shape, self.sin.clone())?,
        ))
    }
}

/// Build cos/sin rows for the requested positions.
///
/// Position ids are unsigned, so the negative-position case of signed callers
/// is rejected by [`cos_sin_signed`].
pub fn cos_sin(cfg: &RopeConfig, position_ids: &[usize]) -> Result<RopeCache> {
    cfg.validate()?;
    let seq_len = position_ids.iter().max().map_or(0, |m| m + 1);
    let base = cfg.effective_base(seq_len)?;
    let inv = inv_freq_for_base(cfg.head_dim, base);
    let d = cfg.head_dim;
    let half = d / 2;
    let mut cos = vec![0.0; position_ids.len() * d];
    let mut sin = vec![0.0; position_ids.len() * d];
    for (row, &m) in position_ids.iter().enumerate() {
        for (i, f) in inv.iter().enumerate() {
            let angle = m as f64 * f;
            let (s, c) = angle.sin_cos();
            cos[row * d + i] = c;
            cos[row * d + half + i] = c;
            sin[row * d + i] = s;
            sin[row * d + half + i] = s;
        }
    }
    Ok(RopeCache {
        head_dim: d,
        positions: position_ids.to_vec(),
        base,
        cos,
        sin,
    })
}

/// [`cos_sin`] for signed position ids; any negative id is an argument error.
pub fn cos_sin_signed(cfg: &RopeConfig, position_ids: &[i64]) -> Result<RopeCache> {
    let ids = position_ids
        .iter()
        .map(|&p| usize::try_from(p).map_err(|_| Error::Argument(format!("negative position id {p}"))))
        .collect::<Result<Vec<_>>>()?;
    cos_sin(cfg, &ids)
}

/// `concat(-x2, x1)` where `x1`, `x2` are the halves of the last dim.
pub fn rotate_half(x: &Tensor) -> Result<Tensor> {
    let d = *x.shape().last().ok_or_else(|| Error::Dim {
        op: "rotate_half",
        msg: "rank-0 input".into(),
    })?;
    if d % 2 != 0 {
        return Err(Error::Dim {
            op: "rotate_half",
            msg: format!("last dim {d} is odd"),
        });
    }
    let half = d / 2;
    let x1 = x.slice(-1, 0, half)?;
    let x2 = x.slice(-1, half, d)?;
    Tensor::concat(&[x2.neg(), x1], -1)
}

/// Rotate `x` by its positions: `x∘cos + rotate_half(x)∘sin`.
pub fn rotate(x: &Tensor, cache: &RopeCache, seq_dim: usize) -> Result<Tensor> {
    let r = x.rank();
    if r < 2 || seq_dim >= r - 1 {
        return Err(Error::Dim {
            op: "apply_rotary",
            msg: format!("sequence dim {seq_dim} invalid for shape {:?}", x.shape()),
        });
    }
    if x.shape()[seq_dim] != cache.len() || x.shape()[r - 1] != cache.head_dim {
        return Err(Error::Dim {
            op: "apply_rotary",
            msg: format!(
                "input {:?} (seq dim {seq_dim}) vs cache of {} positions × {}",
                x.shape(),
                cache.len(),
                cache.head_dim
            ),
        });
    }
    let (cos, sin) = cache.broadcast_tables(r, seq_dim)?;
    x.mul(&cos)?.add(&rotate_half(x)?.mul(&sin)?)
}

/// Rotate a pair of tensors laid out `[..., T, d]` (the attention Q/K layout).
pub fn apply_rotary(a: &Tensor, b: &Tensor, cache: &RopeCache) -> Result<(Tensor, Tensor)> {
    let sa = a.rank().saturating_sub(2);
    let sb = b.rank().saturating_sub(2);
    Ok((rotate(a, cache, sa)?, rotate(b, cache, sb)?))
}

/// Rotate a pair with an explicit sequence axis, e.g. `[b, T, h, n]` C/B with `seq_dim = 1`.
pub fn apply_rotary_at(a: &Tensor, b: &Tensor, cache: &RopeCache, seq_dim: usize) -> Result<(Tensor, Tensor)> {
    Ok((rotate(a, cache, seq_dim)?, rotate(b, cache, seq_dim)?))
}

/// Explicit block-diagonal relative rotation `R_{m-n}` as a dense `d×d` matrix.
///
/// Lane pairs are `(i, i + d/2)`. Each 2×2 block is
/// `[[cos φ, sin φ], [-sin φ, cos φ]]` with `φ = (m - n)·θ_i`, so that
/// `qᵀ R_{m-n} k` equals the dot product of `q` rotated to `m` and `k` rotated to `n`.
pub fn relative_rotation_matrix(cfg: &RopeConfig, offset: i64) -> Vec<f64> {
    let d = cfg.head_dim;
    let half = d / 2;
    let mut r = vec![0.0; d * d];
    for (i, theta) in build_inv_freq(cfg).iter().enumerate() {
        let (s, c) = (offset as f64 * theta).sin_cos();
        let (a, b) = (i, i + half);
        r[a * d + a] = c;
        r[a * d + b] = s;
        r[b * d + a] = -s;
        r[b * d + b] = c;
    }
    r
}

/// Closed-form relative score `qᵀ R_{m-n} k`; a test oracle for [`apply_rotary`].
pub fn relative_score_oracle(q: &[f64], k: &[f64], m: usize, n: usize, cfg: &RopeConfig) -> f64 {
    let d = cfg.head_dim;
    let r = relative_rotation_matrix(cfg, m as i64 - n as i64);
    let mut score = 0.0;
    for i in 0..d {
        let rk: f64 = (0..d).map(|j| r[i * d + j] * k[j]).sum();
        score += q[i] * rk;
    }
    score
}

/// Absolute rotation `R_m` applied to a single vector via the explicit block matrix.
pub fn rotate_explicit(x: &[f64], m: usize, cfg: &RopeConfig) -> Vec<f64> {
    // R_m acting on a column vector is the transpose of the relative form at offset m
    let d = cfg.head_dim;
    let r = relative_rotation_matrix(cfg, m as i64);
    (0..d).map(|i| (0..d).map(|j| r[j * d + i] * x[j]).sum()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(d: usize) -> RopeConfig {
        RopeConfig::new(d, 512)
    }

    fn rotated_vec(x: &[f64], m: usize, c: &RopeConfig) -> Vec<f64> {
        let cache = cos_sin(c, &[m]).unwrap();
        let t = Tensor::new(&[1, x.len()], x.to_vec()).unwrap();
        rotate(&t, &cache, 0).unwrap().to_vec()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn inverse_frequencies() {
        let f = build_inv_freq(&cfg(4));
        assert_eq!(f[0], 1.0);
        assert!((f[1] - 0.01).abs() < 1e-15);
        assert_eq!(build_inv_freq(&cfg(2)), vec![1.0]);
        let f8 = build_inv_freq(&cfg(8));
        assert_eq!(f8[0], 1.0);
        assert!(f8.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn cache_rows() {
        let c = cfg(8);
        let cache = cos_sin(&c, &[0, 3]).unwrap();
        assert!(cache.cos[..8].iter().all(|&v| v == 1.0));
        assert!(cache.sin[..8].iter().all(|&v| v == 0.0));
        let inv = build_inv_freq(&c);
        for (i, f) in inv.iter().enumerate() {
            assert!((cache.cos[8 + i] - (3.0 * f).cos()).abs() < 1e-15);
            assert!((cache.sin[8 + 4 + i] - (3.0 * f).sin()).abs() < 1e-15);
        }
        for (c, s) in cache.cos.iter().zip(&cache.sin) {
            assert!((c * c + s * s - 1.0).abs() < 1e-12);
        }
        assert!(cos_sin_signed(&c, &[0, -1]).is_err());
    }

    #[test]
    fn dynamic_base_rescale() {
        let c = RopeConfig::new(8, 16);
        assert_eq!(cos_sin(&c, &[15]).unwrap().base, c.base);
        let long = cos_sin(&c, &[16]).unwrap();
        assert!(long.base > c.base);
        let expect = c.base * (17.0f64 / 16.0).powf(8.0 / 6.0);
        assert!((long.base - expect).abs() < 1e-9);
        assert!(cos_sin(&RopeConfig::new(2, 4), &[10]).is_err());
    }

    #[test]
    fn rotate_half_examples() {
        let x = Tensor::new(&[4], vec![1., 2., 3., 4.]).unwrap();
        let r = rotate_half(&x).unwrap();
        assert_eq!(r.to_vec(), vec![-3., -4., 1., 2.]);
        assert_eq!(rotate_half(&r).unwrap().to_vec(), vec![-1., -2., -3., -4.]);
        assert_eq!(rotate_half(&Tensor::zeros(&[4])).unwrap().to_vec(), vec![0.0; 4]);
        assert!(rotate_half(&Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn quarter_turn_and_identity() {
        let mut c = cfg(2);
        c.base = 10.0;
        // d=2 has θ=1, so position m turns by m radians; check m=0 and a direct angle
        let q = [1.0, 0.0];
        assert_eq!(rotated_vec(&q, 0, &c), vec![1.0, 0.0]);
        let r = rotated_vec(&q, 1, &c);
        assert!((r[0] - 1f64.cos()).abs() < 1e-15 && (r[1] - 1f64.sin()).abs() < 1e-15);
        // θ = π/2 via a one-position table
        let cache = RopeCache {
            head_dim: 2,
            positions: vec![1],
            base: 0.0,
            cos: vec![(std::f64::consts::FRAC_PI_2).cos(); 2],
            sin: vec![(std::f64::consts::FRAC_PI_2).sin(); 2],
        };
        let out = rotate(&Tensor::new(&[1, 2], q.to_vec()).unwrap(), &cache, 0)
            .unwrap()
            .to_vec();
        assert!(out[0].abs() < 1e-15 && (out[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn relative_oracle_and_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for d in [2, 4, 8, 64] {
            let c = cfg(d);
            let q: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let k: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            assert!((relative_score_oracle(&q, &k, 4, 4, &c) - dot(&q, &k)).abs() < 1e-12);
            let a = relative_score_oracle(&q, &k, 5, 3, &c);
            let b = relative_score_oracle(&q, &k, 7, 5, &c);
            assert!((a - b).abs() < 1e-12);
            let factored = dot(&rotated_vec(&q, 9, &c), &rotated_vec(&k, 2, &c));
            assert!((factored - relative_score_oracle(&q, &k, 9, 2, &c)).abs() < 1e-10);
            let explicit = rotate_explicit(&q, 9, &c);
            let fac = rotated_vec(&q, 9, &c);
            assert!(explicit.iter().zip(&fac).all(|(x, y)| (x - y).abs() < 1e-12));
            let n0: f64 = dot(&q, &q);
            assert!((dot(&fac, &fac) - n0).abs() < 1e-12);
        }
    }
}
