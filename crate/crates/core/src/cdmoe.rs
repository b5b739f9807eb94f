//! Cross-domain mixture of experts with product-key expert retrieval.
//!
//! Each of `n_h` retrieval heads splits its query into two halves and scores
//! each half against `√n_e` sub-keys. The best `k` of each half are combined
//! (`k²` candidates, expert id `i_x·√n_e + i_y`) and the best `k` combined
//! scores select single-neuron experts `σ(x·d_e · s)·u_e`. A dense
//! up/down projection runs alongside and the two branches are summed.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{desc_then_index, gemm, topk_row, Activation, IndexTensor, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CdMoeConfig {
    pub d_model: usize,
    pub d_cd: usize,
    pub d_ret: usize,
    pub n_experts: usize,
    pub n_heads: usize,
    pub k: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl CdMoeConfig {
    pub fn new(d_model: usize, d_cd: usize, d_ret: usize, n_experts: usize, n_heads: usize, k: usize) -> Self {
        CdMoeConfig {
            d_model,
            d_cd,
            d_ret,
            n_experts,
            n_heads,
            k,
            activation: Activation::Silu,
        }
    }

    /// `√n_e`, the number of sub-keys per half.
    pub fn num_keys(&self) -> usize {
        isqrt(self.n_experts)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.num_keys();
        if self.n_experts == 0 || s * s != self.n_experts {
            return Err(Error::Config(format!(
                "cdmoe: n_experts {} is not a perfect square",
                self.n_experts
            )));
        }
        if self.d_ret == 0 || !self.d_ret.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "cdmoe: d_ret {} must be even and positive",
                self.d_ret
            )));
        }
        if self.k == 0 || self.k > s {
            return Err(Error::Config(format!("cdmoe: k {} must lie in 1..={s}", self.k)));
        }
        if self.n_heads == 0 || self.d_model == 0 {
            return Err(Error::Config("cdmoe: n_heads and d_model must be positive".into()));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let (d, s) = (self.d_model, self.num_keys());
        d * self.n_heads * self.d_ret + self.n_heads * s * self.d_ret + 2 * self.n_experts * d + 2 * d * self.d_cd
    }
}

pub(crate) fn isqrt(n: usize) -> usize {
    let mut r = (n as f64).sqrt() as usize;
    while r * r > n {
        r -= 1;
    }
    while (r + 1) * (r + 1) <= n {
        r += 1;
    }
    r
}

/// Expert id for sub-key pair `(i_x, i_y)`.
pub fn encode_expert(ix: usize, iy: usize, num_keys: usize) -> usize {
    ix * num_keys + iy
}

pub fn decode_expert(e: usize, num_keys: usize) -> (usize, usize) {
    (e / num_keys, e % num_keys)
}

/// Top-`k` combined scores from two halves.
///
/// Each half keeps its own top `k`; the `k²` sums are ranked descending with
/// ties broken toward the lower expert id. Returns `(score, expert)` pairs.
pub fn product_key_topk(sx: &[f64], sy: &[f64], k: usize) -> Vec<(f64, usize)> {
    let nk = sx.len();
    let tx = topk_row(sx, k);
    let ty = topk_row(sy, k);
    let mut all = Vec::with_capacity(tx.len() * ty.len());
    for &(vx, ix) in &tx {
        for &(vy, iy) in &ty {
            all.push((vx + vy, encode_expert(ix, iy, nk)));
        }
    }
    all.sort_by(|a, b| desc_then_index(*a, *b));
    all.truncate(k);
    all
}

/// Exhaustive top-`k` over all `n_e` combined scores with the same tie rule.
pub fn brute_force_topk(sx: &[f64], sy: &[f64], k: usize) -> Vec<(f64, usize)> {
    let nk = sx.len();
    let mut all = Vec::with_capacity(nk * nk);
    for (ix, &vx) in sx.iter().enumerate() {
        for (iy, &vy) in sy.iter().enumerate() {
            all.push((vx + vy, encode_expert(ix, iy, nk)));
        }
    }
    all.sort_by(|a, b| desc_then_index(*a, *b));
    all.truncate(k);
    all
}

/// Selected experts per `(position, head)`: `[b, T, n_h, k]`.
#[derive(Debug, Clone)]
pub struct RetrievalResult {
    pub scores: Tensor,
    pub indices: IndexTensor,
}

/// Which selection rule a raw retrieval pass uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    ProductKey,
    BruteForce,
}

/// Candidate scores examined by a retrieval pass (sub-key dot products plus combined sums).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RetrievalCost {
    pub candidates: u64,
}

#[derive(Debug, Clone)]
pub struct CdMoeBlock {
    pub cfg: CdMoeConfig,
    pub w_q: Tensor,
    /// `[n_h, √n_e, 2, d_ret/2]`.
    pub keys: Tensor,
    pub down_embed: Tensor,
    pub up_embed: Tensor,
    pub w_cd_up: Tensor,
    pub w_cd_down: Tensor,
}

impl CdMoeBlock {
    /// Projections and embeddings ~ N(0, std²); sub-keys ~ U(±1/√(d_ret/2)).
    pub fn new<R: Rng>(cfg: CdMoeConfig, std: f64, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (d, h, half, s) = (cfg.d_model, cfg.n_heads, cfg.d_ret / 2, cfg.num_keys());
        let p = |shape: &[usize], rng: &mut R| Tensor::randn(shape, std, rng).detach_param();
        let w_q = p(&[d, h * cfg.d_ret], rng);
        let bound = 1.0 / (half as f64).sqrt();
        let keys = Tensor::rand_uniform(&[h, s, 2, half], -bound, bound, rng).detach_param();
        let down_embed = p(&[cfg.n_experts, d], rng);
        let up_embed = p(&[cfg.n_experts, d], rng);
        let w_cd_up = p(&[d, cfg.d_cd], rng);
        let w_cd_down = p(&[cfg.d_cd, d], rng);
        Ok(CdMoeBlock {
            cfg,
            w_q,
            keys,
            down_embed,
            up_embed,
            w_cd_up,
            w_cd_down,
        })
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("w_q", &self.w_q),
            ("keys", &self.keys),
            ("down_embed", &self.down_embed),
            ("up_embed", &self.up_embed),
            ("w_cd_up", &self.w_cd_up),
            ("w_cd_down", &self.w_cd_down),
        ]
    }

    fn flat(&self, x: &Tensor) -> Result<(usize, usize, Tensor)> {
        let d = self.cfg.d_model;
        if x.rank() != 3 || x.shape()[2] != d {
            return Err(Error::dim("cdmoe", format!("input {:?} is not [b, T, {d}]", x.shape())));
        }
        let (b, t) = (x.shape()[0], x.shape()[1]);
        Ok((b, t, x.reshape(&[b * t, d])?))
    }

    /// Half-query similarities `[2, n_h, N, √n_e]`.
    fn similarity(&self, xf: &Tensor) -> Result<Tensor> {
        let (h, half) = (self.cfg.n_heads, self.cfg.d_ret / 2);
        let n = xf.shape()[0];
        let q = xf
            .matmul(&self.w_q)?
            .reshape(&[n, 2, h, half])?
            .permute(&[1, 2, 0, 3])?;
        let keys = self.keys.permute(&[2, 0, 3, 1])?;
        q.matmul(&keys)
    }

    fn select(&self, sim: &Tensor, b: usize, t: usize, brute: bool) -> Result<RetrievalResult> {
        let (h, k, nk) = (self.cfg.n_heads, self.cfg.k, self.cfg.num_keys());
        let n = b * t;
        let s = sim.data();
        let half_row = |p: usize, hi: usize, ni: usize| {
            let off = ((p * h + hi) * n + ni) * nk;
            &s[off..off + nk]
        };
        let mut ix = vec![0usize; h * n * k];
        let mut iy = vec![0usize; h * n * k];
        let mut experts = vec![0usize; n * h * k];
        for hi in 0..h {
            for ni in 0..n {
                let (sx, sy) = (half_row(0, hi, ni), half_row(1, hi, ni));
                let top = if brute {
                    brute_force_topk(sx, sy, k)
                } else {
                    product_key_topk(sx, sy, k)
                };
                for (slot, &(_, e)) in top.iter().enumerate() {
                    let (a, c) = decode_expert(e, nk);
                    ix[(hi * n + ni) * k + slot] = a;
                    iy[(hi * n + ni) * k + slot] = c;
                    experts[(ni * h + hi) * k + slot] = e;
                }
            }
        }
        drop(s);
        let ix = IndexTensor::new(&[h, n, k], ix)?;
        let iy = IndexTensor::new(&[h, n, k], iy)?;
        let sx = sim.slice(0, 0, 1)?.reshape(&[h, n, nk])?.take_along_lastdim(&ix)?;
        let sy = sim.slice(0, 1, 2)?.reshape(&[h, n, nk])?.take_along_lastdim(&iy)?;
        let scores = sx.add(&sy)?.permute(&[1, 0, 2])?.reshape(&[b, t, h, k])?;
        Ok(RetrievalResult {
            scores,
            indices: IndexTensor::new(&[b, t, h, k], experts)?,
        })
    }

    /// Two-stage product-key retrieval. Scores carry gradients; indices do not.
    pub fn retrieve(&self, x: &Tensor) -> Result<RetrievalResult> {
        let (b, t, xf) = self.flat(x)?;
        let sim = self.similarity(&xf)?;
        self.select(&sim, b, t, false)
    }

    /// Exhaustive retrieval over every expert; the correctness oracle for [`CdMoeBlock::retrieve`].
    pub fn brute_force_retrieve(&self, x: &Tensor) -> Result<RetrievalResult> {
        let (b, t, xf) = self.flat(x)?;
        let sim = self.similarity(&xf)?;
        self.select(&sim, b, t, true)
    }

    /// `Σ_heads Σ_k σ(x·d_e · s_e) u_e` for given retrieval results.
    pub fn expert_branch(&self, x: &Tensor, r: &RetrievalResult) -> Result<Tensor> {
        let (b, t, xf) = self.flat(x)?;
        let (n, d, hk) = (b * t, self.cfg.d_model, self.cfg.n_heads * self.cfg.k);
        let idx = IndexTensor::new(&[n, hk], r.indices.data.clone())?;
        let down = self.down_embed.gather_rows(&idx)?;
        let up = self.up_embed.gather_rows(&idx)?;
        let xd = down.matmul(&xf.reshape(&[n, d, 1])?)?.reshape(&[n, hk])?;
        let w = self.cfg.activation.apply(&xd.mul(&r.scores.reshape(&[n, hk])?)?);
        w.reshape(&[n, 1, hk])?.matmul(&up)?.reshape(&[b, t, d])
    }

    /// Dense cross-domain branch `σ(x W_up) W_down`.
    pub fn dense_branch(&self, x: &Tensor) -> Result<Tensor> {
        let h = x.matmul(&self.w_cd_up)?;
        self.cfg.activation.apply(&h).matmul(&self.w_cd_down)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let r = self.retrieve(x)?;
        self.dense_branch(x)?.add(&self.expert_branch(x, &r)?)
    }

    /// Expert branch on raw row-major tokens `[n, d_model]` without autodiff.
    ///
    /// This is the timed path of the retrieval benchmark.
    pub fn expert_branch_raw(&self, x: &[f64], n: usize, selector: Selector) -> (Vec<f64>, RetrievalCost) {
        let cfg = &self.cfg;
        let (d, h, k, nk, half) = (cfg.d_model, cfg.n_heads, cfg.k, cfg.num_keys(), cfg.d_ret / 2);
        let w_q = self.w_q.data();
        let keys = self.keys.data();
        let down = self.down_embed.data();
        let up = self.up_embed.data();
        let mut q = vec![0.0; n * h * cfg.d_ret];
        gemm(n, d, h * cfg.d_ret, &x[..n * d], &w_q, &mut q);
        let mut out = vec![0.0; n * d];
        let mut cost = RetrievalCost::default();
        let mut sx = vec![0.0; nk];
        let mut sy = vec![0.0; nk];
        for ti in 0..n {
            let xr = &x[ti * d..(ti + 1) * d];
            let yr = &mut out[ti * d..(ti + 1) * d];
            let qr = &q[ti * h * cfg.d_ret..(ti + 1) * h * cfg.d_ret];
            for hi in 0..h {
                let qx = &qr[hi * half..(hi + 1) * half];
                let qy = &qr[(h + hi) * half..(h + hi + 1) * half];
                for kk in 0..nk {
                    let kx = &keys[((hi * nk + kk) * 2) * half..((hi * nk + kk) * 2 + 1) * half];
                    let ky = &keys[((hi * nk + kk) * 2 + 1) * half..((hi * nk + kk) * 2 + 2) * half];
                    sx[kk] = dot(qx, kx);
                    sy[kk] = dot(qy, ky);
                }
                let top = match selector {
                    Selector::ProductKey => {
                        cost.candidates += (2 * nk + k * k) as u64;
                        product_key_topk(&sx, &sy, k)
                    }
                    Selector::BruteForce => {
                        cost.candidates += (2 * nk + nk * nk) as u64;
                        brute_force_topk(&sx, &sy, k)
                    }
                };
                for (s, e) in top {
                    let w = cfg.activation.scalar(dot(xr, &down[e * d..(e + 1) * d]) * s);
                    for (o, u) in yr.iter_mut().zip(&up[e * d..(e + 1) * d]) {
                        *o += w * u;
                    }
                }
            }
        }
        (out, cost)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Conventional routed mixture of single-neuron experts used as a timing baseline.
///
/// A linear router scores every expert, the top `k` are mixed with softmax
/// weights over their router scores, and `k` shared experts are always active.
#[derive(Debug, Clone)]
pub struct NaiveRoutedMoe {
    pub d_model: usize,
    pub n_experts: usize,
    pub k: usize,
    pub activation: Activation,
    pub router: Vec<f64>,
    pub down: Vec<f64>,
    pub up: Vec<f64>,
    pub shared_down: Vec<f64>,
    pub shared_up: Vec<f64>,
}

impl NaiveRoutedMoe {
    pub fn new<R: Rng>(d_model: usize, n_experts: usize, k: usize, std: f64, rng: &mut R) -> Result<Self> {
        if k == 0 || k > n_experts {
            return Err(Error::Config(format!("naive moe: k {k} must lie in 1..={n_experts}")));
        }
        let mut draw = |len: usize| Tensor::randn(&[len], std, rng).to_vec();
        Ok(NaiveRoutedMoe {
            d_model,
            n_experts,
            k,
            activation: Activation::Silu,
            router: draw(n_experts * d_model),
            down: draw(n_experts * d_model),
            up: draw(n_experts * d_model),
            shared_down: draw(k * d_model),
            shared_up: draw(k * d_model),
        })
    }

    /// Router scores of every expert for one token.
    pub fn router_scores(&self, x: &[f64]) -> Vec<f64> {
        let d = self.d_model;
        (0..self.n_experts)
            .map(|e| dot(x, &self.router[e * d..(e + 1) * d]))
            .collect()
    }

    /// Top-`k` `(score, expert)` by linear scan.
    pub fn route(&self, x: &[f64]) -> Vec<(f64, usize)> {
        topk_row(&self.router_scores(x), self.k)
    }

    pub fn forward_raw(&self, x: &[f64], n: usize) -> Vec<f64> {
        let d = self.d_model;
        let mut out = vec![0.0; n * d];
        let mut scores = vec![0.0; self.n_experts];
        for ti in 0..n {
            let xr = &x[ti * d..(ti + 1) * d];
            for (e, s) in scores.iter_mut().enumerate() {
                *s = dot(xr, &self.router[e * d..(e + 1) * d]);
            }
            let top = topk_row(&scores, self.k);
            let m = top[0].0;
            let z: f64 = top.iter().map(|(s, _)| (s - m).exp()).sum();
            let yr = &mut out[ti * d..(ti + 1) * d];
            for &(s, e) in &top {
                let g = (s - m).exp() / z;
                let w = g * self.activation.scalar(dot(xr, &self.down[e * d..(e + 1) * d]));
                for (o, u) in yr.iter_mut().zip(&self.up[e * d..(e + 1) * d]) {
                    *o += w * u;
                }
            }
            for j in 0..self.k {
                let w = self.activation.scalar(dot(xr, &self.shared_down[j * d..(j + 1) * d]));
                for (o, u) in yr.iter_mut().zip(&self.shared_up[j * d..(j + 1) * d]) {
                    *o += w * u;
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check_many;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block(n_e: usize, k: usize, seed: u64) -> CdMoeBlock {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        CdMoeBlock::new(CdMoeConfig::new(8, 12, 6, n_e, 2, k), 0.5, &mut rng).unwrap()
    }

    #[test]
    fn index_encoding() {
        assert_eq!(encode_expert(2, 3, 4), 11);
        for nk in [1, 4, 8] {
            let mut seen = vec![false; nk * nk];
            for ix in 0..nk {
                for iy in 0..nk {
                    let e = encode_expert(ix, iy, nk);
                    assert!(!std::mem::replace(&mut seen[e], true));
                    assert_eq!(decode_expert(e, nk), (ix, iy));
                }
            }
        }
        assert_eq!(isqrt(16384), 128);
        assert_eq!(isqrt(15), 3);
    }

    #[test]
    fn config_validation() {
        assert!(CdMoeConfig::new(8, 8, 4, 15, 1, 1).validate().is_err());
        assert!(CdMoeConfig::new(8, 8, 5, 16, 1, 1).validate().is_err());
        assert!(CdMoeConfig::new(8, 8, 4, 16, 1, 5).validate().is_err());
        assert!(CdMoeConfig::new(8, 8, 4, 16, 1, 4).validate().is_ok());
    }

    #[test]
    fn constructed_maximum() {
        let sx = [5.0, 1.0, 0.0, -1.0];
        let sy = [3.0, 2.0, 1.0, 0.0];
        assert_eq!(product_key_topk(&sx, &sy, 1), vec![(8.0, 0)]);
        let sx = [0.0, 0.0, 9.0, 0.0];
        let sy = [0.0, 0.0, 0.0, 9.0];
        assert_eq!(product_key_topk(&sx, &sy, 1)[0].1, 11);
    }

    #[test]
    fn product_key_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for nk in [4, 8, 16] {
            for k in [1, 2, 4] {
                for _ in 0..20 {
                    let sx = Tensor::randn(&[nk], 1.0, &mut rng).to_vec();
                    let sy = Tensor::randn(&[nk], 1.0, &mut rng).to_vec();
                    assert_eq!(product_key_topk(&sx, &sy, k), brute_force_topk(&sx, &sy, k));
                }
            }
        }
        // exhaustive case: k = √n_e at the half stage still finds the full order's head
        let sx = [0.3, -0.2, 0.9];
        let sy = [0.1, 0.4, -0.5];
        let all = brute_force_topk(&sx, &sy, 9);
        assert_eq!(all.len(), 9);
        assert!(all.windows(2).all(|w| w[0].0 >= w[1].0));
        assert_eq!(product_key_topk(&sx, &sy, 3), all[..3].to_vec());
        // ties at every stage
        let flat = [1.0; 4];
        assert_eq!(product_key_topk(&flat, &flat, 3), brute_force_topk(&flat, &flat, 3));
    }

    #[test]
    fn block_retrieval_matches_oracle() {
        for (n_e, k) in [(16, 2), (64, 4), (256, 1)] {
            let b = block(n_e, k, n_e as u64);
            let x = Tensor::randn(&[2, 3, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(7));
            let r = b.retrieve(&x).unwrap();
            let o = b.brute_force_retrieve(&x).unwrap();
            assert_eq!(r.indices, o.indices);
            assert_eq!(r.scores.to_vec(), o.scores.to_vec());
            for slot in r.indices.data.chunks(k) {
                let mut s = slot.to_vec();
                s.dedup();
                assert_eq!(s.len(), k);
            }
            for row in r.scores.to_vec().chunks(k) {
                assert!(row.windows(2).all(|w| w[0] >= w[1]));
            }
        }
    }

    #[test]
    fn branch_structure() {
        let b = block(16, 2, 3);
        let x = Tensor::randn(&[1, 4, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(4));
        let y = b.forward(&x).unwrap();
        let r = b.retrieve(&x).unwrap();
        let sum = b
            .expert_branch(&x, &r)
            .unwrap()
            .add(&b.dense_branch(&x).unwrap())
            .unwrap();
        assert_eq!(y.to_vec(), sum.to_vec());

        let zeroed = CdMoeBlock {
            down_embed: Tensor::zeros(&[16, 8]),
            up_embed: Tensor::zeros(&[16, 8]),
            ..b.clone()
        };
        assert_eq!(
            zeroed.forward(&x).unwrap().to_vec(),
            b.dense_branch(&x).unwrap().to_vec()
        );

        // one head, k = 1, basis up-vector: output is σ(x·d·s)·e_3
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut single = CdMoeBlock::new(CdMoeConfig::new(8, 4, 4, 1, 1, 1), 0.5, &mut rng).unwrap();
        single.w_cd_up = Tensor::zeros(&[8, 4]);
        let mut u = vec![0.0; 8];
        u[3] = 1.0;
        single.up_embed = Tensor::new(&[1, 8], u).unwrap();
        let y = single.forward(&x).unwrap().to_vec();
        let r = single.retrieve(&x).unwrap();
        let (xv, dv, sv) = (x.to_vec(), single.down_embed.to_vec(), r.scores.to_vec());
        for t in 0..4 {
            let z = dot(&xv[t * 8..(t + 1) * 8], &dv) * sv[t];
            for c in 0..8 {
                let e = if c == 3 { Activation::Silu.scalar(z) } else { 0.0 };
                assert!((y[t * 8 + c] - e).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn raw_path_matches_tensor_path() {
        let b = block(64, 4, 9);
        let x = Tensor::randn(&[1, 5, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(10));
        let r = b.retrieve(&x).unwrap();
        let tensor_out = b.expert_branch(&x, &r).unwrap().to_vec();
        let (raw, cost) = b.expert_branch_raw(&x.to_vec(), 5, Selector::ProductKey);
        let (brute, bcost) = b.expert_branch_raw(&x.to_vec(), 5, Selector::BruteForce);
        for ((a, c), e) in raw.iter().zip(&brute).zip(&tensor_out) {
            assert!((a - e).abs() < 1e-12 && (c - e).abs() < 1e-12);
        }
        assert_eq!(cost.candidates, 5 * 2 * (2 * 8 + 16));
        assert_eq!(bcost.candidates, 5 * 2 * (2 * 8 + 64));
    }

    #[test]
    fn retrieval_cost_grows_with_root_of_experts() {
        let x = Tensor::randn(&[1, 1, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(11)).to_vec();
        let cost = |n_e: usize, sel| block(n_e, 2, 1).expert_branch_raw(&x, 1, sel).1.candidates as f64;
        let (pk_small, pk_big) = (cost(64, Selector::ProductKey), cost(4096, Selector::ProductKey));
        let (bf_small, bf_big) = (cost(64, Selector::BruteForce), cost(4096, Selector::BruteForce));
        // √n_e grows 8×, n_e grows 64×
        assert!(pk_big / pk_small < 8.0);
        assert!(bf_big / bf_small > 32.0);
    }

    #[test]
    fn gradients() {
        let b = block(16, 2, 12);
        let x = Tensor::randn(&[1, 3, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(13));
        let w = Tensor::randn(&[1, 3, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(14));
        let params: Vec<Tensor> = b.params().into_iter().map(|(_, t)| t.clone()).collect();
        let before = b.retrieve(&x).unwrap().indices;
        let err = grad_check_many(|| Ok(b.forward(&x)?.mul(&w)?.sum_all()), &params, 1e-6).unwrap();
        assert_eq!(b.retrieve(&x).unwrap().indices, before);
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn naive_routing() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let moe = NaiveRoutedMoe::new(6, 10, 3, 0.5, &mut rng).unwrap();
        let x = Tensor::randn(&[6], 1.0, &mut rng).to_vec();
        let mut all: Vec<(f64, usize)> = moe.router_scores(&x).into_iter().zip(0..).collect();
        all.sort_by(|a, b| desc_then_index(*a, *b));
        assert_eq!(moe.route(&x), all[..3].to_vec());

        // all experts active with equal router scores: routed part is the mean expert output
        let mut flat = NaiveRoutedMoe::new(6, 4, 4, 0.5, &mut rng).unwrap();
        flat.router = vec![0.0; 24];
        flat.shared_up = vec![0.0; 24];
        let y = flat.forward_raw(&x, 1);
        let mut mean = vec![0.0; 6];
        for e in 0..4 {
            let w = flat.activation.scalar(dot(&x, &flat.down[e * 6..(e + 1) * 6]));
            for (m, u) in mean.iter_mut().zip(&flat.up[e * 6..(e + 1) * 6]) {
                *m += w * u / 4.0;
            }
        }
        assert!(y.iter().zip(&mean).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(NaiveRoutedMoe::new(6, 4, 5, 0.5, &mut rng).is_err());
    }
}
