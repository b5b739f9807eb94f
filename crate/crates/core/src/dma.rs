//! Causal self-attention with a value-driven dynamic mask.
//!
//! A per-key gate `exp(A · softplus(V W_dt))` is computed from the
//! head-recombined value states. The additive variant drops keys whose gate is
//! below one; the multiplicative variant scales post-softmax weights by the
//! gate. With no gate configured the block is plain causal attention.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rope::{self, RopeConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskVariant {
    Additive,
    Multiplicative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateConfig {
    pub variant: MaskVariant,
    /// Initial per-head `A_dm`.
    #[serde(default = "default_a_init")]
    pub a_init: f64,
    /// Divide gated weights by their row sum (multiplicative variant only).
    #[serde(default)]
    pub renormalize: bool,
}

fn default_a_init() -> f64 {
    -1.0
}

impl GateConfig {
    pub fn new(variant: MaskVariant) -> Self {
        GateConfig {
            variant,
            a_init: default_a_init(),
            renormalize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DmaConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub max_position_embeddings: usize,
    #[serde(default = "default_base")]
    pub rope_base: f64,
    /// `None` gives ungated causal attention.
    #[serde(default)]
    pub gate: Option<GateConfig>,
}

fn default_base() -> f64 {
    10000.0
}

impl DmaConfig {
    pub fn new(d_model: usize, n_heads: usize, max_position_embeddings: usize, gate: Option<GateConfig>) -> Self {
        DmaConfig {
            d_model,
            n_heads,
            max_position_embeddings,
            rope_base: default_base(),
            gate,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn rope(&self) -> RopeConfig {
        RopeConfig {
            head_dim: self.d_head(),
            base: self.rope_base,
            max_position_embeddings: self.max_position_embeddings,
            scaling_factor: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "attention: d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        self.rope().validate()
    }

    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        4 * d * d + self.gate.as_ref().map_or(0, |_| d * self.n_heads + self.n_heads)
    }
}

/// Grow-only key/value cache, `[b, h, T_past, p]` each.
#[derive(Debug, Clone, Default)]
pub struct KvCache {
    pub k: Option<Tensor>,
    pub v: Option<Tensor>,
}

impl KvCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.k.as_ref().map_or(0, |k| k.shape()[2])
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Append `[b, h, T_new, p]` keys and values along the time axis.
pub fn kv_append(cache: &KvCache, k_new: &Tensor, v_new: &Tensor) -> Result<KvCache> {
    if k_new.rank() != 4 || k_new.shape() != v_new.shape() {
        return Err(Error::shape("kv_append", k_new.shape(), v_new.shape()));
    }
    let join = |old: &Option<Tensor>, new: &Tensor| -> Result<Tensor> {
        match old {
            None => Ok(new.clone()),
            Some(o) => {
                if o.shape()[..2] != new.shape()[..2] || o.shape()[3] != new.shape()[3] {
                    return Err(Error::shape("kv_append", o.shape(), new.shape()));
                }
                Tensor::concat(&[o.clone(), new.clone()], 2)
            }
        }
    };
    Ok(KvCache {
        k: Some(join(&cache.k, k_new)?),
        v: Some(join(&cache.v, v_new)?),
    })
}

/// Intermediate results of one attention call, exposed for checks.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    /// Post-mask attention weights `[b, h, T, T_kv]`.
    pub weights: Tensor,
    /// Per-key gate `[b, h, T_kv]`, absent for ungated attention.
    pub gate: Option<Tensor>,
    /// Head outputs before the output projection, `[b, h, T, p]`.
    pub heads: Tensor,
}

#[derive(Debug, Clone)]
pub struct DmaBlock {
    pub cfg: DmaConfig,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_out: Tensor,
    pub w_dt: Option<Tensor>,
    pub a_dm: Option<Tensor>,
}

impl DmaBlock {
    pub fn new<R: Rng>(cfg: DmaConfig, std: f64, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (d, h) = (cfg.d_model, cfg.n_heads);
        let p = |shape: &[usize], rng: &mut R| Tensor::randn(shape, std, rng).detach_param();
        let w_q = p(&[d, d], rng);
        let w_k = p(&[d, d], rng);
        let w_v = p(&[d, d], rng);
        let w_out = p(&[d, d], rng);
        let (w_dt, a_dm) = match &cfg.gate {
            Some(g) => (Some(p(&[d, h], rng)), Some(Tensor::param(&[h], vec![g.a_init; h])?)),
            None => (None, None),
        };
        Ok(DmaBlock {
            cfg,
            w_q,
            w_k,
            w_v,
            w_out,
            w_dt,
            a_dm,
        })
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = vec![
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_out", &self.w_out),
        ];
        if let (Some(w), Some(a)) = (&self.w_dt, &self.a_dm) {
            out.push(("w_dt", w));
            out.push(("a_dm", a));
        }
        out
    }

    /// Gate `exp(A · softplus(dt))` per key, with `dt` from head-major recombined values.
    pub fn dynamic_mask(&self, v_full: &Tensor) -> Result<Option<Tensor>> {
        let (Some(w_dt), Some(a)) = (&self.w_dt, &self.a_dm) else {
            return Ok(None);
        };
        let s = v_full.shape();
        if s.len() != 4 || s[1] != self.cfg.n_heads || s[3] != self.cfg.d_head() {
            return Err(Error::dim(
                "dynamic_mask",
                format!("values {s:?} do not match block heads"),
            ));
        }
        let (b, t) = (s[0], s[2]);
        let recombined = v_full.permute(&[0, 2, 1, 3])?.reshape(&[b, t, self.cfg.d_model])?;
        let dt = recombined.matmul(w_dt)?;
        let gate = dt.softplus().mul(a)?.exp();
        Ok(Some(gate.permute(&[0, 2, 1])?))
    }

    fn heads(&self, x: &Tensor, w: &Tensor) -> Result<Tensor> {
        let (b, t) = (x.shape()[0], x.shape()[1]);
        x.matmul(w)?
            .reshape(&[b, t, self.cfg.n_heads, self.cfg.d_head()])?
            .permute(&[0, 2, 1, 3])
    }

    pub fn forward(&self, x: &Tensor, cache: &KvCache, position_ids: &[usize]) -> Result<(Tensor, KvCache)> {
        let (y, cache, _) = self.forward_traced(x, cache, position_ids)?;
        Ok((y, cache))
    }

    pub fn forward_traced(
        &self,
        x: &Tensor,
        cache: &KvCache,
        position_ids: &[usize],
    ) -> Result<(Tensor, KvCache, AttentionTrace)> {
        let cfg = &self.cfg;
        if x.rank() != 3 || x.shape()[2] != cfg.d_model {
            return Err(Error::dim(
                "attention",
                format!("input {:?} is not [b, T, {}]", x.shape(), cfg.d_model),
            ));
        }
        let (b, t) = (x.shape()[0], x.shape()[1]);
        let (h, p) = (cfg.n_heads, cfg.d_head());
        if position_ids.len() != t {
            return Err(Error::Argument(format!(
                "attention: {} position ids for {t} new positions",
                position_ids.len()
            )));
        }
        if let Some(k) = &cache.k {
            if k.shape()[0] != b || k.shape()[1] != h || k.shape()[3] != p {
                return Err(Error::Argument(format!(
                    "attention: cache {:?} incompatible with batch {b}, {h} heads of {p}",
                    k.shape()
                )));
            }
        }

        let q = self.heads(x, &self.w_q)?;
        let k = self.heads(x, &self.w_k)?;
        let v = self.heads(x, &self.w_v)?;
        let rc = rope::cos_sin(&cfg.rope(), position_ids)?;
        let (q, k) = rope::apply_rotary(&q, &k, &rc)?;
        let cache = kv_append(cache, &k, &v)?;
        let (k_full, v_full) = (cache.k.clone().unwrap(), cache.v.clone().unwrap());
        let past = k_full.shape()[2] - t;
        let tk = past + t;

        let scores = q.matmul(&k_full.t()?)?.scale(1.0 / (p as f64).sqrt());
        let gate = self.dynamic_mask(&v_full)?;

        let mut mask = vec![false; b * h * t * tk];
        let drop_key: Option<Vec<bool>> = match (&gate, &cfg.gate) {
            (Some(g), Some(gc)) if gc.variant == MaskVariant::Additive => {
                Some(g.data().iter().map(|&v| v < 1.0).collect())
            }
            _ => None,
        };
        for bh in 0..b * h {
            for i in 0..t {
                let row = &mut mask[(bh * t + i) * tk..(bh * t + i + 1) * tk];
                for (j, m) in row.iter_mut().enumerate() {
                    *m = j > past + i || drop_key.as_ref().is_some_and(|d| d[bh * tk + j]);
                }
            }
        }
        let mut weights = scores.masked_fill(&mask, f64::NEG_INFINITY)?.softmax_lastdim()?;
        if let (Some(g), Some(gc)) = (&gate, &cfg.gate) {
            if gc.variant == MaskVariant::Multiplicative {
                weights = weights.mul(&g.reshape(&[b, h, 1, tk])?)?;
                if gc.renormalize {
                    let denom = weights.sum(-1, true)?.add_scalar(f64::MIN_POSITIVE);
                    weights = weights.div(&denom)?;
                }
            }
        }
        let heads = weights.matmul(&v_full)?;
        let y = heads
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, t, cfg.d_model])?
            .matmul(&self.w_out)?;
        Ok((y, cache, AttentionTrace { weights, gate, heads }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check_many;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block(gate: Option<GateConfig>, seed: u64) -> DmaBlock {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DmaBlock::new(DmaConfig::new(8, 2, 64, gate), 0.4, &mut rng).unwrap()
    }

    fn with_a(b: &DmaBlock, a: f64) -> DmaBlock {
        let mut b = b.clone();
        b.a_dm = Some(Tensor::param(&[b.cfg.n_heads], vec![a; b.cfg.n_heads]).unwrap());
        b
    }

    fn pos(n: usize) -> Vec<usize> {
        (0..n).collect()
    }

    #[test]
    fn gate_values() {
        let b = block(Some(GateConfig::new(MaskVariant::Additive)), 1);
        let zero_w = DmaBlock {
            w_dt: Some(Tensor::zeros(&[8, 2])),
            ..b.clone()
        };
        let v = Tensor::randn(&[1, 2, 3, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let g = zero_w.dynamic_mask(&v).unwrap().unwrap();
        assert!(g.to_vec().iter().all(|&x| (x - 0.5).abs() < 1e-15));
        let g0 = with_a(&b, 0.0).dynamic_mask(&v).unwrap().unwrap();
        assert!(g0.to_vec().iter().all(|&x| x == 1.0));
        let gp = with_a(&b, 1.0).dynamic_mask(&v).unwrap().unwrap();
        assert!(gp.to_vec().iter().all(|&x| x >= 1.0));
    }

    #[test]
    fn zero_rate_matches_plain_attention() {
        let plain = block(None, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(&[2, 5, 8], 1.0, &mut rng);
        let (yp, _) = plain.forward(&x, &KvCache::new(), &pos(5)).unwrap();
        for variant in [MaskVariant::Additive, MaskVariant::Multiplicative] {
            let mut g = block(Some(GateConfig::new(variant)), 3);
            g.w_q = plain.w_q.clone();
            g.w_k = plain.w_k.clone();
            g.w_v = plain.w_v.clone();
            g.w_out = plain.w_out.clone();
            let (y, _) = with_a(&g, 0.0).forward(&x, &KvCache::new(), &pos(5)).unwrap();
            assert!(y.max_abs_diff(&yp).unwrap() < 1e-12);
        }
    }

    #[test]
    fn uniform_half_gate_halves_output() {
        let b = block(Some(GateConfig::new(MaskVariant::Multiplicative)), 5);
        let b = DmaBlock {
            w_dt: Some(Tensor::zeros(&[8, 2])),
            ..b
        };
        let x = Tensor::randn(&[1, 4, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(6));
        let (yg, _) = b.forward(&x, &KvCache::new(), &pos(4)).unwrap();
        let (y0, _) = with_a(&b, 0.0).forward(&x, &KvCache::new(), &pos(4)).unwrap();
        assert!(yg.max_abs_diff(&y0.scale(0.5)).unwrap() < 1e-15);
    }

    #[test]
    fn gated_head_norm_bounded_by_gate_and_values() {
        let b = with_a(&block(Some(GateConfig::new(MaskVariant::Multiplicative)), 9), 0.8);
        let x = Tensor::randn(&[2, 6, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(10));
        let (_, _, tr) = b.forward_traced(&x, &KvCache::new(), &pos(6)).unwrap();
        let v = b.heads(&x, &b.w_v).unwrap().to_vec();
        let (g, out) = (tr.gate.unwrap().to_vec(), tr.heads.to_vec());
        let (t, p) = (6, b.cfg.d_head());
        let norm = |s: &[f64]| s.iter().map(|u| u * u).sum::<f64>().sqrt();
        for bh in 0..2 * b.cfg.n_heads {
            for i in 0..t {
                // causal: query i sees keys 0..=i
                let gmax = g[bh * t..bh * t + i + 1].iter().cloned().fold(0.0, f64::max);
                let vmax = (0..=i).map(|j| norm(&v[(bh * t + j) * p..][..p])).fold(0.0, f64::max);
                let o = norm(&out[(bh * t + i) * p..][..p]);
                assert!(o <= gmax * vmax * (1.0 + 1e-12), "{o} > {gmax} * {vmax}");
            }
        }
    }

    #[test]
    fn additive_masked_keys_get_zero_weight() {
        let b = block(Some(GateConfig::new(MaskVariant::Additive)), 7);
        // a mix of gates above and below one across keys
        let mut a = with_a(&b, -1.0);
        a.a_dm = Some(Tensor::param(&[2], vec![-1.0, 1.0]).unwrap());
        let x = Tensor::randn(&[1, 6, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(8));
        let (_, _, tr) = a.forward_traced(&x, &KvCache::new(), &pos(6)).unwrap();
        let g = tr.gate.unwrap().to_vec();
        let w = tr.weights.to_vec();
        for hh in 0..2 {
            for i in 0..6 {
                for j in 0..6 {
                    let wv = w[(hh * 6 + i) * 6 + j];
                    if g[hh * 6 + j] < 1.0 || j > i {
                        assert_eq!(wv, 0.0);
                    }
                }
            }
        }
        // head 1 gates are all >= 1, so its rows are ordinary softmax rows
        for i in 0..6 {
            let s: f64 = w[(6 + i) * 6..(6 + i + 1) * 6].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn streaming_matches_full_sequence() {
        for gate in [
            None,
            Some(GateConfig::new(MaskVariant::Additive)),
            Some(GateConfig::new(MaskVariant::Multiplicative)),
        ] {
            let b = block(gate, 9);
            let x = Tensor::randn(&[1, 8, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(10));
            let (full, full_cache) = b.forward(&x, &KvCache::new(), &pos(8)).unwrap();
            let (_, c1) = b.forward(&x.slice(1, 0, 4).unwrap(), &KvCache::new(), &pos(4)).unwrap();
            let (y2, c2) = b.forward(&x.slice(1, 4, 8).unwrap(), &c1, &[4, 5, 6, 7]).unwrap();
            assert!(y2.max_abs_diff(&full.slice(1, 4, 8).unwrap()).unwrap() < 1e-12);
            assert_eq!(c2.len(), 8);
            assert!(c2.k.unwrap().max_abs_diff(full_cache.k.as_ref().unwrap()).unwrap() < 1e-15);
        }
    }

    #[test]
    fn kv_append_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let k1 = Tensor::randn(&[1, 2, 1, 4], 1.0, &mut rng);
        let k2 = Tensor::randn(&[1, 2, 1, 4], 1.0, &mut rng);
        let c = kv_append(&KvCache::new(), &k1, &k1).unwrap();
        assert_eq!(c.k.as_ref().unwrap().to_vec(), k1.to_vec());
        let two = kv_append(&c, &k2, &k2).unwrap();
        let both = Tensor::concat(&[k1.clone(), k2.clone()], 2).unwrap();
        let once = kv_append(&KvCache::new(), &both, &both).unwrap();
        assert_eq!(two.k.unwrap().to_vec(), once.k.unwrap().to_vec());
        assert!(kv_append(&c, &Tensor::zeros(&[1, 3, 1, 4]), &Tensor::zeros(&[1, 3, 1, 4])).is_err());
        let b = block(None, 1);
        assert!(b.forward(&Tensor::zeros(&[1, 2, 8]), &c, &[0]).is_err());
    }

    #[test]
    fn gradients_through_both_variants() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor::randn(&[1, 5, 8], 1.0, &mut rng);
        let w = Tensor::randn(&[1, 5, 8], 1.0, &mut rng);
        for variant in [MaskVariant::Additive, MaskVariant::Multiplicative] {
            let b = block(Some(GateConfig::new(variant)), 13);
            let b = with_a(&b, if variant == MaskVariant::Additive { 0.5 } else { -0.7 });
            let params: Vec<Tensor> = b.params().into_iter().map(|(_, t)| t.clone()).collect();
            let err = grad_check_many(
                || Ok(b.forward(&x, &KvCache::new(), &pos(5))?.0.mul(&w)?.sum_all()),
                &params,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-5, "{variant:?}: {err}");
        }
    }
}
