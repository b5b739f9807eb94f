//! State space duality: the same selective scan computed as a masked quadratic
//! product, as a chunked block decomposition and as a token recurrence.
//!
//! Function-level layouts follow the block: `X: [b, T, h, p]`, `dt: [b, T, h]`,
//! `B, C: [b, T, h, n]`, per-head `A, D: [h]`. `A` is the (negative) decay rate;
//! the block derives it as `-exp(A_log)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rope::{self, RopeConfig};
use crate::tensor::Tensor;

/// `out[..., j, i] = a[i+1] + ... + a[j]` for `j >= i`, `-inf` above the diagonal.
///
/// Sums run in increasing `s` from zero, the same order as masking a repeated
/// copy of `a` and taking a cumulative sum down the rows.
pub fn segment_sum(a: &Tensor) -> Result<Tensor> {
    let l = *a
        .shape()
        .last()
        .ok_or_else(|| Error::dim("segment_sum", "rank-0 input"))?;
    if l == 0 {
        return Err(Error::dim("segment_sum", "length must be at least 1"));
    }
    let rows = a.numel() / l;
    let x = a.data();
    let mut out = vec![f64::NEG_INFINITY; rows * l * l];
    for r in 0..rows {
        let src = &x[r * l..(r + 1) * l];
        let dst = &mut out[r * l * l..(r + 1) * l * l];
        for i in 0..l {
            let mut acc = 0.0;
            dst[i * l + i] = 0.0;
            for j in i + 1..l {
                acc += src[j];
                dst[j * l + i] = acc;
            }
        }
    }
    drop(x);
    let mut shape = a.shape().to_vec();
    shape.push(l);
    Ok(Tensor::from_op("segment_sum", shape, out, vec![a.clone()], move |g| {
        let mut gi = vec![0.0; rows * l];
        for r in 0..rows {
            let gr = &g[r * l * l..(r + 1) * l * l];
            // a[s] feeds every (j, i) with i < s <= j
            for i in 0..l {
                let mut acc = 0.0;
                for j in (i + 1..l).rev() {
                    acc += gr[j * l + i];
                    gi[r * l + j] += acc;
                }
            }
        }
        vec![Some(gi)]
    }))
}

/// 1-semiseparable mask `L[j][i] = a[i+1]·…·a[j]` (1 on the diagonal, 0 above).
///
/// Computed in the log domain, so every decay must be strictly positive.
pub fn one_ss(a: &Tensor) -> Result<Tensor> {
    if let Some(bad) = a.data().iter().find(|&&v| v.is_nan() || v <= 0.0) {
        return Err(Error::Numeric(format!("one_ss needs positive decays, got {bad}")));
    }
    one_ss_log(&a.ln())
}

/// [`one_ss`] for decays already in the log domain: `exp(segment_sum(a_log))`.
pub fn one_ss_log(a_log: &Tensor) -> Result<Tensor> {
    Ok(segment_sum(a_log)?.exp())
}

struct Dims {
    b: usize,
    t: usize,
    h: usize,
    p: usize,
    n: usize,
}

fn check_dims(x: &Tensor, dt: &Tensor, a: &Tensor, b: &Tensor, c: &Tensor, d: &Tensor) -> Result<Dims> {
    if x.rank() != 4 {
        return Err(Error::dim(
            "ssd",
            format!("X must be [b, T, h, p], got {:?}", x.shape()),
        ));
    }
    let (bs, t, h, p) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if dt.shape() != [bs, t, h] {
        return Err(Error::shape("ssd dt", x.shape(), dt.shape()));
    }
    if b.rank() != 4 || b.shape()[..3] != [bs, t, h] {
        return Err(Error::shape("ssd B", x.shape(), b.shape()));
    }
    if c.shape() != b.shape() {
        return Err(Error::shape("ssd C", b.shape(), c.shape()));
    }
    if a.shape() != [h] || d.shape() != [h] {
        return Err(Error::dim(
            "ssd",
            format!("A {:?} and D {:?} must both be [{h}]", a.shape(), d.shape()),
        ));
    }
    Ok(Dims {
        b: bs,
        t,
        h,
        p,
        n: b.shape()[3],
    })
}

fn skip_term(x: &Tensor, d: &Tensor, h: usize) -> Result<Tensor> {
    x.mul(&d.reshape(&[h, 1])?)
}

/// Quadratic form: `Y = (L ∘ C Bᵀ)(X·dt) + D·X` per head with `L = exp(segsum(A·dt))`.
pub fn ssd_quadratic(x: &Tensor, dt: &Tensor, a: &Tensor, b: &Tensor, c: &Tensor, d: &Tensor) -> Result<Tensor> {
    let dims = check_dims(x, dt, a, b, c, d)?;
    let xd = x
        .mul(&dt.reshape(&[dims.b, dims.t, dims.h, 1])?)?
        .permute(&[0, 2, 1, 3])?;
    let adt = dt.mul(a)?.permute(&[0, 2, 1])?;
    let l = one_ss_log(&adt)?;
    let cc = c.permute(&[0, 2, 1, 3])?;
    let bb = b.permute(&[0, 2, 1, 3])?;
    let m = cc.matmul(&bb.t()?)?.mul(&l)?;
    let y = m.matmul(&xd)?.permute(&[0, 2, 1, 3])?;
    y.add(&skip_term(x, d, dims.h)?)
}

/// Chunked block decomposition: exact intra-chunk quadratic blocks plus a
/// low-rank state pass between chunks. `T` is padded up to a chunk multiple
/// with zeros and the padding is cut from the result.
pub fn ssd_chunked(
    x: &Tensor,
    dt: &Tensor,
    a: &Tensor,
    b: &Tensor,
    c: &Tensor,
    d: &Tensor,
    chunk_len: usize,
) -> Result<Tensor> {
    if chunk_len < 1 {
        return Err(Error::Argument("ssd_chunked: chunk_len must be at least 1".into()));
    }
    let Dims { b: bs, t, h, p, n } = check_dims(x, dt, a, b, c, d)?;
    if t == 0 {
        return Ok(Tensor::zeros(x.shape()));
    }
    let pad = (chunk_len - t % chunk_len) % chunk_len;
    let nc = (t + pad) / chunk_len;
    let cl = chunk_len;

    let xd = x.mul(&dt.reshape(&[bs, t, h, 1])?)?;
    let adt = dt.mul(a)?;
    // [b, T, h, k] -> [b, h, c, l, k]
    let chunk4 = |v: &Tensor, k: usize| -> Result<Tensor> {
        v.pad(1, 0, pad, 0.0)?
            .reshape(&[bs, nc, cl, h, k])?
            .permute(&[0, 3, 1, 2, 4])
    };
    let xc = chunk4(&xd, p)?;
    let bc = chunk4(b, n)?;
    let cc = chunk4(c, n)?;
    let ac = adt
        .pad(1, 0, pad, 0.0)?
        .reshape(&[bs, nc, cl, h])?
        .permute(&[0, 3, 1, 2])?;
    let a_cumsum = ac.cumsum(-1)?;

    // diagonal blocks
    let l = segment_sum(&ac)?.exp();
    let m = cc.matmul(&bc.t()?)?.mul(&l)?;
    let y_diag = m.matmul(&xc)?;

    // per-chunk final states, [b, h, c, n, p]
    let last = a_cumsum.slice(-1, cl - 1, cl)?;
    let decay_states = last.sub(&a_cumsum)?.exp();
    let states = bc.mul(&decay_states.reshape(&[bs, h, nc, cl, 1])?)?.t()?.matmul(&xc)?;

    // inter-chunk recurrence over chunk boundaries
    let states = Tensor::concat(&[Tensor::zeros(&[bs, h, 1, n, p]), states], 2)?.reshape(&[bs, h, nc + 1, n * p])?;
    let chunk_decay_in = last.reshape(&[bs, h, nc])?.pad(-1, 1, 0, 0.0)?;
    let decay_chunk = segment_sum(&chunk_decay_in)?.exp();
    let new_states = decay_chunk.matmul(&states)?;
    let carried = new_states.slice(2, 0, nc)?.reshape(&[bs, h, nc, n, p])?;

    // off-diagonal blocks: state -> output per chunk
    let y_off = cc
        .matmul(&carried)?
        .mul(&a_cumsum.exp().reshape(&[bs, h, nc, cl, 1])?)?;

    let y = y_diag
        .add(&y_off)?
        .permute(&[0, 2, 3, 1, 4])?
        .reshape(&[bs, nc * cl, h, p])?
        .slice(1, 0, t)?;
    y.add(&skip_term(x, d, h)?)
}

/// Recurrent hidden state `[b, h, p, n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SsdState {
    pub shape: [usize; 4],
    pub h_state: Vec<f64>,
}

impl SsdState {
    pub fn zeros(b: usize, h: usize, p: usize, n: usize) -> Self {
        SsdState {
            shape: [b, h, p, n],
            h_state: vec![0.0; b * h * p * n],
        }
    }

    pub fn tensor(&self) -> Tensor {
        Tensor::new(&self.shape, self.h_state.clone()).expect("state shape")
    }

    pub fn is_finite(&self) -> bool {
        self.h_state.iter().all(|v| v.is_finite())
    }
}

/// Token-by-token recurrence `h ← exp(A·dt)·h + (X·dt) Bᵀ`, `y = h C + D·X`.
///
/// Not differentiable; used for streaming and as an oracle for the other forms.
pub fn ssd_recurrent(
    x: &Tensor,
    dt: &Tensor,
    a: &Tensor,
    b: &Tensor,
    c: &Tensor,
    d: &Tensor,
    state: Option<&SsdState>,
) -> Result<(Tensor, SsdState)> {
    let Dims { b: bs, t, h, p, n } = check_dims(x, dt, a, b, c, d)?;
    let mut st = match state {
        Some(s) if s.shape == [bs, h, p, n] => s.clone(),
        Some(s) => return Err(Error::shape("ssd_recurrent state", &s.shape, &[bs, h, p, n])),
        None => SsdState::zeros(bs, h, p, n),
    };
    let (xv, dtv, av, bv, cv, dv) = (x.data(), dt.data(), a.data(), b.data(), c.data(), d.data());
    let mut y = vec![0.0; xv.len()];
    for bi in 0..bs {
        for ti in 0..t {
            for hi in 0..h {
                let row = (bi * t + ti) * h + hi;
                let step = dtv[row];
                let decay = (av[hi] * step).exp();
                let xs = &xv[row * p..(row + 1) * p];
                let bs_ = &bv[row * n..(row + 1) * n];
                let cs = &cv[row * n..(row + 1) * n];
                let hs = &mut st.h_state[(bi * h + hi) * p * n..(bi * h + hi + 1) * p * n];
                for pi in 0..p {
                    let u = xs[pi] * step;
                    let hrow = &mut hs[pi * n..(pi + 1) * n];
                    let mut out = 0.0;
                    for ni in 0..n {
                        hrow[ni] = decay * hrow[ni] + u * bs_[ni];
                        out += hrow[ni] * cs[ni];
                    }
                    y[row * p + pi] = out + dv[hi] * xs[pi];
                }
            }
        }
    }
    Ok((Tensor::new(x.shape(), y)?, st))
}

/// Which of the three equivalent forms a block evaluates with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SsdForm {
    Chunked,
    Quadratic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsdConfig {
    pub d_model: usize,
    pub n_heads: usize,
    #[serde(default = "one")]
    pub n_groups: usize,
    pub d_state: usize,
    #[serde(default = "default_chunk")]
    pub chunk_len: usize,
    pub max_position_embeddings: usize,
    #[serde(default = "default_base")]
    pub rope_base: f64,
}

fn one() -> usize {
    1
}

fn default_chunk() -> usize {
    16
}

fn default_base() -> f64 {
    10000.0
}

impl SsdConfig {
    pub fn new(d_model: usize, n_heads: usize, d_state: usize, max_position_embeddings: usize) -> Self {
        SsdConfig {
            d_model,
            n_heads,
            n_groups: 1,
            d_state,
            chunk_len: default_chunk(),
            max_position_embeddings,
            rope_base: default_base(),
        }
    }

    pub fn rope(&self) -> RopeConfig {
        RopeConfig {
            head_dim: self.d_state,
            base: self.rope_base,
            max_position_embeddings: self.max_position_embeddings,
            scaling_factor: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "ssd: d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_groups == 0 || !self.n_heads.is_multiple_of(self.n_groups) {
            return Err(Error::Config(format!(
                "ssd: n_heads {} not divisible by n_groups {}",
                self.n_heads, self.n_groups
            )));
        }
        if self.chunk_len < 1 {
            return Err(Error::Config("ssd: chunk_len must be at least 1".into()));
        }
        self.rope().validate()
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn param_count(&self) -> usize {
        let (d, g, n, h) = (self.d_model, self.n_groups, self.d_state, self.n_heads);
        2 * d * g * n + d * d + d * h + 2 * h + d * d
    }
}

#[derive(Debug, Clone)]
pub struct SsdBlock {
    pub cfg: SsdConfig,
    pub w_c: Tensor,
    pub w_b: Tensor,
    pub w_x: Tensor,
    pub w_dt: Tensor,
    pub a_log: Tensor,
    pub d: Tensor,
    pub w_out: Tensor,
}

impl SsdBlock {
    /// Projections ~ N(0, std²); `A_log = 0` (decay rate −1) and `D = 1`.
    pub fn new<R: Rng>(cfg: SsdConfig, std: f64, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (d, g, n, h) = (cfg.d_model, cfg.n_groups, cfg.d_state, cfg.n_heads);
        let p = |shape: &[usize], rng: &mut R| Tensor::randn(shape, std, rng).detach_param();
        Ok(SsdBlock {
            w_c: p(&[d, g * n], rng),
            w_b: p(&[d, g * n], rng),
            w_x: p(&[d, d], rng),
            w_dt: p(&[d, h], rng),
            a_log: Tensor::param(&[h], vec![0.0; h])?,
            d: Tensor::param(&[h], vec![1.0; h])?,
            w_out: p(&[d, d], rng),
            cfg,
        })
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("w_c", &self.w_c),
            ("w_b", &self.w_b),
            ("w_x", &self.w_x),
            ("w_dt", &self.w_dt),
            ("a_log", &self.a_log),
            ("d", &self.d),
            ("w_out", &self.w_out),
        ]
    }

    /// Decay rate `A = -exp(A_log)`, strictly negative.
    pub fn decay_rate(&self) -> Tensor {
        self.a_log.exp().neg()
    }

    /// Projected scan inputs `(X, dt, B, C)` with RoPE applied to `C` and `B`.
    pub fn scan_inputs(&self, x: &Tensor, position_ids: &[usize]) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
        let cfg = &self.cfg;
        if x.rank() != 3 || x.shape()[2] != cfg.d_model {
            return Err(Error::dim(
                "ssd_block",
                format!("input {:?} is not [b, T, {}]", x.shape(), cfg.d_model),
            ));
        }
        let (bs, t) = (x.shape()[0], x.shape()[1]);
        if position_ids.len() != t {
            return Err(Error::Argument(format!(
                "ssd_block: {} position ids for {t} positions",
                position_ids.len()
            )));
        }
        let (h, g, n) = (cfg.n_heads, cfg.n_groups, cfg.d_state);
        let groups = |w: &Tensor| -> Result<Tensor> { x.matmul(w)?.reshape(&[bs, t, g, n])?.repeat_dim(2, h / g) };
        let b = groups(&self.w_b)?;
        let c = groups(&self.w_c)?;
        let xs = x.matmul(&self.w_x)?.reshape(&[bs, t, h, cfg.d_head()])?;
        let cache = rope::cos_sin(&cfg.rope(), position_ids)?;
        let (c, b) = rope::apply_rotary_at(&c, &b, &cache, 1)?;
        let dt = x.matmul(&self.w_dt)?.softplus();
        Ok((xs, dt, b, c))
    }

    pub fn forward(&self, x: &Tensor, position_ids: &[usize]) -> Result<Tensor> {
        self.forward_form(x, position_ids, SsdForm::Chunked)
    }

    pub fn forward_form(&self, x: &Tensor, position_ids: &[usize], form: SsdForm) -> Result<Tensor> {
        let (xs, dt, b, c) = self.scan_inputs(x, position_ids)?;
        let a = self.decay_rate();
        let y = match form {
            SsdForm::Chunked => ssd_chunked(&xs, &dt, &a, &b, &c, &self.d, self.cfg.chunk_len)?,
            SsdForm::Quadratic => ssd_quadratic(&xs, &dt, &a, &b, &c, &self.d)?,
        };
        let (bs, t) = (x.shape()[0], x.shape()[1]);
        y.reshape(&[bs, t, self.cfg.d_model])?.matmul(&self.w_out)
    }
}
