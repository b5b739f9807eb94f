//! Language-model assembly, optimizer, learning-rate schedule and checkpoints.
//!
//! A model is an embedding, a list of residual units and an LM head. Each unit
//! holds an optional sequence block (SSD or attention) and an optional state
//! block (MLP or CDMoE), each wrapped as `h ← r·h + block(rmsnorm(h))` with a
//! learnable scalar `r`.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cdmoe::{CdMoeBlock, CdMoeConfig};
use crate::dma::{DmaBlock, DmaConfig, GateConfig, KvCache, MaskVariant};
use crate::error::{Error, Result};
use crate::ssd::{SsdBlock, SsdConfig};
use crate::tensor::{Activation, IndexTensor, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeqKind {
    Ssd,
    Qcattn,
    DmaAdd,
    DmaMul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateKind {
    Mlp,
    Cdmoe,
}

/// Block arrangement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Layout {
    /// Per macro block: `ssd_per_macro` SSD units then one dynamic-mask attention unit.
    Cheems {
        n_macro_blocks: usize,
        ssd_per_macro: usize,
    },
    /// Per macro block: one dynamic-mask attention unit then `state_blocks` state blocks in total.
    Doge { n_macro_blocks: usize, state_blocks: usize },
    /// One unit per listed sequence block.
    Stack { layers: Vec<SeqKind> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsdSettings {
    pub n_heads: usize,
    #[serde(default = "one")]
    pub n_groups: usize,
    pub d_state: usize,
    pub chunk_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttnSettings {
    pub n_heads: usize,
    /// Variant used by the dynamic-mask units of `cheems` and `doge` layouts.
    pub variant: MaskVariant,
    #[serde(default = "neg_one")]
    pub a_init: f64,
    #[serde(default)]
    pub renormalize: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CdMoeSettings {
    pub d_cd: usize,
    pub d_ret: usize,
    pub n_experts: usize,
    pub n_heads: usize,
    pub k: usize,
}

fn one() -> usize {
    1
}

fn neg_one() -> f64 {
    -1.0
}

fn default_eps() -> f64 {
    1e-6
}

fn default_std() -> f64 {
    0.02
}

fn default_base() -> f64 {
    10000.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub layout: Layout,
    pub state_transform: StateKind,
    pub ssd: SsdSettings,
    pub attention: AttnSettings,
    pub cdmoe: CdMoeSettings,
    pub mlp_hidden: usize,
    #[serde(default)]
    pub activation: Activation,
    pub max_position_embeddings: usize,
    #[serde(default = "default_base")]
    pub rope_base: f64,
    #[serde(default = "default_eps")]
    pub rmsnorm_eps: f64,
    #[serde(default)]
    pub tie_embeddings: bool,
    #[serde(default = "default_std")]
    pub init_std: f64,
}

/// One residual unit's sub-block kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UnitPlan {
    pub seq: Option<SeqKind>,
    pub state: Option<StateKind>,
}

impl ModelConfig {
    /// Small Cheems configuration sized for tests and the overfit sanity loop.
    pub fn micro(vocab_size: usize, d_model: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model,
            layout: Layout::Cheems {
                n_macro_blocks: 1,
                ssd_per_macro: 7,
            },
            state_transform: StateKind::Cdmoe,
            ssd: SsdSettings {
                n_heads: 2,
                n_groups: 1,
                d_state: 4,
                chunk_len: 4,
            },
            attention: AttnSettings {
                n_heads: 2,
                variant: MaskVariant::Multiplicative,
                a_init: -1.0,
                renormalize: false,
            },
            cdmoe: CdMoeSettings {
                d_cd: d_model,
                d_ret: 4,
                n_experts: 16,
                n_heads: 1,
                k: 2,
            },
            mlp_hidden: 2 * d_model,
            activation: Activation::Silu,
            max_position_embeddings: 256,
            rope_base: default_base(),
            rmsnorm_eps: default_eps(),
            tie_embeddings: false,
            init_std: default_std(),
        }
    }

    fn dma_kind(&self) -> SeqKind {
        match self.attention.variant {
            MaskVariant::Additive => SeqKind::DmaAdd,
            MaskVariant::Multiplicative => SeqKind::DmaMul,
        }
    }

    /// Unit sequence implied by the layout.
    pub fn plan(&self) -> Vec<UnitPlan> {
        let st = Some(self.state_transform);
        let mut units = Vec::new();
        match &self.layout {
            Layout::Cheems {
                n_macro_blocks,
                ssd_per_macro,
            } => {
                for _ in 0..*n_macro_blocks {
                    for _ in 0..*ssd_per_macro {
                        units.push(UnitPlan {
                            seq: Some(SeqKind::Ssd),
                            state: st,
                        });
                    }
                    units.push(UnitPlan {
                        seq: Some(self.dma_kind()),
                        state: st,
                    });
                }
            }
            Layout::Doge {
                n_macro_blocks,
                state_blocks,
            } => {
                for _ in 0..*n_macro_blocks {
                    units.push(UnitPlan {
                        seq: Some(self.dma_kind()),
                        state: st,
                    });
                    for _ in 1..*state_blocks {
                        units.push(UnitPlan { seq: None, state: st });
                    }
                }
            }
            Layout::Stack { layers } => {
                units.extend(layers.iter().map(|&k| UnitPlan {
                    seq: Some(k),
                    state: st,
                }));
            }
        }
        units
    }

    pub fn ssd_config(&self) -> SsdConfig {
        SsdConfig {
            d_model: self.d_model,
            n_heads: self.ssd.n_heads,
            n_groups: self.ssd.n_groups,
            d_state: self.ssd.d_state,
            chunk_len: self.ssd.chunk_len,
            max_position_embeddings: self.max_position_embeddings,
            rope_base: self.rope_base,
        }
    }

    pub fn attention_config(&self, kind: SeqKind) -> DmaConfig {
        let gate = |variant| GateConfig {
            variant,
            a_init: self.attention.a_init,
            renormalize: self.attention.renormalize,
        };
        let gate = match kind {
            SeqKind::DmaAdd => Some(gate(MaskVariant::Additive)),
            SeqKind::DmaMul => Some(gate(MaskVariant::Multiplicative)),
            _ => None,
        };
        DmaConfig {
            d_model: self.d_model,
            n_heads: self.attention.n_heads,
            max_position_embeddings: self.max_position_embeddings,
            rope_base: self.rope_base,
            gate,
        }
    }

    pub fn cdmoe_config(&self) -> CdMoeConfig {
        CdMoeConfig {
            d_model: self.d_model,
            d_cd: self.cdmoe.d_cd,
            d_ret: self.cdmoe.d_ret,
            n_experts: self.cdmoe.n_experts,
            n_heads: self.cdmoe.n_heads,
            k: self.cdmoe.k,
            activation: self.activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.d_model == 0 {
            return Err(Error::Config("vocab_size and d_model must be positive".into()));
        }
        let plan = self.plan();
        if plan.is_empty() {
            return Err(Error::Config("layout produces no units".into()));
        }
        if let Layout::Doge { state_blocks: 0, .. } = self.layout {
            return Err(Error::Config("doge layout needs at least one state block".into()));
        }
        for u in &plan {
            match u.seq {
                Some(SeqKind::Ssd) => self.ssd_config().validate()?,
                Some(k) => self.attention_config(k).validate()?,
                None => {}
            }
            match u.state {
                Some(StateKind::Cdmoe) => self.cdmoe_config().validate()?,
                Some(StateKind::Mlp) if self.mlp_hidden == 0 => {
                    return Err(Error::Config("mlp_hidden must be positive".into()))
                }
                _ => {}
            }
        }
        if self.rmsnorm_eps.is_nan() || self.rmsnorm_eps <= 0.0 || self.init_std.is_nan() || self.init_std <= 0.0 {
            return Err(Error::Config("rmsnorm_eps and init_std must be positive".into()));
        }
        Ok(())
    }

    /// Closed-form parameter tally.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let mut total = self.vocab_size * d + d;
        if !self.tie_embeddings {
            total += d * self.vocab_size;
        }
        for u in self.plan() {
            total += match u.seq {
                Some(SeqKind::Ssd) => d + 1 + self.ssd_config().param_count(),
                Some(k) => d + 1 + self.attention_config(k).param_count(),
                None => 0,
            };
            total += match u.state {
                Some(StateKind::Mlp) => d + 1 + 2 * d * self.mlp_hidden,
                Some(StateKind::Cdmoe) => d + 1 + self.cdmoe_config().param_count(),
                None => 0,
            };
        }
        total
    }
}

/// `x / sqrt(mean(x²) + eps) ∘ weight` over the last dim.
pub fn rmsnorm(x: &Tensor, weight: &Tensor, eps: f64) -> Result<Tensor> {
    let r = x.square().mean(-1, true)?.add_scalar(eps).rsqrt();
    x.mul(&r)?.mul(weight)
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub w_up: Tensor,
    pub w_down: Tensor,
    pub activation: Activation,
}

impl Mlp {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.activation.apply(&x.matmul(&self.w_up)?).matmul(&self.w_down)
    }
}

#[derive(Debug, Clone)]
pub enum SeqBlock {
    Ssd(SsdBlock),
    Attention(DmaBlock),
}

impl SeqBlock {
    fn forward(&self, x: &Tensor, position_ids: &[usize]) -> Result<Tensor> {
        match self {
            SeqBlock::Ssd(b) => b.forward(x, position_ids),
            SeqBlock::Attention(b) => Ok(b.forward(x, &KvCache::new(), position_ids)?.0),
        }
    }

    fn params(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            SeqBlock::Ssd(b) => b.params(),
            SeqBlock::Attention(b) => b.params(),
        }
    }
}

#[derive(Debug, Clone)]
pub enum StateBlock {
    Mlp(Mlp),
    Cdmoe(CdMoeBlock),
}

impl StateBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            StateBlock::Mlp(m) => m.forward(x),
            StateBlock::Cdmoe(b) => b.forward(x),
        }
    }

    fn params(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            StateBlock::Mlp(m) => vec![("w_up", &m.w_up), ("w_down", &m.w_down)],
            StateBlock::Cdmoe(b) => b.params(),
        }
    }
}

/// A residual-wrapped sub-block.
#[derive(Debug, Clone)]
pub struct Residual<B> {
    pub norm: Tensor,
    pub block: B,
    pub scale: Tensor,
}

#[derive(Debug, Clone)]
pub struct Unit {
    pub seq: Option<Residual<SeqBlock>>,
    pub state: Option<Residual<StateBlock>>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub embed: Tensor,
    pub units: Vec<Unit>,
    pub final_norm: Tensor,
    pub lm_head: Option<Tensor>,
}

/// Deterministically initialize a model from `seed`.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, std) = (cfg.d_model, cfg.init_std);
    let embed = Tensor::randn(&[cfg.vocab_size, d], std, &mut rng).detach_param();
    let norm = || Tensor::param(&[d], vec![1.0; d]);
    let scale = || Tensor::param(&[], vec![1.0]);
    let mut units = Vec::new();
    for plan in cfg.plan() {
        let seq = match plan.seq {
            None => None,
            Some(kind) => {
                let block = match kind {
                    SeqKind::Ssd => SeqBlock::Ssd(SsdBlock::new(cfg.ssd_config(), std, &mut rng)?),
                    k => SeqBlock::Attention(DmaBlock::new(cfg.attention_config(k), std, &mut rng)?),
                };
                Some(Residual {
                    norm: norm()?,
                    block,
                    scale: scale()?,
                })
            }
        };
        let state = match plan.state {
            None => None,
            Some(kind) => {
                let block = match kind {
                    StateKind::Mlp => StateBlock::Mlp(Mlp {
                        w_up: Tensor::randn(&[d, cfg.mlp_hidden], std, &mut rng).detach_param(),
                        w_down: Tensor::randn(&[cfg.mlp_hidden, d], std, &mut rng).detach_param(),
                        activation: cfg.activation,
                    }),
                    StateKind::Cdmoe => StateBlock::Cdmoe(CdMoeBlock::new(cfg.cdmoe_config(), std, &mut rng)?),
                };
                Some(Residual {
                    norm: norm()?,
                    block,
                    scale: scale()?,
                })
            }
        };
        units.push(Unit { seq, state });
    }
    let final_norm = norm()?;
    let lm_head = if cfg.tie_embeddings {
        None
    } else {
        Some(Tensor::randn(&[d, cfg.vocab_size], std, &mut rng).detach_param())
    };
    Ok(Model {
        cfg: cfg.clone(),
        embed,
        units,
        final_norm,
        lm_head,
    })
}

impl Model {
    /// Every parameter with a stable dotted name, in a fixed order.
    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![("embed".to_string(), self.embed.clone())];
        for (i, u) in self.units.iter().enumerate() {
            if let Some(r) = &u.seq {
                out.push((format!("units.{i}.seq_norm"), r.norm.clone()));
                for (n, t) in r.block.params() {
                    out.push((format!("units.{i}.seq.{n}"), t.clone()));
                }
                out.push((format!("units.{i}.seq_scale"), r.scale.clone()));
            }
            if let Some(r) = &u.state {
                out.push((format!("units.{i}.state_norm"), r.norm.clone()));
                for (n, t) in r.block.params() {
                    out.push((format!("units.{i}.state.{n}"), t.clone()));
                }
                out.push((format!("units.{i}.state_scale"), r.scale.clone()));
            }
        }
        out.push(("final_norm".to_string(), self.final_norm.clone()));
        if let Some(h) = &self.lm_head {
            out.push(("lm_head".to_string(), h.clone()));
        }
        out
    }

    pub fn param_tensors(&self) -> Vec<Tensor> {
        self.params().into_iter().map(|(_, t)| t).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn seq_block_count(&self) -> usize {
        self.units.iter().filter(|u| u.seq.is_some()).count()
    }

    pub fn state_block_count(&self) -> usize {
        self.units.iter().filter(|u| u.state.is_some()).count()
    }

    /// Final-normed hidden states `[b, T, d]`.
    pub fn hidden(&self, tokens: &IndexTensor) -> Result<Tensor> {
        if tokens.shape.len() != 2 {
            return Err(Error::dim(
                "forward",
                format!("tokens must be [b, T], got {:?}", tokens.shape),
            ));
        }
        let t = tokens.shape[1];
        let pos: Vec<usize> = (0..t).collect();
        let eps = self.cfg.rmsnorm_eps;
        let mut h = self.embed.gather_rows(tokens)?;
        for u in &self.units {
            if let Some(r) = &u.seq {
                let y = r.block.forward(&rmsnorm(&h, &r.norm, eps)?, &pos)?;
                h = h.mul(&r.scale)?.add(&y)?;
            }
            if let Some(r) = &u.state {
                let y = r.block.forward(&rmsnorm(&h, &r.norm, eps)?)?;
                h = h.mul(&r.scale)?.add(&y)?;
            }
        }
        rmsnorm(&h, &self.final_norm, eps)
    }

    fn head(&self, h: &Tensor) -> Result<Tensor> {
        match &self.lm_head {
            Some(w) => h.matmul(w),
            None => h.matmul(&self.embed.t()?),
        }
    }

    /// Logits `[b, T, vocab]`.
    pub fn forward(&self, tokens: &IndexTensor) -> Result<Tensor> {
        self.head(&self.hidden(tokens)?)
    }

    /// Logits `[n, vocab]` for the flattened positions `rows` (index `b·T + t`).
    pub fn logits_at(&self, tokens: &IndexTensor, rows: &[usize]) -> Result<Tensor> {
        let h = self.hidden(tokens)?;
        let (b, t, d) = (h.shape()[0], h.shape()[1], h.shape()[2]);
        let sel = h
            .reshape(&[b * t, d])?
            .gather_rows(&IndexTensor::from_vec(rows.to_vec()))?;
        self.head(&sel)
    }
}

/// Mean next-token NLL over `[b, T, V]` logits; positions whose target equals
/// `ignore_index` are excluded.
pub fn cross_entropy_loss(logits: &Tensor, targets: &IndexTensor, ignore_index: usize) -> Result<Tensor> {
    let v = *logits
        .shape()
        .last()
        .ok_or_else(|| Error::dim("cross_entropy", "rank-0 logits"))?;
    let n = logits.numel() / v.max(1);
    if targets.numel() != n {
        return Err(Error::shape("cross_entropy", logits.shape(), &targets.shape));
    }
    let t: Vec<Option<usize>> = targets.data.iter().map(|&x| (x != ignore_index).then_some(x)).collect();
    logits.reshape(&[n, v])?.cross_entropy(&t)
}

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &[Tensor], weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    /// Apply one update with the gradients currently stored on `params`, then clear them.
    pub fn step(&mut self, params: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::Argument(format!(
                "optimizer tracks {} tensors, got {}",
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in params.iter().enumerate() {
            if p.numel() != self.m[i].len() {
                return Err(Error::shape("adamw", &[self.m[i].len()], p.shape()));
            }
            let g = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
            p.update_data(|w| {
                for j in 0..w.len() {
                    w[j] *= 1.0 - lr * wd;
                    m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                    v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                    let mh = m[j] / bc1;
                    let vh = v[j] / bc2;
                    w[j] -= lr * mh / (vh.sqrt() + eps);
                }
            });
            p.zero_grad();
        }
        Ok(())
    }
}

/// Warmup steps: 10% of the run, rounded.
pub fn warmup_steps(total_steps: usize) -> usize {
    (total_steps as f64 * 0.1).round() as usize
}

/// Linear warmup from 0 to `peak_lr`, then cosine decay to `min_lr` at `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, peak_lr: f64, min_lr: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::Argument(format!(
            "lr_schedule: step {step} beyond {total_steps}"
        )));
    }
    let warm = warmup_steps(total_steps);
    if step < warm {
        return Ok(peak_lr * step as f64 / warm as f64);
    }
    if total_steps == warm {
        return Ok(peak_lr);
    }
    let progress = (step - warm) as f64 / (total_steps - warm) as f64;
    Ok(min_lr + 0.5 * (peak_lr - min_lr) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub entries: Vec<ManifestEntry>,
    pub total_bytes: u64,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";

/// Write `manifest.json` and little-endian `params.bin` into directory `path`.
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    fs::create_dir_all(path)?;
    let mut entries = Vec::new();
    let mut bytes = Vec::new();
    for (name, t) in model.params() {
        entries.push(ManifestEntry {
            name,
            shape: t.shape().to_vec(),
            dtype: "f64".into(),
            byte_offset: bytes.len() as u64,
        });
        for v in t.data().iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format_version: 1,
        config: model.cfg.clone(),
        entries,
        total_bytes: bytes.len() as u64,
    };
    let mut f = fs::File::create(path.join(PARAMS_FILE))?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    fs::write(path.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Read a checkpoint directory; any mismatch is a format error naming the entry.
pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(path.join(MANIFEST_FILE))?)?;
    let bytes = fs::read(path.join(PARAMS_FILE))?;
    if bytes.len() as u64 != manifest.total_bytes {
        return Err(Error::Format(format!(
            "{PARAMS_FILE} holds {} bytes, manifest declares {}",
            bytes.len(),
            manifest.total_bytes
        )));
    }
    let model = build_model(&manifest.config, 0)?;
    let params = model.params();
    if params.len() != manifest.entries.len() {
        return Err(Error::Format(format!(
            "manifest lists {} entries, configuration defines {}",
            manifest.entries.len(),
            params.len()
        )));
    }
    let mut expected_offset = 0u64;
    let mut values = Vec::with_capacity(params.len());
    for ((name, t), e) in params.iter().zip(&manifest.entries) {
        if &e.name != name || e.shape != t.shape() || e.dtype != "f64" {
            return Err(Error::Format(format!(
                "entry '{}' {:?} {} does not match expected '{}' {:?} f64",
                e.name,
                e.shape,
                e.dtype,
                name,
                t.shape()
            )));
        }
        if e.byte_offset != expected_offset {
            return Err(Error::Format(format!(
                "entry '{}' at byte offset {} (expected {expected_offset})",
                e.name, e.byte_offset
            )));
        }
        let len = t.numel() as u64 * 8;
        let end = expected_offset + len;
        if end > bytes.len() as u64 {
            return Err(Error::Format(format!(
                "entry '{}' runs past the end of {PARAMS_FILE}",
                e.name
            )));
        }
        let data: Vec<f64> = bytes[expected_offset as usize..end as usize]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        values.push(data);
        expected_offset = end;
    }
    if expected_offset != bytes.len() as u64 {
        return Err(Error::Format(format!(
            "{PARAMS_FILE} has {} trailing bytes",
            bytes.len() as u64 - expected_offset
        )));
    }
    // only mutate once every entry validated
    for ((_, t), v) in params.iter().zip(values) {
        t.set_data(v)?;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tokens(b: usize, t: usize, vocab: usize, seed: u64) -> IndexTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        IndexTensor::new(&[b, t], (0..b * t).map(|_| rng.gen_range(0..vocab)).collect()).unwrap()
    }

    #[test]
    fn rmsnorm_cases() {
        let x = Tensor::new(&[1, 4], vec![1., -1., 1., -1.]).unwrap();
        let w = Tensor::ones(&[4]);
        let y = rmsnorm(&x, &w, 1e-6).unwrap();
        assert!(y.max_abs_diff(&x).unwrap() < 1e-6);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let w = Tensor::randn(&[5], 1.0, &mut rng);
        let a = rmsnorm(&x, &w, 0.0).unwrap();
        let b = rmsnorm(&x.scale(3.0), &w, 0.0).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
        let (xv, wv, yv) = (x.to_vec(), w.to_vec(), rmsnorm(&x, &w, 1e-6).unwrap().to_vec());
        for r in 0..3 {
            let ms: f64 = xv[r * 5..(r + 1) * 5].iter().map(|v| v * v).sum::<f64>() / 5.0;
            for c in 0..5 {
                assert!((yv[r * 5 + c] - xv[r * 5 + c] / (ms + 1e-6).sqrt() * wv[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cheems_layout_and_count() {
        let cfg = ModelConfig::micro(32, 16);
        let m = build_model(&cfg, 1).unwrap();
        assert_eq!(m.seq_block_count(), 8);
        assert_eq!(m.state_block_count(), 8);
        assert!(matches!(m.units[7].seq.as_ref().unwrap().block, SeqBlock::Attention(_)));
        assert!(m.units[..7]
            .iter()
            .all(|u| matches!(u.seq.as_ref().unwrap().block, SeqBlock::Ssd(_))));
        assert_eq!(m.num_params(), cfg.param_count());

        let mut doge = cfg.clone();
        doge.layout = Layout::Doge {
            n_macro_blocks: 2,
            state_blocks: 3,
        };
        doge.tie_embeddings = true;
        let m = build_model(&doge, 1).unwrap();
        assert_eq!((m.seq_block_count(), m.state_block_count()), (2, 6));
        assert_eq!(m.num_params(), doge.param_count());

        let mut bad = cfg.clone();
        bad.ssd.n_heads = 3;
        assert!(matches!(build_model(&bad, 0), Err(Error::Config(_))));
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = ModelConfig::micro(32, 16);
        let a = build_model(&cfg, 7).unwrap();
        let b = build_model(&cfg, 7).unwrap();
        let c = build_model(&cfg, 8).unwrap();
        for ((na, ta), (nb, tb)) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.to_vec(), tb.to_vec());
        }
        assert_ne!(a.embed.to_vec(), c.embed.to_vec());
    }

    #[test]
    fn forward_shape_causality_entropy() {
        let cfg = ModelConfig::micro(64, 16);
        let m = build_model(&cfg, 2).unwrap();
        let tok = tokens(2, 16, 64, 3);
        let logits = m.forward(&tok).unwrap();
        assert_eq!(logits.shape(), &[2, 16, 64]);
        let mut edited = tok.clone();
        edited.data[10] = (edited.data[10] + 1) % 64;
        let l2 = m.forward(&edited).unwrap();
        let (a, b) = (logits.to_vec(), l2.to_vec());
        assert_eq!(a[..10 * 64], b[..10 * 64]);
        assert_ne!(a[10 * 64..11 * 64], b[10 * 64..11 * 64]);

        let p = logits.softmax_lastdim().unwrap().to_vec();
        for row in p.chunks(64) {
            let h: f64 = -row.iter().map(|q| q * q.ln()).sum::<f64>();
            assert!((h - 64f64.ln()).abs() < 0.05, "{h}");
        }
        let bad = IndexTensor::new(&[1, 2], vec![0, 64]).unwrap();
        assert!(matches!(m.forward(&bad), Err(Error::Index { .. })));
    }

    #[test]
    fn loss_examples() {
        let logits = Tensor::zeros(&[1, 3, 8]);
        let t = IndexTensor::new(&[1, 3], vec![1, usize::MAX, 2]).unwrap();
        let l = cross_entropy_loss(&logits, &t, usize::MAX).unwrap().item().unwrap();
        assert!((l - 8f64.ln()).abs() < 1e-12);
        let all = IndexTensor::new(&[1, 3], vec![usize::MAX; 3]).unwrap();
        assert!(matches!(
            cross_entropy_loss(&logits, &all, usize::MAX),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn adamw_reference() {
        let p = Tensor::param(&[1], vec![1.0]).unwrap();
        let mut opt = AdamW::new(std::slice::from_ref(&p), 0.0);
        opt.step(std::slice::from_ref(&p), 0.1).unwrap();
        assert_eq!(p.to_vec(), vec![1.0]);

        let q = Tensor::param(&[2], vec![2.0, -4.0]).unwrap();
        let mut opt = AdamW::new(std::slice::from_ref(&q), 0.01);
        opt.step(std::slice::from_ref(&q), 0.5).unwrap();
        assert_eq!(q.to_vec(), vec![2.0 * (1.0 - 0.5 * 0.01), -4.0 * (1.0 - 0.5 * 0.01)]);

        // scalar trajectory for loss w² with lr 0.1, wd 0.01
        let w = Tensor::param(&[], vec![0.5]).unwrap();
        let mut opt = AdamW::new(std::slice::from_ref(&w), 0.01);
        let (mut rw, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        for step in 1..=3 {
            w.square().backward().unwrap();
            opt.step(std::slice::from_ref(&w), 0.1).unwrap();
            let g = 2.0 * rw;
            rw *= 1.0 - 0.1 * 0.01;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(step));
            let vh = v / (1.0 - 0.999f64.powi(step));
            rw -= 0.1 * mh / (vh.sqrt() + 1e-8);
            assert!((w.item().unwrap() - rw).abs() < 1e-15);
        }
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(lr_schedule(0, 200, 1e-3, 1e-5).unwrap(), 0.0);
        assert_eq!(lr_schedule(20, 200, 1e-3, 1e-5).unwrap(), 1e-3);
        assert!((lr_schedule(200, 200, 1e-3, 1e-5).unwrap() - 1e-5).abs() < 1e-18);
        assert!((lr_schedule(10, 200, 1e-3, 1e-5).unwrap() - 5e-4).abs() < 1e-18);
        let mid = lr_schedule(110, 200, 1e-3, 1e-5).unwrap();
        assert!((mid - (1e-5 + 0.5 * (1e-3 - 1e-5))).abs() < 1e-15);
        assert!(lr_schedule(201, 200, 1e-3, 0.0).is_err());
        let lrs: Vec<f64> = (20..=200).map(|s| lr_schedule(s, 200, 1e-3, 1e-5).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn checkpoint_round_trip_and_failures() {
        let cfg = ModelConfig::micro(32, 8);
        let m = build_model(&cfg, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&m, dir.path()).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        for ((na, ta), (nb, tb)) in m.params().iter().zip(back.params().iter()) {
            assert_eq!(na, nb);
            let (a, b): (Vec<u64>, Vec<u64>) = (
                ta.to_vec().iter().map(|v| v.to_bits()).collect(),
                tb.to_vec().iter().map(|v| v.to_bits()).collect(),
            );
            assert_eq!(a, b);
        }
        let tok = tokens(1, 6, 32, 1);
        assert_eq!(m.forward(&tok).unwrap().to_vec(), back.forward(&tok).unwrap().to_vec());

        let manifest: CheckpointManifest =
            serde_json::from_str(&fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap()).unwrap();
        let mut off = 0;
        for e in &manifest.entries {
            assert_eq!(e.byte_offset, off);
            off += e.shape.iter().product::<usize>() as u64 * 8;
        }
        assert_eq!(off, fs::metadata(dir.path().join(PARAMS_FILE)).unwrap().len());

        let bytes = fs::read(dir.path().join(PARAMS_FILE)).unwrap();
        fs::write(dir.path().join(PARAMS_FILE), &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Format(_))));

        let mut renamed = manifest.clone();
        renamed.entries[3].name = "bogus".into();
        fs::write(dir.path().join(PARAMS_FILE), &bytes).unwrap();
        fs::write(dir.path().join(MANIFEST_FILE), serde_json::to_string(&renamed).unwrap()).unwrap();
        let err = load_checkpoint(dir.path()).unwrap_err().to_string();
        assert!(err.contains("bogus"), "{err}");
    }
}
