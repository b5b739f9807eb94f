//! Multi-query associative recall: data generation, validation, caching,
//! accuracy evaluation and the training loop used for the variant comparison.
//!
//! The vocabulary is split into three disjoint ranges: keys, values and
//! fillers. A sequence starts with `kv_pairs` adjacent `(key, value)` pairs;
//! the rest is filler except for `num_queries` positions that repeat an earlier
//! key. The supervision target at a query position is that key's value.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::dma::MaskVariant;
use crate::error::{Error, Result};
use crate::model::{
    build_model, lr_schedule, AdamW, AttnSettings, CdMoeSettings, Layout, Model, ModelConfig, SeqKind, SsdSettings,
    StateKind,
};
use crate::tensor::{no_grad, Activation, IndexTensor};

/// Target marker for unsupervised positions.
pub const IGNORE_INDEX: usize = usize::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MqarConfig {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub kv_pairs: usize,
    /// Queries per sequence; defaults to one per key.
    #[serde(default)]
    pub num_queries: Option<usize>,
    pub n_train: usize,
    pub n_test: usize,
    #[serde(default = "default_power")]
    pub power_a: f64,
    pub seed: u64,
}

fn default_power() -> f64 {
    0.01
}

/// Token id ranges `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VocabSplit {
    pub keys: (usize, usize),
    pub values: (usize, usize),
    pub fillers: (usize, usize),
}

impl MqarConfig {
    /// Desk-scale defaults: `kv = T/4`, 2¹⁴ training and 2¹⁰ test sequences.
    pub fn desk(vocab_size: usize, seq_len: usize, seed: u64) -> Self {
        MqarConfig {
            vocab_size,
            seq_len,
            kv_pairs: seq_len / 4,
            num_queries: None,
            n_train: 1 << 14,
            n_test: 1 << 10,
            power_a: default_power(),
            seed,
        }
    }

    pub fn queries(&self) -> usize {
        self.num_queries.unwrap_or(self.kv_pairs)
    }

    /// Fillers take an eighth of the vocabulary (at least one id); keys and
    /// values split the rest.
    pub fn vocab_split(&self) -> VocabSplit {
        let fill = (self.vocab_size / 8).max(1);
        let rest = self.vocab_size.saturating_sub(fill);
        let nk = rest / 2;
        VocabSplit {
            keys: (0, nk),
            values: (nk, rest),
            fillers: (rest, self.vocab_size),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let q = self.queries();
        if self.kv_pairs == 0 || q == 0 {
            return Err(Error::Config("mqar: kv_pairs and num_queries must be positive".into()));
        }
        if q > self.kv_pairs {
            return Err(Error::Config(format!(
                "mqar: {q} queries but only {} distinct keys",
                self.kv_pairs
            )));
        }
        if 2 * self.kv_pairs + q > self.seq_len {
            return Err(Error::Config(format!(
                "mqar: 2·{} pairs + {q} queries exceed sequence length {}",
                self.kv_pairs, self.seq_len
            )));
        }
        let v = self.vocab_split();
        if v.keys.1 - v.keys.0 < self.kv_pairs || v.values.1 == v.values.0 || v.fillers.1 == v.fillers.0 {
            return Err(Error::Config(format!(
                "mqar: vocabulary {} too small for {} distinct keys plus values and fillers",
                self.vocab_size, self.kv_pairs
            )));
        }
        if self.power_a.is_nan() || self.power_a <= 0.0 {
            return Err(Error::Config("mqar: power_a must be positive".into()));
        }
        Ok(())
    }

    /// Key popularity weights `∝ (i + 1)^(-power_a)` over the key range.
    pub fn key_weights(&self) -> Vec<f64> {
        let v = self.vocab_split();
        (0..v.keys.1 - v.keys.0)
            .map(|i| ((i + 1) as f64).powf(-self.power_a))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MqarDataset {
    pub cfg: MqarConfig,
    pub split: Split,
    /// `[n, T]` token ids.
    pub inputs: IndexTensor,
    /// `[n, T]`, [`IGNORE_INDEX`] except at query positions.
    pub targets: IndexTensor,
}

impl MqarDataset {
    pub fn len(&self) -> usize {
        self.inputs.shape[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn seq_len(&self) -> usize {
        self.inputs.shape[1]
    }

    pub fn sample(&self, i: usize) -> (&[usize], &[usize]) {
        let t = self.seq_len();
        (
            &self.inputs.data[i * t..(i + 1) * t],
            &self.targets.data[i * t..(i + 1) * t],
        )
    }

    /// Rows `idx` stacked into a batch.
    pub fn batch(&self, idx: &[usize]) -> Result<(IndexTensor, IndexTensor)> {
        let t = self.seq_len();
        let mut inp = Vec::with_capacity(idx.len() * t);
        let mut tgt = Vec::with_capacity(idx.len() * t);
        for &i in idx {
            let (a, b) = self.sample(i);
            inp.extend_from_slice(a);
            tgt.extend_from_slice(b);
        }
        Ok((
            IndexTensor::new(&[idx.len(), t], inp)?,
            IndexTensor::new(&[idx.len(), t], tgt)?,
        ))
    }
}

/// Per-sample generator; stream `(split, index)` keeps samples independent of generation order.
fn sample_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tag = match split {
        Split::Train => 0u64,
        Split::Test => 1u64,
    };
    rng.set_stream((tag << 48) | index as u64);
    rng
}

fn generate_sample(cfg: &MqarConfig, dist: &WeightedIndex<f64>, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let v = cfg.vocab_split();
    let t = cfg.seq_len;
    let kv = cfg.kv_pairs;

    // distinct keys, popularity-weighted, by rejection
    let mut chosen = vec![false; v.keys.1 - v.keys.0];
    let mut keys = Vec::with_capacity(kv);
    while keys.len() < kv {
        let k = dist.sample(rng);
        if !std::mem::replace(&mut chosen[k], true) {
            keys.push(v.keys.0 + k);
        }
    }
    let values: Vec<usize> = (0..kv).map(|_| rng.gen_range(v.values.0..v.values.1)).collect();

    let mut inputs = Vec::with_capacity(t);
    let mut targets = vec![IGNORE_INDEX; t];
    for (&k, &val) in keys.iter().zip(&values) {
        inputs.push(k);
        inputs.push(val);
    }
    for _ in 2 * kv..t {
        inputs.push(rng.gen_range(v.fillers.0..v.fillers.1));
    }
    let mut slots: Vec<usize> = (2 * kv..t).collect();
    slots.shuffle(rng);
    let mut order: Vec<usize> = (0..kv).collect();
    order.shuffle(rng);
    for (&pos, &which) in slots.iter().zip(&order).take(cfg.queries()) {
        inputs[pos] = keys[which];
        targets[pos] = values[which];
    }
    (inputs, targets)
}

/// Deterministic dataset for one split.
pub fn generate_mqar(cfg: &MqarConfig, split: Split) -> Result<MqarDataset> {
    cfg.validate()?;
    let n = match split {
        Split::Train => cfg.n_train,
        Split::Test => cfg.n_test,
    };
    let dist = WeightedIndex::new(cfg.key_weights()).map_err(|e| Error::Config(format!("mqar key weights: {e}")))?;
    let t = cfg.seq_len;
    let mut inputs = Vec::with_capacity(n * t);
    let mut targets = Vec::with_capacity(n * t);
    for i in 0..n {
        let (a, b) = generate_sample(cfg, &dist, &mut sample_rng(cfg.seed, split, i));
        inputs.extend(a);
        targets.extend(b);
    }
    Ok(MqarDataset {
        cfg: cfg.clone(),
        split,
        inputs: IndexTensor::new(&[n, t], inputs)?,
        targets: IndexTensor::new(&[n, t], targets)?,
    })
}

/// Structural check of one sample; the error names the first violated rule.
pub fn validate_sample(cfg: &MqarConfig, inputs: &[usize], targets: &[usize]) -> Result<()> {
    let v = cfg.vocab_split();
    let kv = cfg.kv_pairs;
    let in_range = |x: usize, r: (usize, usize)| x >= r.0 && x < r.1;
    let bad = |msg: String| Err(Error::Format(format!("mqar sample: {msg}")));
    if inputs.len() != cfg.seq_len || targets.len() != cfg.seq_len {
        return bad(format!("length {} / {}", inputs.len(), targets.len()));
    }
    let mut seen_keys = Vec::new();
    for p in 0..kv {
        let (k, val) = (inputs[2 * p], inputs[2 * p + 1]);
        if !in_range(k, v.keys) || !in_range(val, v.values) {
            return bad(format!("pair {p} = ({k}, {val}) outside key/value ranges"));
        }
        if seen_keys.contains(&k) {
            return bad(format!("key {k} appears in two pairs"));
        }
        if targets[2 * p] != IGNORE_INDEX || targets[2 * p + 1] != IGNORE_INDEX {
            return bad(format!("pair {p} is supervised"));
        }
        seen_keys.push(k);
    }
    let mut queried = Vec::new();
    for pos in 2 * kv..cfg.seq_len {
        let tok = inputs[pos];
        if targets[pos] == IGNORE_INDEX {
            if !in_range(tok, v.fillers) {
                return bad(format!("position {pos} holds non-filler {tok} without supervision"));
            }
            continue;
        }
        // scan backward for the key; its neighbour must be the target
        let hit = (0..pos).rev().find(|&p| inputs[p] == tok && p < 2 * kv && p % 2 == 0);
        match hit {
            Some(p) if inputs[p + 1] == targets[pos] => {}
            _ => return bad(format!("query at {pos} ({tok}) has no matching earlier pair")),
        }
        if queried.contains(&tok) {
            return bad(format!("key {tok} queried twice"));
        }
        queried.push(tok);
    }
    if queried.len() != cfg.queries() {
        return bad(format!("{} queries, expected {}", queried.len(), cfg.queries()));
    }
    Ok(())
}

pub fn validate_dataset(ds: &MqarDataset) -> Result<()> {
    for i in 0..ds.len() {
        let (a, b) = ds.sample(i);
        validate_sample(&ds.cfg, a, b).map_err(|e| Error::Format(format!("sample {i}: {e}")))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    byte_offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetManifest {
    format_version: u32,
    config: MqarConfig,
    split: Split,
    ignore_index: u32,
    entries: Vec<DatasetEntry>,
    total_bytes: u64,
}

/// Cache a dataset as `manifest.json` plus little-endian `u32` tokens in `data.bin`.
pub fn save_dataset(ds: &MqarDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut bytes = Vec::new();
    let mut entries = Vec::new();
    for (name, t) in [("inputs", &ds.inputs), ("targets", &ds.targets)] {
        entries.push(DatasetEntry {
            name: name.into(),
            shape: t.shape.clone(),
            dtype: "u32".into(),
            byte_offset: bytes.len() as u64,
        });
        for &x in &t.data {
            let v = if x == IGNORE_INDEX {
                u32::MAX
            } else {
                u32::try_from(x).map_err(|_| Error::Format(format!("token {x} exceeds u32")))?
            };
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = DatasetManifest {
        format_version: 1,
        config: ds.cfg.clone(),
        split: ds.split,
        ignore_index: u32::MAX,
        entries,
        total_bytes: bytes.len() as u64,
    };
    fs::write(dir.join("data.bin"), &bytes)?;
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<MqarDataset> {
    let m: DatasetManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let bytes = fs::read(dir.join("data.bin"))?;
    if bytes.len() as u64 != m.total_bytes {
        return Err(Error::Format(format!(
            "data.bin holds {} bytes, manifest declares {}",
            bytes.len(),
            m.total_bytes
        )));
    }
    let mut tensors = Vec::new();
    for (e, want) in m.entries.iter().zip(["inputs", "targets"]) {
        if e.name != want || e.dtype != "u32" || e.shape.len() != 2 {
            return Err(Error::Format(format!(
                "unexpected dataset entry '{}' ({})",
                e.name, e.dtype
            )));
        }
        let n: usize = e.shape.iter().product();
        let start = e.byte_offset as usize;
        let end = start + 4 * n;
        if end > bytes.len() {
            return Err(Error::Format(format!(
                "entry '{}' runs past the end of data.bin",
                e.name
            )));
        }
        let data = bytes[start..end]
            .chunks_exact(4)
            .map(|c| {
                let v = u32::from_le_bytes(c.try_into().unwrap());
                if v == m.ignore_index {
                    IGNORE_INDEX
                } else {
                    v as usize
                }
            })
            .collect();
        tensors.push(IndexTensor::new(&e.shape, data)?);
    }
    if tensors.len() != 2 {
        return Err(Error::Format("dataset manifest needs inputs and targets".into()));
    }
    let targets = tensors.pop().unwrap();
    let inputs = tensors.pop().unwrap();
    Ok(MqarDataset {
        cfg: m.config,
        split: m.split,
        inputs,
        targets,
    })
}

/// Anything that predicts a token at selected flattened positions (`b·T + t`).
pub trait Predictor {
    fn predict(&self, inputs: &IndexTensor, rows: &[usize]) -> Result<Vec<usize>>;
}

impl Predictor for Model {
    fn predict(&self, inputs: &IndexTensor, rows: &[usize]) -> Result<Vec<usize>> {
        let logits = no_grad(|| self.logits_at(inputs, rows))?;
        let v = logits.shape()[1];
        let data = logits.data();
        Ok(data
            .chunks_exact(v)
            .map(|row| {
                let mut best = 0;
                for (i, &x) in row.iter().enumerate() {
                    if x > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect())
    }
}

/// Hard-wired recall: output the token after the most recent earlier copy of the current token.
#[derive(Debug, Clone, Copy, Default)]
pub struct EchoPolicy;

impl Predictor for EchoPolicy {
    fn predict(&self, inputs: &IndexTensor, rows: &[usize]) -> Result<Vec<usize>> {
        let t = inputs.shape[1];
        Ok(rows
            .iter()
            .map(|&r| {
                let (b, pos) = (r / t, r % t);
                let seq = &inputs.data[b * t..(b + 1) * t];
                (0..pos).rev().find(|&p| seq[p] == seq[pos]).map_or(0, |p| seq[p + 1])
            })
            .collect())
    }
}

/// Flattened supervised rows and their targets.
pub fn supervised_rows(targets: &IndexTensor) -> (Vec<usize>, Vec<usize>) {
    targets
        .data
        .iter()
        .enumerate()
        .filter(|(_, &t)| t != IGNORE_INDEX)
        .map(|(i, &t)| (i, t))
        .unzip()
}

/// Argmax accuracy over supervised positions, evaluated in batches of `batch_size`.
pub fn evaluate_accuracy(p: &dyn Predictor, ds: &MqarDataset, batch_size: usize) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (inp, tgt) = ds.batch(chunk)?;
        let (rows, want) = supervised_rows(&tgt);
        if rows.is_empty() {
            continue;
        }
        let got = p.predict(&inp, &rows)?;
        correct += got.iter().zip(&want).filter(|(a, b)| a == b).count();
        total += rows.len();
    }
    if total == 0 {
        return Err(Error::Argument("evaluate_accuracy: no supervised positions".into()));
    }
    Ok(correct as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MqarVariant {
    #[serde(rename = "qcattn")]
    Qcattn,
    #[serde(rename = "ssd")]
    Ssd,
    #[serde(rename = "dma-add")]
    DmaAdd,
    #[serde(rename = "dma-mul")]
    DmaMul,
    #[serde(rename = "hybrid")]
    Hybrid,
}

impl MqarVariant {
    pub const ALL: [MqarVariant; 5] = [
        MqarVariant::Qcattn,
        MqarVariant::Ssd,
        MqarVariant::DmaAdd,
        MqarVariant::DmaMul,
        MqarVariant::Hybrid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MqarVariant::Qcattn => "qcattn",
            MqarVariant::Ssd => "ssd",
            MqarVariant::DmaAdd => "dma-add",
            MqarVariant::DmaMul => "dma-mul",
            MqarVariant::Hybrid => "hybrid",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown variant '{s}'")))
    }

    /// Two sequence layers; the hybrid pairs an SSD layer with a dynamic-mask layer.
    pub fn layers(self) -> Vec<SeqKind> {
        match self {
            MqarVariant::Qcattn => vec![SeqKind::Qcattn; 2],
            MqarVariant::Ssd => vec![SeqKind::Ssd; 2],
            MqarVariant::DmaAdd => vec![SeqKind::DmaAdd; 2],
            MqarVariant::DmaMul => vec![SeqKind::DmaMul; 2],
            MqarVariant::Hybrid => vec![SeqKind::Ssd, SeqKind::DmaMul],
        }
    }
}

/// Peak learning rate per model width (4e-4, 3e-4, 2e-4, 1e-4 for 32..256).
pub fn default_lr(d_model: usize) -> f64 {
    match d_model {
        0..=32 => 4e-4,
        33..=64 => 3e-4,
        65..=128 => 2e-4,
        _ => 1e-4,
    }
}

fn default_epochs() -> usize {
    20
}

fn default_batch() -> usize {
    32
}

fn default_evals() -> usize {
    4
}

fn default_target() -> f64 {
    1.0
}

fn default_wd() -> f64 {
    0.01
}

fn default_d_state() -> usize {
    64
}

fn default_chunk() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub variant: MqarVariant,
    pub d_model: usize,
    pub data: MqarConfig,
    #[serde(default)]
    pub model_seed: u64,
    #[serde(default = "default_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Peak learning rate; `None` selects [`default_lr`].
    #[serde(default)]
    pub lr: Option<f64>,
    /// Cosine floor as a fraction of the peak.
    #[serde(default)]
    pub min_lr_ratio: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    /// Test-set evaluations per epoch (the last falls on the epoch boundary).
    #[serde(default = "default_evals")]
    pub evals_per_epoch: usize,
    /// Stop as soon as test accuracy reaches this value.
    #[serde(default = "default_target")]
    pub target_accuracy: f64,
    #[serde(default = "default_d_state")]
    pub d_state: usize,
    #[serde(default = "default_chunk")]
    pub chunk_len: usize,
    /// State-transform MLP width; `None` uses `2·d_model`.
    #[serde(default)]
    pub mlp_hidden: Option<usize>,
    /// Dynamic-mask `A_dm` initial value.
    #[serde(default = "neg_one")]
    pub a_init: f64,
}

fn neg_one() -> f64 {
    -1.0
}

impl ExperimentSpec {
    pub fn new(variant: MqarVariant, d_model: usize, data: MqarConfig) -> Self {
        ExperimentSpec {
            variant,
            d_model,
            data,
            model_seed: 0,
            max_epochs: default_epochs(),
            batch_size: default_batch(),
            lr: None,
            min_lr_ratio: 0.0,
            weight_decay: default_wd(),
            evals_per_epoch: default_evals(),
            target_accuracy: default_target(),
            d_state: default_d_state(),
            chunk_len: default_chunk(),
            mlp_hidden: None,
            a_init: neg_one(),
        }
    }

    /// Single-head two-layer model for this variant.
    pub fn model_config(&self) -> ModelConfig {
        let d = self.d_model;
        ModelConfig {
            vocab_size: self.data.vocab_size,
            d_model: d,
            layout: Layout::Stack {
                layers: self.variant.layers(),
            },
            state_transform: StateKind::Mlp,
            ssd: SsdSettings {
                n_heads: 1,
                n_groups: 1,
                d_state: self.d_state,
                chunk_len: self.chunk_len,
            },
            attention: AttnSettings {
                n_heads: 1,
                variant: MaskVariant::Multiplicative,
                a_init: self.a_init,
                renormalize: false,
            },
            cdmoe: CdMoeSettings {
                d_cd: d,
                d_ret: 2,
                n_experts: 1,
                n_heads: 1,
                k: 1,
            },
            mlp_hidden: self.mlp_hidden.unwrap_or(2 * d),
            activation: Activation::Silu,
            max_position_embeddings: self.data.seq_len,
            rope_base: 10000.0,
            rmsnorm_eps: 1e-6,
            tie_embeddings: false,
            init_std: 0.02,
        }
    }

    pub fn peak_lr(&self) -> f64 {
        self.lr.unwrap_or_else(|| default_lr(self.d_model))
    }
}

/// Outcome of one MQAR training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub variant: MqarVariant,
    pub d_model: usize,
    pub seq_len: usize,
    pub data_seed: u64,
    pub model_seed: u64,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    pub steps: usize,
    pub epochs: f64,
    pub wall_seconds: f64,
    /// Mean training loss between consecutive evaluations.
    pub loss_curve: Vec<f64>,
    /// `(step, test accuracy)` at each evaluation.
    pub accuracy_curve: Vec<(usize, f64)>,
}

/// Train with AdamW and the warmup-cosine schedule, evaluating on the test split
/// `evals_per_epoch` times per epoch and stopping early at `target_accuracy`.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentResult> {
    let train = generate_mqar(&spec.data, Split::Train)?;
    let test = generate_mqar(&spec.data, Split::Test)?;
    run_experiment_on(spec, &train, &test, |_, _| {})
}

/// [`run_experiment`] on pre-generated data; `progress(step, accuracy)` fires after each evaluation.
pub fn run_experiment_on(
    spec: &ExperimentSpec,
    train: &MqarDataset,
    test: &MqarDataset,
    mut progress: impl FnMut(usize, f64),
) -> Result<ExperimentResult> {
    if spec.batch_size == 0 || spec.max_epochs == 0 || spec.evals_per_epoch == 0 {
        return Err(Error::Config(
            "batch_size, max_epochs and evals_per_epoch must be positive".into(),
        ));
    }
    let start = Instant::now();
    let model = build_model(&spec.model_config(), spec.model_seed)?;
    let params = model.param_tensors();
    let mut opt = AdamW::new(&params, spec.weight_decay);
    let steps_per_epoch = train.len().div_ceil(spec.batch_size);
    let total = steps_per_epoch * spec.max_epochs;
    let peak = spec.peak_lr();
    let min_lr = peak * spec.min_lr_ratio;
    let eval_every = steps_per_epoch.div_ceil(spec.evals_per_epoch).max(1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(spec.model_seed ^ 0x005E_ED0F_0DE5);

    let mut result = ExperimentResult {
        variant: spec.variant,
        d_model: spec.d_model,
        seq_len: spec.data.seq_len,
        data_seed: spec.data.seed,
        model_seed: spec.model_seed,
        final_accuracy: 0.0,
        best_accuracy: 0.0,
        steps: 0,
        epochs: 0.0,
        wall_seconds: 0.0,
        loss_curve: Vec::new(),
        accuracy_curve: Vec::new(),
    };
    let (mut loss_sum, mut loss_n) = (0.0, 0usize);
    let mut step = 0usize;
    'outer: for _epoch in 0..spec.max_epochs {
        order.shuffle(&mut shuffle_rng);
        for (bi, chunk) in order.chunks(spec.batch_size).enumerate() {
            let (inp, tgt) = train.batch(chunk)?;
            let (rows, want) = supervised_rows(&tgt);
            let targets: Vec<Option<usize>> = want.into_iter().map(Some).collect();
            let loss = model.logits_at(&inp, &rows)?.cross_entropy(&targets)?;
            loss_sum += loss.item()?;
            loss_n += 1;
            loss.backward()?;
            opt.step(&params, lr_schedule(step, total, peak, min_lr)?)?;
            step += 1;
            if (bi + 1) % eval_every == 0 || bi + 1 == steps_per_epoch {
                let acc = evaluate_accuracy(&model, test, 128)?;
                result.loss_curve.push(loss_sum / loss_n as f64);
                (loss_sum, loss_n) = (0.0, 0);
                result.accuracy_curve.push((step, acc));
                result.best_accuracy = result.best_accuracy.max(acc);
                result.final_accuracy = acc;
                progress(step, acc);
                if acc >= spec.target_accuracy {
                    break 'outer;
                }
            }
        }
    }
    result.steps = step;
    result.epochs = step as f64 / steps_per_epoch as f64;
    result.wall_seconds = start.elapsed().as_secs_f64();
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> MqarConfig {
        MqarConfig {
            vocab_size: 64,
            seq_len: 32,
            kv_pairs: 8,
            num_queries: None,
            n_train: 200,
            n_test: 50,
            power_a: 0.01,
            seed: 3,
        }
    }

    #[test]
    fn large_vocab_pair_count() {
        let c = MqarConfig::desk(8192, 256, 0);
        assert_eq!(c.kv_pairs, 64);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn generation_is_deterministic_and_valid() {
        let cfg = small();
        let a = generate_mqar(&cfg, Split::Train).unwrap();
        let b = generate_mqar(&cfg, Split::Train).unwrap();
        assert_eq!(a, b);
        validate_dataset(&a).unwrap();
        let t = generate_mqar(&cfg, Split::Test).unwrap();
        validate_dataset(&t).unwrap();
        let train_rows: std::collections::HashSet<&[usize]> = (0..a.len()).map(|i| a.sample(i).0).collect();
        assert!((0..t.len()).all(|i| !train_rows.contains(t.sample(i).0)));
        let mut other = cfg.clone();
        other.seed = 4;
        assert_ne!(generate_mqar(&other, Split::Train).unwrap().inputs, a.inputs);
    }

    #[test]
    fn capacity_errors() {
        let mut c = small();
        c.kv_pairs = 11;
        assert!(matches!(generate_mqar(&c, Split::Train), Err(Error::Config(_))));
        let mut c = small();
        c.vocab_size = 12;
        assert!(generate_mqar(&c, Split::Train).is_err());
    }

    #[test]
    fn validator_rejects_corruption() {
        let cfg = small();
        let ds = generate_mqar(&cfg, Split::Train).unwrap();
        let (inp, tgt) = ds.sample(0);
        let q = tgt.iter().position(|&t| t != IGNORE_INDEX).unwrap();
        let mut bad_t = tgt.to_vec();
        bad_t[q] = cfg.vocab_split().values.0 + (bad_t[q] + 1 - cfg.vocab_split().values.0) % 28;
        assert!(validate_sample(&cfg, inp, &bad_t).is_err());
        let mut bad_i = inp.to_vec();
        bad_i[2] = bad_i[0];
        assert!(validate_sample(&cfg, &bad_i, tgt).is_err());
    }

    #[test]
    fn echo_policy_is_perfect_and_empty_is_error() {
        let ds = generate_mqar(&small(), Split::Test).unwrap();
        assert_eq!(evaluate_accuracy(&EchoPolicy, &ds, 7).unwrap(), 1.0);
        let mut empty = ds.clone();
        empty.targets.data.iter_mut().for_each(|t| *t = IGNORE_INDEX);
        assert!(matches!(
            evaluate_accuracy(&EchoPolicy, &empty, 7),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn dataset_cache_round_trip() {
        let ds = generate_mqar(&small(), Split::Test).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
        let bytes = fs::read(dir.path().join("data.bin")).unwrap();
        fs::write(dir.path().join("data.bin"), &bytes[..10]).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Format(_))));
    }

    #[test]
    fn learning_rates_and_variant_names() {
        assert_eq!([32, 64, 128, 256].map(default_lr), [4e-4, 3e-4, 2e-4, 1e-4]);
        for v in MqarVariant::ALL {
            assert_eq!(MqarVariant::parse(v.name()).unwrap(), v);
            assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{}\"", v.name()));
        }
        assert!(MqarVariant::parse("mamba").is_err());
    }

    #[test]
    fn untrained_accuracy_near_chance_and_runs_repeat() {
        let mut cfg = small();
        cfg.n_train = 16;
        cfg.n_test = 64;
        let test = generate_mqar(&cfg, Split::Test).unwrap();
        let model = build_model(
            &ExperimentSpec::new(MqarVariant::DmaMul, 16, cfg.clone()).model_config(),
            1,
        )
        .unwrap();
        let acc = evaluate_accuracy(&model, &test, 16).unwrap();
        // 512 supervised positions over 64 tokens: chance 1/64 with generous binomial slack
        assert!(acc < 0.08, "{acc}");

        let mut spec = ExperimentSpec::new(MqarVariant::Hybrid, 16, cfg);
        spec.max_epochs = 2;
        spec.batch_size = 8;
        spec.d_state = 4;
        let a = run_experiment(&spec).unwrap();
        let b = run_experiment(&spec).unwrap();
        assert_eq!(a.loss_curve, b.loss_curve);
        assert_eq!(a.accuracy_curve, b.accuracy_curve);
        assert_eq!(a.steps, 4);
    }
}
