//! Expert-retrieval throughput benchmark.
//!
//! Each `(variant, n_e)` cell times the expert branch on a fixed token batch.
//! Before any timing, every variant is cross-checked against an exhaustive
//! oracle at the smallest expert count; a mismatch aborts the run.

use std::hint::black_box;
use std::io::{Read, Write};
use std::time::Instant;

use hybrid_core::cdmoe::{CdMoeBlock, CdMoeConfig, NaiveRoutedMoe, Selector};
use hybrid_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{BenchError, Result};
use crate::meta::BuildInfo;

pub const CSV_SCHEMA: u32 = 1;
pub const CSV_COLUMNS: [&str; 10] = [
    "variant",
    "n_experts",
    "k",
    "d_model",
    "tokens",
    "median_ns_per_token",
    "p10",
    "p90",
    "oracle_pass",
    "seed",
];

/// Oracle tolerance on expert-branch outputs.
pub const ORACLE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchVariant {
    /// Product-key retrieval.
    Cdmoe,
    /// Linear router over every expert.
    NaiveRouted,
    /// Exhaustive scan of all `n_e` combined key scores.
    BruteForce,
}

impl BenchVariant {
    pub const ALL: [BenchVariant; 3] = [BenchVariant::Cdmoe, BenchVariant::NaiveRouted, BenchVariant::BruteForce];

    pub fn name(self) -> &'static str {
        match self {
            BenchVariant::Cdmoe => "cdmoe",
            BenchVariant::NaiveRouted => "naive_routed",
            BenchVariant::BruteForce => "brute_force",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| BenchError::Spec(format!("unknown bench variant '{s}'")))
    }
}

fn default_counts() -> Vec<usize> {
    vec![16, 64, 256, 1024, 4096, 16384]
}

fn default_variants() -> Vec<BenchVariant> {
    BenchVariant::ALL.to_vec()
}

fn default_tokens() -> usize {
    64
}

fn default_warmup() -> usize {
    3
}

fn default_measured() -> usize {
    7
}

fn default_d_model() -> usize {
    256
}

fn default_d_ret() -> usize {
    16
}

fn default_k() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSpec {
    #[serde(default = "default_counts")]
    pub expert_counts: Vec<usize>,
    #[serde(default = "default_variants")]
    pub variants: Vec<BenchVariant>,
    #[serde(default = "default_tokens")]
    pub tokens_per_trial: usize,
    #[serde(default = "default_warmup")]
    pub warmup_trials: usize,
    #[serde(default = "default_measured")]
    pub measured_trials: usize,
    #[serde(default = "default_d_model")]
    pub d_model: usize,
    #[serde(default = "default_d_ret")]
    pub d_ret: usize,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec {
            expert_counts: default_counts(),
            variants: default_variants(),
            tokens_per_trial: default_tokens(),
            warmup_trials: default_warmup(),
            measured_trials: default_measured(),
            d_model: default_d_model(),
            d_ret: default_d_ret(),
            k: default_k(),
            seed: 0,
        }
    }
}

impl BenchSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(BenchError::Spec(m));
        if self.expert_counts.is_empty() || self.variants.is_empty() {
            return bad("expert_counts and variants must be non-empty".into());
        }
        for &n in &self.expert_counts {
            let r = (n as f64).sqrt().round() as usize;
            if n == 0 || r * r != n {
                return bad(format!("expert count {n} is not a perfect square"));
            }
            if self.k > r {
                return bad(format!("k = {} exceeds √{n} = {r} keys per half", self.k));
            }
        }
        if self.measured_trials < 5 {
            return bad(format!("measured_trials {} < 5", self.measured_trials));
        }
        if self.warmup_trials < 3 {
            return bad(format!("warmup_trials {} < 3", self.warmup_trials));
        }
        if self.tokens_per_trial == 0 || self.d_model == 0 || self.k == 0 {
            return bad("tokens_per_trial, d_model and k must be positive".into());
        }
        if self.d_ret < 2 || !self.d_ret.is_multiple_of(2) {
            return bad(format!("d_ret {} must be even and at least 2", self.d_ret));
        }
        Ok(())
    }
}

/// One CSV row: a timed `(variant, n_e)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultRecord {
    pub variant: BenchVariant,
    pub n_experts: usize,
    pub k: usize,
    pub d_model: usize,
    pub tokens: usize,
    pub median_ns_per_token: f64,
    pub p10: f64,
    pub p90: f64,
    pub oracle_pass: bool,
    pub seed: u64,
}

/// Full benchmark output: spec echo, build metadata and one record per cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchReport {
    pub spec: BenchSpec,
    pub build: BuildInfo,
    /// Largest oracle deviation per variant, checked at the smallest expert count.
    pub oracle_error: Vec<(BenchVariant, f64)>,
    pub records: Vec<ResultRecord>,
}

impl BenchReport {
    pub fn record(&self, variant: BenchVariant, n_experts: usize) -> Option<&ResultRecord> {
        self.records
            .iter()
            .find(|r| r.variant == variant && r.n_experts == n_experts)
    }
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

pub fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn cell_seed(seed: u64, n_experts: usize) -> u64 {
    seed ^ (n_experts as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Models and tokens shared by every variant at one expert count.
struct Cell {
    cdmoe: CdMoeBlock,
    naive: NaiveRoutedMoe,
    x: Vec<f64>,
}

impl Cell {
    fn new(spec: &BenchSpec, n_experts: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cell_seed(spec.seed, n_experts));
        let d = spec.d_model;
        let cfg = CdMoeConfig::new(d, d, spec.d_ret, n_experts, 1, spec.k);
        let std = 1.0 / (d as f64).sqrt();
        let cdmoe = CdMoeBlock::new(cfg, std, &mut rng)?;
        let naive = NaiveRoutedMoe::new(d, n_experts, spec.k, std, &mut rng)?;
        let x = Tensor::randn(&[spec.tokens_per_trial * d], 1.0, &mut rng).to_vec();
        Ok(Cell { cdmoe, naive, x })
    }

    fn run(&self, v: BenchVariant, tokens: usize) -> Vec<f64> {
        match v {
            BenchVariant::Cdmoe => self.cdmoe.expert_branch_raw(&self.x, tokens, Selector::ProductKey).0,
            BenchVariant::BruteForce => self.cdmoe.expert_branch_raw(&self.x, tokens, Selector::BruteForce).0,
            BenchVariant::NaiveRouted => self.naive.forward_raw(&self.x, tokens),
        }
    }

    /// Largest deviation between `v` and its exhaustive reference.
    fn oracle_error(&self, v: BenchVariant, tokens: usize) -> Result<f64> {
        let got = self.run(v, tokens);
        let want = match v {
            BenchVariant::Cdmoe | BenchVariant::BruteForce => {
                let d = self.cdmoe.cfg.d_model;
                let x = Tensor::new(&[1, tokens, d], self.x[..tokens * d].to_vec())?;
                let r = self.cdmoe.brute_force_retrieve(&x)?;
                self.cdmoe.expert_branch(&x, &r)?.to_vec()
            }
            BenchVariant::NaiveRouted => naive_reference(&self.naive, &self.x, tokens),
        };
        Ok(got
            .iter()
            .zip(&want)
            .map(|(a, b)| if a == b { 0.0 } else { (a - b).abs() })
            .fold(0.0, f64::max))
    }
}

/// Exhaustive reference for the routed baseline: full sort of the router scores.
fn naive_reference(m: &NaiveRoutedMoe, x: &[f64], tokens: usize) -> Vec<f64> {
    let d = m.d_model;
    let mut out = vec![0.0; tokens * d];
    for t in 0..tokens {
        let xr = &x[t * d..(t + 1) * d];
        let mut ranked: Vec<(f64, usize)> = m.router_scores(xr).into_iter().zip(0..).collect();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        ranked.truncate(m.k);
        let top = ranked[0].0;
        let z: f64 = ranked.iter().map(|(s, _)| (s - top).exp()).sum();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
        let experts = ranked
            .iter()
            .map(|&(s, e)| {
                (
                    (s - top).exp() / z,
                    &m.down[e * d..(e + 1) * d],
                    &m.up[e * d..(e + 1) * d],
                )
            })
            .chain((0..m.k).map(|j| {
                (
                    1.0,
                    &m.shared_down[j * d..(j + 1) * d],
                    &m.shared_up[j * d..(j + 1) * d],
                )
            }));
        for (g, down, up) in experts {
            let w = g * m.activation.scalar(dot(xr, down));
            for (o, u) in out[t * d..(t + 1) * d].iter_mut().zip(up) {
                *o += w * u;
            }
        }
    }
    out
}

/// Run the benchmark: oracle gate first, then single-threaded timing of every cell.
pub fn bench_retrieval(spec: &BenchSpec) -> Result<BenchReport> {
    spec.validate()?;
    let smallest = *spec.expert_counts.iter().min().unwrap();
    let gate = Cell::new(spec, smallest)?;
    let mut oracle_error = Vec::new();
    for &v in &spec.variants {
        let err = gate.oracle_error(v, spec.tokens_per_trial.min(16))?;
        if err.is_nan() || err > ORACLE_TOL {
            return Err(BenchError::Oracle(format!(
                "{} deviates from the exhaustive oracle by {err:e} at n_e = {smallest}",
                v.name()
            )));
        }
        oracle_error.push((v, err));
    }
    drop(gate);

    let mut records = Vec::new();
    for &n in &spec.expert_counts {
        let cell = Cell::new(spec, n)?;
        for &v in &spec.variants {
            let mut per_token = Vec::with_capacity(spec.measured_trials);
            for trial in 0..spec.warmup_trials + spec.measured_trials {
                let start = Instant::now();
                black_box(cell.run(v, black_box(spec.tokens_per_trial)));
                let ns = start.elapsed().as_nanos() as f64 / spec.tokens_per_trial as f64;
                if trial >= spec.warmup_trials {
                    per_token.push(ns.max(f64::MIN_POSITIVE));
                }
            }
            per_token.sort_by(f64::total_cmp);
            records.push(ResultRecord {
                variant: v,
                n_experts: n,
                k: spec.k,
                d_model: spec.d_model,
                tokens: spec.tokens_per_trial,
                median_ns_per_token: median(&per_token),
                p10: percentile(&per_token, 0.1),
                p90: percentile(&per_token, 0.9),
                oracle_pass: true,
                seed: spec.seed,
            });
        }
    }
    Ok(BenchReport {
        spec: spec.clone(),
        build: BuildInfo::current(),
        oracle_error,
        records,
    })
}

/// CSV with a `# schema=1` comment line followed by the header and one row per record.
pub fn write_csv<W: Write>(records: &[ResultRecord], mut w: W) -> Result<()> {
    writeln!(w, "# schema={CSV_SCHEMA}")?;
    let mut cw = csv::Writer::from_writer(w);
    for r in records {
        cw.serialize(r)?;
    }
    if records.is_empty() {
        cw.write_record(CSV_COLUMNS)?;
    }
    cw.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(r: R) -> Result<Vec<ResultRecord>> {
    let mut text = String::new();
    let mut r = r;
    r.read_to_string(&mut text)?;
    let (first, rest) = text.split_once('\n').unwrap_or((text.as_str(), ""));
    let want = format!("# schema={CSV_SCHEMA}");
    if first.trim_end() != want {
        return Err(BenchError::Format(format!("expected '{want}', found '{first}'")));
    }
    let mut cr = csv::Reader::from_reader(rest.as_bytes());
    let header: Vec<String> = cr.headers()?.iter().map(str::to_string).collect();
    if header != CSV_COLUMNS {
        return Err(BenchError::Format(format!("unexpected CSV columns {header:?}")));
    }
    cr.deserialize().map(|row| row.map_err(BenchError::from)).collect()
}
