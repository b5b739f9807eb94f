//! MQAR sweep over a grid of (variant, d_model, seq_len) cells.

use std::io::{Read, Write};

use hybrid_core::tasks::{
    generate_mqar, run_experiment_on, ExperimentResult, ExperimentSpec, MqarConfig, MqarVariant, Split,
};
use serde::{Deserialize, Serialize};

use crate::error::{BenchError, Result};

pub const MQAR_CSV_SCHEMA: u32 = 1;
pub const MQAR_CSV_COLUMNS: [&str; 12] = [
    "variant",
    "d_model",
    "seq_len",
    "kv_pairs",
    "seeds",
    "mean_final_accuracy",
    "min_final_accuracy",
    "max_final_accuracy",
    "mean_best_accuracy",
    "mean_steps",
    "mean_epochs",
    "wall_seconds",
];

/// JSON grid file. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MqarGrid {
    pub variants: Vec<MqarVariant>,
    pub d_models: Vec<usize>,
    pub seq_lens: Vec<usize>,
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    /// Key/value pairs per sequence; `None` gives `seq_len / 4`.
    #[serde(default)]
    pub kv_pairs: Option<usize>,
    #[serde(default = "default_train")]
    pub n_train: usize,
    #[serde(default = "default_test")]
    pub n_test: usize,
    /// Model seeds per cell. Data seeds are derived from the top-level seed.
    #[serde(default = "default_seeds")]
    pub model_seeds: Vec<u64>,
    #[serde(default = "default_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Peak learning rate shared by every variant; `None` picks the per-width default.
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_evals")]
    pub evals_per_epoch: usize,
    #[serde(default = "default_target")]
    pub target_accuracy: f64,
    #[serde(default)]
    pub mlp_hidden: Option<usize>,
}

fn default_vocab() -> usize {
    256
}
fn default_train() -> usize {
    1 << 14
}
fn default_test() -> usize {
    1 << 10
}
fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}
fn default_epochs() -> usize {
    20
}
fn default_batch() -> usize {
    32
}
fn default_wd() -> f64 {
    0.01
}
fn default_evals() -> usize {
    4
}
fn default_target() -> f64 {
    1.0
}

impl MqarGrid {
    pub fn from_json(text: &str) -> Result<Self> {
        let g: MqarGrid = serde_json::from_str(text)?;
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() || self.d_models.is_empty() || self.seq_lens.is_empty() {
            return Err(BenchError::Spec(
                "variants, d_models and seq_lens must be non-empty".into(),
            ));
        }
        if self.model_seeds.is_empty() {
            return Err(BenchError::Spec("model_seeds must be non-empty".into()));
        }
        for &t in &self.seq_lens {
            self.data(t, 0).validate()?;
        }
        Ok(())
    }

    pub fn data(&self, seq_len: usize, seed: u64) -> MqarConfig {
        MqarConfig {
            vocab_size: self.vocab_size,
            seq_len,
            kv_pairs: self.kv_pairs.unwrap_or(seq_len / 4),
            num_queries: None,
            n_train: self.n_train,
            n_test: self.n_test,
            power_a: 0.01,
            seed,
        }
    }

    pub fn spec(&self, variant: MqarVariant, d_model: usize, data: MqarConfig, model_seed: u64) -> ExperimentSpec {
        ExperimentSpec {
            model_seed,
            max_epochs: self.max_epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            weight_decay: self.weight_decay,
            evals_per_epoch: self.evals_per_epoch,
            target_accuracy: self.target_accuracy,
            mlp_hidden: self.mlp_hidden,
            ..ExperimentSpec::new(variant, d_model, data)
        }
    }
}

/// Aggregate over the seeds of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub variant: MqarVariant,
    pub d_model: usize,
    pub seq_len: usize,
    pub kv_pairs: usize,
    pub seeds: usize,
    pub mean_final_accuracy: f64,
    pub min_final_accuracy: f64,
    pub max_final_accuracy: f64,
    pub mean_best_accuracy: f64,
    pub mean_steps: f64,
    pub mean_epochs: f64,
    pub wall_seconds: f64,
}

impl CellSummary {
    pub fn from_runs(runs: &[ExperimentResult], kv_pairs: usize) -> Result<Self> {
        let first = runs
            .first()
            .ok_or_else(|| BenchError::Spec("cell without runs".into()))?;
        let n = runs.len() as f64;
        let mean = |f: &dyn Fn(&ExperimentResult) -> f64| runs.iter().map(f).sum::<f64>() / n;
        let finals = runs.iter().map(|r| r.final_accuracy);
        Ok(CellSummary {
            variant: first.variant,
            d_model: first.d_model,
            seq_len: first.seq_len,
            kv_pairs,
            seeds: runs.len(),
            mean_final_accuracy: mean(&|r| r.final_accuracy),
            min_final_accuracy: finals.clone().fold(f64::INFINITY, f64::min),
            max_final_accuracy: finals.fold(f64::NEG_INFINITY, f64::max),
            mean_best_accuracy: mean(&|r| r.best_accuracy),
            mean_steps: mean(&|r| r.steps as f64),
            mean_epochs: mean(&|r| r.epochs),
            wall_seconds: runs.iter().map(|r| r.wall_seconds).sum(),
        })
    }
}

/// Data seed for one sequence length, shared by every variant and model seed.
pub fn data_seed(seed: u64, seq_len: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ seq_len as u64
}

/// Full sweep output: one summary per cell plus every individual run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub grid: MqarGrid,
    pub seed: u64,
    pub cells: Vec<CellSummary>,
    pub runs: Vec<ExperimentResult>,
}

/// Run every cell of the grid. `progress` receives each finished run.
pub fn run_grid(grid: &MqarGrid, seed: u64, mut progress: impl FnMut(&ExperimentResult)) -> Result<GridReport> {
    grid.validate()?;
    let mut report = GridReport {
        grid: grid.clone(),
        seed,
        cells: Vec::new(),
        runs: Vec::new(),
    };
    for &seq_len in &grid.seq_lens {
        let data = grid.data(seq_len, data_seed(seed, seq_len));
        let train = generate_mqar(&data, Split::Train)?;
        let test = generate_mqar(&data, Split::Test)?;
        for &variant in &grid.variants {
            for &d in &grid.d_models {
                let mut runs = Vec::with_capacity(grid.model_seeds.len());
                for &ms in &grid.model_seeds {
                    let spec = grid.spec(variant, d, data.clone(), ms ^ seed);
                    let r = run_experiment_on(&spec, &train, &test, |_, _| {})?;
                    progress(&r);
                    runs.push(r);
                }
                report.cells.push(CellSummary::from_runs(&runs, data.kv_pairs)?);
                report.runs.extend(runs);
            }
        }
    }
    Ok(report)
}

pub fn write_cells<W: Write>(cells: &[CellSummary], mut out: W) -> Result<()> {
    writeln!(out, "# schema={MQAR_CSV_SCHEMA}")?;
    let mut w = csv::Writer::from_writer(out);
    for c in cells {
        w.serialize(c)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_cells<R: Read>(mut input: R) -> Result<Vec<CellSummary>> {
    let mut text = String::new();
    input.read_to_string(&mut text)?;
    let body = text
        .strip_prefix(&format!("# schema={MQAR_CSV_SCHEMA}\n"))
        .ok_or_else(|| BenchError::Format(format!("missing '# schema={MQAR_CSV_SCHEMA}' line")))?;
    let mut r = csv::Reader::from_reader(body.as_bytes());
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if header != MQAR_CSV_COLUMNS {
        return Err(BenchError::Format(format!("unexpected columns {header:?}")));
    }
    r.deserialize().map(|row| row.map_err(BenchError::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> MqarGrid {
        MqarGrid::from_json(
            r#"{"variants": ["ssd", "dma-mul"], "d_models": [8], "seq_lens": [16],
                "vocab_size": 32, "n_train": 16, "n_test": 8, "model_seeds": [0, 1],
                "max_epochs": 1, "batch_size": 8, "evals_per_epoch": 1}"#,
        )
        .unwrap()
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = MqarGrid::from_json(r#"{"variants": ["ssd"], "d_models": [8], "seq_lens": [16], "epochs": 3}"#);
        assert!(err.is_err());
        let err = MqarGrid::from_json(r#"{"variants": ["rnn"], "d_models": [8], "seq_lens": [16]}"#);
        assert!(err.is_err());
    }

    #[test]
    fn one_row_per_cell_and_round_trip() {
        let g = tiny();
        let mut seen = 0;
        let rep = run_grid(&g, 5, |_| seen += 1).unwrap();
        assert_eq!(seen, 4);
        assert_eq!(rep.cells.len(), 2);
        assert!(rep.cells.iter().all(|c| c.seeds == 2 && c.kv_pairs == 4));
        let mut buf = Vec::new();
        write_cells(&rep.cells, &mut buf).unwrap();
        assert_eq!(read_cells(&buf[..]).unwrap(), rep.cells);
        let again = run_grid(&g, 5, |_| {}).unwrap();
        for (x, y) in again.runs.iter().zip(&rep.runs) {
            assert_eq!((&x.loss_curve, &x.accuracy_curve), (&y.loss_curve, &y.accuracy_curve));
        }
    }

    #[test]
    fn capacity_errors_surface() {
        let mut g = tiny();
        g.kv_pairs = Some(100);
        assert!(g.validate().is_err());
    }
}
