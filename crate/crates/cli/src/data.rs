use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use structmiss::eval::{baseline_impute, read_csv, write_csv, write_mask_csv, BaselineKind, MaskedDataset};
use structmiss::missingness::{mcar_mask, mnar_logistic_m2m, GateConfig, Mask, MnarConfig, ScoreGate};
use structmiss::scm::{sample_batch, MechanismConfig, SyntheticTask, TaskConfig};
use structmiss::Tensor;

use crate::config::{prepare_out, required, resolve, runtime, usage, write_json, CliError, Globals};

#[derive(Args, Debug, Serialize)]
pub struct GenTasksArgs {
    /// Number of tasks; task i uses seed + i.
    #[arg(long)]
    count: Option<usize>,
    /// Rows per task.
    #[arg(long)]
    rows: Option<usize>,
    #[arg(long)]
    features: Option<usize>,
    #[arg(long)]
    min_classes: Option<usize>,
    #[arg(long)]
    max_classes: Option<usize>,
    /// Gate warmup step (default: fully warmed up).
    #[arg(long)]
    gate_step: Option<usize>,
    /// Generate complete tables.
    #[arg(long = "no-gate", action = clap::ArgAction::SetFalse)]
    #[serde(skip_serializing_if = "is_true")]
    gate: bool,
}

fn is_true(b: &bool) -> bool {
    *b
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenTasksParams {
    pub count: usize,
    pub rows: usize,
    pub features: usize,
    pub min_classes: usize,
    pub max_classes: usize,
    pub gate_step: Option<usize>,
    pub gate: bool,
}

impl Default for GenTasksParams {
    fn default() -> Self {
        Self {
            count: 4,
            rows: 256,
            features: 8,
            min_classes: 2,
            max_classes: 10,
            gate_step: None,
            gate: true,
        }
    }
}

#[derive(Serialize)]
struct TaskEntry {
    index: usize,
    seed: u64,
    features: String,
    labels: String,
    rows: usize,
    n_features: usize,
    n_classes: usize,
    categorical: Vec<Option<usize>>,
    /// Rows before this index are context, the rest queries.
    split: usize,
    missing_rate: f64,
}

pub fn gen_tasks(g: &Globals, file: &Map<String, Value>, a: &GenTasksArgs) -> Result<(), CliError> {
    let p: GenTasksParams = resolve(file, a)?;
    let mut mechanism = MechanismConfig::desk(p.features);
    mechanism.class_range = (p.min_classes, p.max_classes);
    mechanism.hidden = (p.max_classes + 2 * p.features).max(32);
    let config = TaskConfig {
        mechanism,
        gate: p.gate.then(GateConfig::default),
        gate_step: p.gate_step.unwrap_or(usize::MAX),
    };
    let out = prepare_out(g, "gen-tasks", &p)?;
    let tasks = sample_batch(&config, p.rows, g.seed, p.count)?;
    let mut entries = Vec::with_capacity(tasks.len());
    for (i, t) in tasks.iter().enumerate() {
        let features = format!("task_{i:03}_features.csv");
        let labels = format!("task_{i:03}_labels.csv");
        write_task(t, &out.join(&features), &out.join(&labels))?;
        entries.push(TaskEntry {
            index: i,
            seed: g.seed.wrapping_add(i as u64),
            features,
            labels,
            rows: t.n_rows(),
            n_features: t.x.cols(),
            n_classes: t.n_classes(),
            categorical: t.mechanism.categorical.clone(),
            split: t.split,
            missing_rate: t.mask.rate(),
        });
    }
    let manifest = serde_json::json!({
        "seed": g.seed,
        "config": config,
        "tasks": entries,
    });
    write_json(&out.join("manifest.json"), &manifest)?;
    println!("wrote {} tasks to {}", entries.len(), out.display());
    Ok(())
}

fn write_task(t: &SyntheticTask, features: &Path, labels: &Path) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(features).map_err(runtime)?;
    w.write_record((0..t.x.cols()).map(|j| format!("x{j}"))).map_err(runtime)?;
    for i in 0..t.n_rows() {
        let rec: Vec<String> = (0..t.x.cols())
            .map(|j| if t.mask.is_missing(i, j) { String::new() } else { t.x.at(i, j).to_string() })
            .collect();
        w.write_record(&rec).map_err(runtime)?;
    }
    w.flush().map_err(runtime)?;
    let mut w = csv::Writer::from_path(labels).map_err(runtime)?;
    w.write_record(["y"]).map_err(runtime)?;
    for y in &t.y {
        w.write_record([y.to_string()]).map_err(runtime)?;
    }
    w.flush().map_err(runtime)?;
    Ok(())
}

#[derive(Args, Debug, Serialize)]
pub struct MaskArgs {
    /// Input CSV with a header row; empty cells are already missing.
    #[arg(long)]
    input: Option<PathBuf>,
    /// One of mcar, gate, gate-nsm, mnar-logistic-m2m.
    #[arg(long)]
    mechanism: Option<String>,
    /// Target missing rate.
    #[arg(long)]
    rate: Option<f64>,
    /// Number of independent masks; mask k uses seed + k.
    #[arg(long)]
    k: Option<usize>,
    /// Column that is never masked.
    #[arg(long)]
    label_col: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskParams {
    pub input: Option<PathBuf>,
    pub mechanism: String,
    pub rate: f64,
    pub k: usize,
    pub label_col: Option<String>,
}

impl Default for MaskParams {
    fn default() -> Self {
        Self {
            input: None,
            mechanism: "mcar".into(),
            rate: 0.3,
            k: 1,
            label_col: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Mechanism {
    Mcar,
    Gate,
    GateNsm,
    Mnar,
}

impl std::str::FromStr for Mechanism {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "mcar" => Ok(Self::Mcar),
            "gate" => Ok(Self::Gate),
            "gate-nsm" => Ok(Self::GateNsm),
            "mnar-logistic-m2m" => Ok(Self::Mnar),
            _ => Err(usage(format!("unknown mechanism `{s}` (mcar, gate, gate-nsm, mnar-logistic-m2m)"))),
        }
    }
}

pub fn mask(g: &Globals, file: &Map<String, Value>, a: &MaskArgs) -> Result<(), CliError> {
    let p: MaskParams = resolve(file, a)?;
    let input = required(&p.input, "input")?;
    let mechanism: Mechanism = p.mechanism.parse()?;
    if !(p.rate > 0.0 && p.rate < 1.0) {
        return Err(usage(format!("rate {} outside (0, 1)", p.rate)));
    }
    if p.k == 0 {
        return Err(usage("k must be at least 1"));
    }
    let ds = read_csv(&input, p.label_col.as_deref(), None)?;
    let out = prepare_out(g, "mask", &p)?;
    // Mechanisms driven by values see the column-mean fill of entries that
    // were already missing.
    let filled = baseline_impute(&ds, BaselineKind::Mean).values;
    for k in 0..p.k {
        let seed = g.seed.wrapping_add(k as u64);
        let fresh = draw_mask(mechanism, &filled, p.rate, seed)?;
        let masked = ds.with_mask(&fresh)?;
        write_csv(&out.join(format!("masked_{k:02}.csv")), &masked)?;
        write_mask_csv(&out.join(format!("mask_{k:02}.csv")), &masked.mask, &ds.columns)?;
        let provenance = serde_json::json!({
            "input": input.file_name().map(|n| n.to_string_lossy().into_owned()),
            "mechanism": p.mechanism,
            "seed": seed,
            "target_rate": p.rate,
            "params": fresh.provenance.params,
            "rows": ds.n_rows(),
            "cols": ds.n_cols(),
            "label_col": p.label_col,
            "mask_rate": fresh.rate(),
            "missing_rate": masked.mask.rate(),
        });
        write_json(&out.join(format!("provenance_{k:02}.json")), &provenance)?;
    }
    println!("wrote {} mask(s) to {}", p.k, out.display());
    Ok(())
}

fn draw_mask(mechanism: Mechanism, x: &Tensor<f64>, rate: f64, seed: u64) -> Result<Mask, CliError> {
    let (n, d) = (x.rows(), x.cols());
    Ok(match mechanism {
        Mechanism::Mcar => mcar_mask(n, d, rate, seed, &[])?,
        Mechanism::Mnar => mnar_logistic_m2m(x, &MnarConfig::with_rate(rate), seed, &[])?,
        Mechanism::Gate | Mechanism::GateNsm => {
            let mut cfg = GateConfig {
                fixed_alpha: Some(rate),
                ..GateConfig::default()
            };
            if mechanism == Mechanism::GateNsm {
                cfg = cfg.without_propagation();
            }
            let z = standardize(x);
            let gate = ScoreGate::sample(&cfg, d, d, seed)?;
            let mut m = gate.apply(&z, usize::MAX, &[], structmiss::seed::derive(seed, &[1]))?;
            m.provenance.params = serde_json::to_value(&cfg).map_err(runtime)?;
            m
        }
    })
}

/// Column z-scores; the gate's latent input for observed tables.
fn standardize(x: &Tensor<f64>) -> Tensor<f64> {
    let (n, d) = (x.rows(), x.cols());
    let mut z = x.clone();
    for j in 0..d {
        let mean = (0..n).map(|i| x.at(i, j)).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (x.at(i, j) - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        for i in 0..n {
            z.set(i, j, (x.at(i, j) - mean) / sd);
        }
    }
    z
}

/// Reads a CSV for the model commands.
pub fn load_dataset(path: &Path, label_col: Option<&str>) -> Result<MaskedDataset, CliError> {
    Ok(read_csv(path, label_col, None)?)
}
