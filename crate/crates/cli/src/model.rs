use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use structmiss::bayes::{DiscreteEpisodes, DiscretePrior};
use structmiss::checkpoint::{self, CheckpointMeta};
use structmiss::episode::Episode;
use structmiss::eval::{auc_ovr, split_dataset, write_csv, ColumnMeta, FlowImputer, MaskedDataset};
use structmiss::flow::FlowConfig;
use structmiss::missingness::{GateConfig, Mask};
use structmiss::pfn::{PfnConfig, PfnModel};
use structmiss::scm::{MechanismConfig, TaskConfig};
use structmiss::train::{train, ScmPrior, TaskPrior, TrainConfig, TrainStatus};
use structmiss::{Precision, Scalar, Tensor};

use crate::config::{prepare_out, required, resolve, runtime, usage, write_json, write_text, CliError, Globals};
use crate::data::load_dataset;

pub const MODEL_FILE: &str = "model.bin";

#[derive(Args, Debug, Serialize)]
pub struct PretrainArgs {
    /// `scm` (synthetic SCM tasks) or `discrete` (enumerable toy prior).
    #[arg(long)]
    prior: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    min_lr: Option<f64>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    steps_per_epoch: Option<usize>,
    #[arg(long)]
    cfm_weight: Option<f64>,
    /// Rows per SCM task.
    #[arg(long)]
    rows: Option<usize>,
    /// Features per SCM task.
    #[arg(long)]
    features: Option<usize>,
    #[arg(long)]
    max_classes: Option<usize>,
    /// Context rows per discrete-prior episode.
    #[arg(long)]
    context: Option<usize>,
    /// Query rows per discrete-prior episode.
    #[arg(long)]
    queries: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    ffn: Option<usize>,
    /// Train the classifier only.
    #[arg(long = "no-flow", action = clap::ArgAction::SetFalse)]
    #[serde(skip_serializing_if = "is_true")]
    flow: bool,
}

fn is_true(b: &bool) -> bool {
    *b
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainParams {
    pub prior: String,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub steps_per_epoch: usize,
    pub cfm_weight: f64,
    pub rows: usize,
    pub features: usize,
    pub max_classes: usize,
    pub context: usize,
    pub queries: usize,
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn: usize,
    pub flow: bool,
}

impl Default for PretrainParams {
    fn default() -> Self {
        let desk = PfnConfig::desk();
        Self {
            prior: "scm".into(),
            steps: 200,
            batch_size: 16,
            lr: 1e-3,
            min_lr: 5e-5,
            warmup_epochs: 2,
            steps_per_epoch: 10,
            cfm_weight: 0.1,
            rows: 128,
            features: 8,
            max_classes: 10,
            context: 12,
            queries: 8,
            layers: desk.layers,
            width: desk.width,
            heads: desk.heads,
            ffn: desk.ffn,
            flow: true,
        }
    }
}

enum Prior {
    Scm(ScmPrior),
    Discrete(DiscreteEpisodes),
}

impl Prior {
    fn as_task_prior(&self) -> &dyn TaskPrior {
        match self {
            Prior::Scm(p) => p,
            Prior::Discrete(p) => p,
        }
    }
}

pub fn pretrain(g: &Globals, file: &Map<String, Value>, a: &PretrainArgs) -> Result<(), CliError> {
    let p: PretrainParams = resolve(file, a)?;
    let (prior, prior_json, features, classes) = match p.prior.as_str() {
        "scm" => {
            let mut mechanism = MechanismConfig::desk(p.features);
            mechanism.class_range = (2, p.max_classes);
            mechanism.hidden = (p.max_classes + 2 * p.features).max(32);
            let task = TaskConfig {
                mechanism,
                gate: Some(GateConfig::default()),
                gate_step: 0,
            };
            let json = serde_json::json!({ "kind": "scm", "task": task, "rows": p.rows });
            (Prior::Scm(ScmPrior { task, rows: p.rows }), json, p.features, p.max_classes)
        }
        "discrete" => {
            let prior = DiscretePrior::benchmark(g.seed)?;
            let (d, c) = (prior.tasks[0].levels.len(), prior.n_classes());
            let json = serde_json::json!({
                "kind": "discrete-benchmark",
                "seed": g.seed,
                "context": p.context,
                "queries": p.queries,
            });
            let episodes = DiscreteEpisodes {
                prior,
                n_context: p.context,
                n_queries: p.queries,
            };
            (Prior::Discrete(episodes), json, d, c)
        }
        other => return Err(usage(format!("unknown prior `{other}` (scm, discrete)"))),
    };
    let config = PfnConfig {
        layers: p.layers,
        width: p.width,
        heads: p.heads,
        ffn: p.ffn,
        max_classes: classes,
        max_features: features,
        ..PfnConfig::desk()
    };
    let train_cfg = TrainConfig {
        lr: p.lr,
        warmup_epochs: p.warmup_epochs,
        min_lr: p.min_lr,
        batch_size: p.batch_size,
        cfm_weight: if p.flow { p.cfm_weight } else { 0.0 },
        steps: p.steps,
        steps_per_epoch: p.steps_per_epoch,
        seed: g.seed,
        ..TrainConfig::default()
    };
    let flow = p.flow.then(FlowConfig::default);
    let out = prepare_out(g, "pretrain", &p)?;
    let status = match g.precision.unwrap_or(Precision::F32) {
        Precision::F32 => run_pretrain::<f32>(g, config, flow, train_cfg, &prior, prior_json, &out)?,
        Precision::F64 => run_pretrain::<f64>(g, config, flow, train_cfg, &prior, prior_json, &out)?,
    };
    match status {
        TrainStatus::Completed => Ok(()),
        TrainStatus::Aborted { step, reason } => Err(runtime(format!(
            "training aborted at step {step}: {reason}; last finite parameters saved"
        ))),
    }
}

fn run_pretrain<T: Scalar>(
    g: &Globals,
    config: PfnConfig,
    flow: Option<FlowConfig>,
    train_cfg: TrainConfig,
    prior: &Prior,
    prior_json: Value,
    out: &std::path::Path,
) -> Result<TrainStatus, CliError> {
    let model = PfnModel::<T>::new(config, flow, g.seed)?;
    let run = train(model, prior.as_task_prior(), &train_cfg)?;
    let mut meta = CheckpointMeta::untrained(&run.model, g.seed);
    meta.train = Some(train_cfg);
    meta.prior = prior_json;
    meta.steps_done = run.steps_done;
    meta.status = Some(run.status.clone());
    meta.loss_history = run.log.clone();
    checkpoint::save(&run.model, &meta, &out.join(MODEL_FILE))?;
    let mut csv = String::from("step,lr,loss,ce,cfm\n");
    for l in &run.log {
        csv.push_str(&format!("{},{},{},{},{}\n", l.step, l.lr, l.loss, l.ce, l.cfm));
    }
    write_text(&out.join("loss.csv"), &csv)?;
    if let Some(last) = run.log.last() {
        println!("step {}: loss {:.4} (ce {:.4}, cfm {:.4})", last.step, last.loss, last.ce, last.cfm);
    }
    println!("saved {}", out.join(MODEL_FILE).display());
    Ok(run.status)
}

enum AnyModel {
    F32(PfnModel<f32>),
    F64(PfnModel<f64>),
}

fn load_model(path: &std::path::Path, g: &Globals) -> Result<(AnyModel, CheckpointMeta), CliError> {
    let sidecar = checkpoint::sidecar_path(path);
    let text = std::fs::read_to_string(&sidecar).map_err(|e| runtime(format!("{}: {e}", sidecar.display())))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| runtime(format!("{}: {e}", sidecar.display())))?;
    if let Some(p) = g.precision {
        if p != meta.precision {
            return Err(runtime(format!("checkpoint is {:?}, --precision asks for {p:?}", meta.precision)));
        }
    }
    Ok(match meta.precision {
        Precision::F32 => (AnyModel::F32(checkpoint::load::<f32>(path)?.0), meta),
        Precision::F64 => (AnyModel::F64(checkpoint::load::<f64>(path)?.0), meta),
    })
}

#[derive(Args, Debug, Serialize)]
pub struct PredictArgs {
    /// Checkpoint blob written by `pretrain`.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Labelled CSV; a stratified split provides context and query rows.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    label_col: Option<String>,
    /// Fraction of rows held out as queries.
    #[arg(long)]
    test_fraction: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictParams {
    pub model: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub label_col: Option<String>,
    pub test_fraction: f64,
}

impl Default for PredictParams {
    fn default() -> Self {
        Self {
            model: None,
            input: None,
            label_col: None,
            test_fraction: 0.3,
        }
    }
}

pub fn predict(g: &Globals, file: &Map<String, Value>, a: &PredictArgs) -> Result<(), CliError> {
    let p: PredictParams = resolve(file, a)?;
    let model_path = required(&p.model, "model")?;
    let input = required(&p.input, "input")?;
    let label_col = required(&p.label_col, "label_col")?;
    let ds = load_dataset(&input, Some(&label_col))?;
    let labels = ds.labels.clone().ok_or_else(|| usage("input has no label column"))?;
    let (train_rows, test_rows) = split_dataset(ds.n_rows(), 1.0 - p.test_fraction, g.seed, Some(&labels))?;
    let (model, _) = load_model(&model_path, g)?;
    let out = prepare_out(g, "predict", &p)?;
    let ctx = ds.select_rows(&train_rows);
    let qry = ds.select_rows(&test_rows);
    let y_ctx: Vec<usize> = train_rows.iter().map(|&i| labels[i]).collect();
    let y_q: Vec<usize> = test_rows.iter().map(|&i| labels[i]).collect();
    let n_classes = ds.n_classes();
    let ep = Episode::new(&ctx.x, &ctx.mask, &y_ctx, &qry.x, &qry.mask, n_classes)?;
    let probs = match &model {
        AnyModel::F32(m) => m.predict(&ep)?,
        AnyModel::F64(m) => m.predict(&ep)?,
    };
    let names: Vec<String> = match &ds.label_meta {
        Some(m) if m.levels.len() == n_classes => m.levels.clone(),
        _ => (0..n_classes).map(|c| c.to_string()).collect(),
    };
    let mut csv = String::from("row");
    for n in &names {
        csv.push_str(&format!(",p_{n}"));
    }
    csv.push_str(",predicted\n");
    let (mut correct, mut log_loss) = (0usize, 0.0);
    for (r, &i) in test_rows.iter().enumerate() {
        let row = probs.row(r);
        let best = (0..n_classes).max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a))).unwrap_or(0);
        correct += usize::from(best == y_q[r]);
        log_loss -= row[y_q[r]].max(1e-300).ln();
        csv.push_str(&i.to_string());
        for v in row {
            csv.push_str(&format!(",{v}"));
        }
        csv.push_str(&format!(",{}\n", names[best]));
    }
    write_text(&out.join("predictions.csv"), &csv)?;
    let n_q = test_rows.len() as f64;
    let metrics = serde_json::json!({
        "context_rows": train_rows.len(),
        "query_rows": test_rows.len(),
        "classes": n_classes,
        "accuracy": correct as f64 / n_q,
        "log_loss": log_loss / n_q,
        "auc": auc_ovr(&probs, &y_q).ok(),
    });
    write_json(&out.join("metrics.json"), &metrics)?;
    println!("{}", serde_json::to_string_pretty(&metrics).map_err(runtime)?);
    Ok(())
}

#[derive(Args, Debug, Serialize)]
pub struct ImputeArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    /// CSV with empty cells at missing entries.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Column excluded from imputation and used as context labels.
    #[arg(long)]
    label_col: Option<String>,
    /// Posterior draws per row (default: the checkpoint's setting).
    #[arg(long)]
    samples: Option<usize>,
    /// Upper bound on context rows.
    #[arg(long)]
    max_context: Option<usize>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImputeParams {
    pub model: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub label_col: Option<String>,
    pub samples: Option<usize>,
    pub max_context: Option<usize>,
}

pub fn impute(g: &Globals, file: &Map<String, Value>, a: &ImputeArgs) -> Result<(), CliError> {
    let p: ImputeParams = resolve(file, a)?;
    let model_path = required(&p.model, "model")?;
    let input = required(&p.input, "input")?;
    let ds = load_dataset(&input, p.label_col.as_deref())?;
    let (model, meta) = load_model(&model_path, g)?;
    let flow = meta.flow.clone().ok_or_else(|| runtime("checkpoint has no flow head"))?;
    let samples = p.samples.unwrap_or(flow.samples);
    if samples == 0 {
        return Err(usage("samples must be at least 1"));
    }
    let out = prepare_out(g, "impute", &p)?;
    let (imputed, spread) = match model {
        AnyModel::F32(m) => run_impute(m, &ds, samples, p.max_context, g.seed)?,
        AnyModel::F64(m) => run_impute(m, &ds, samples, p.max_context, g.seed)?,
    };
    let mut done = ds.clone();
    done.x = imputed.values;
    done.mask = Mask::zeros(ds.n_rows(), ds.n_cols(), "none", g.seed);
    write_csv(&out.join("imputed.csv"), &done)?;
    let spread_cols: Vec<ColumnMeta> = ds.columns.iter().map(|c| ColumnMeta::numeric(c.name.clone())).collect();
    write_csv(&out.join("spread.csv"), &MaskedDataset::from_values("spread", spread, spread_cols)?)?;
    let record = serde_json::json!({
        "solver": flow.solver,
        "steps": flow.steps,
        "samples": samples,
        "seed": g.seed,
        "missing_entries": ds.mask.count(),
        "flags": imputed.flags,
    });
    write_json(&out.join("run.json"), &record)?;
    println!("imputed {} entries into {}", ds.mask.count(), out.join("imputed.csv").display());
    Ok(())
}

fn run_impute<T: Scalar>(
    model: PfnModel<T>,
    ds: &MaskedDataset,
    samples: usize,
    max_context: Option<usize>,
    seed: u64,
) -> Result<(structmiss::eval::Imputed, Tensor<f64>), CliError> {
    let mut imputer = FlowImputer::new(model, samples);
    if let Some(c) = max_context {
        imputer.max_context = c;
    }
    Ok(imputer.impute_with_spread(ds, seed)?)
}

/// Loads a checkpoint as a benchmark imputer.
pub fn flow_imputer(path: &std::path::Path, g: &Globals) -> Result<Box<dyn structmiss::eval::Imputer>, CliError> {
    let (model, meta) = load_model(path, g)?;
    let samples = meta.flow.map_or(16, |f| f.samples);
    Ok(match model {
        AnyModel::F32(m) => Box::new(FlowImputer::new(m, samples)),
        AnyModel::F64(m) => Box::new(FlowImputer::new(m, samples)),
    })
}
