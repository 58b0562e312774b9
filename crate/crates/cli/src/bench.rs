use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use structmiss::bayes::run_theory_suite;
use structmiss::eval::{
    bench_runtime, run_mnar_protocol, runtime_fixture, split_dataset, BaselineKind, BenchmarkReport, ConstantImputer,
    Imputer, ProtocolConfig, StatImputer, RUNTIME_COLS, RUNTIME_ROWS,
};

use crate::config::{prepare_out, required, resolve, runtime, usage, write_json, write_text, CliError, Globals};
use crate::data::load_dataset;
use crate::model::flow_imputer;

#[derive(Args, Debug, Serialize)]
pub struct VerifyArgs {
    /// Randomized instances per statement.
    #[arg(long)]
    instances: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyParams {
    pub instances: usize,
}

impl Default for VerifyParams {
    fn default() -> Self {
        Self { instances: 100 }
    }
}

pub fn verify_theory(g: &Globals, file: &Map<String, Value>, a: &VerifyArgs) -> Result<(), CliError> {
    let p: VerifyParams = resolve(file, a)?;
    let out = prepare_out(g, "verify-theory", &p)?;
    let suite = run_theory_suite(g.seed, p.instances)?;
    print!("{}", suite.render_text());
    write_json(&out.join("theory_report.json"), &suite)?;
    if suite.passed() {
        Ok(())
    } else {
        Err(runtime("at least one statement has violations; see theory_report.json"))
    }
}

#[derive(Args, Debug, Serialize)]
pub struct BenchArgs {
    /// Complete CSV datasets (repeat the flag for several).
    #[arg(long = "input")]
    #[serde(skip_serializing_if = "Vec::is_empty")]
    inputs: Vec<PathBuf>,
    /// Label column, left out of masking and imputation.
    #[arg(long)]
    label_col: Option<String>,
    /// Comma-separated methods: mean, median, zero, flow.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Checkpoint for the `flow` method.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    masks: Option<usize>,
    #[arg(long)]
    rate: Option<f64>,
    #[arg(long)]
    split_ratio: Option<f64>,
    /// Also time every method on the fixed runtime fixture.
    #[arg(long)]
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    runtime: bool,
    #[arg(long)]
    repeats: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchParams {
    pub inputs: Vec<PathBuf>,
    pub label_col: Option<String>,
    pub methods: Vec<String>,
    pub model: Option<PathBuf>,
    pub masks: usize,
    pub rate: f64,
    pub split_ratio: f64,
    pub runtime: bool,
    pub repeats: usize,
}

impl Default for BenchParams {
    fn default() -> Self {
        let protocol = ProtocolConfig::default();
        Self {
            inputs: Vec::new(),
            label_col: None,
            methods: vec!["mean".into(), "median".into()],
            model: None,
            masks: protocol.masks,
            rate: protocol.rate,
            split_ratio: protocol.split_ratio,
            runtime: false,
            repeats: 5,
        }
    }
}

fn build_method(name: &str, p: &BenchParams, g: &Globals) -> Result<Box<dyn Imputer>, CliError> {
    match name {
        "mean" => Ok(Box::new(StatImputer(BaselineKind::Mean))),
        "median" => Ok(Box::new(StatImputer(BaselineKind::Median))),
        "zero" => Ok(Box::new(ConstantImputer(0.0))),
        "flow" => flow_imputer(&required(&p.model, "model")?, g),
        other => Err(usage(format!("unknown method `{other}` (mean, median, zero, flow)"))),
    }
}

pub fn bench(g: &Globals, file: &Map<String, Value>, a: &BenchArgs) -> Result<(), CliError> {
    let p: BenchParams = resolve(file, a)?;
    if p.inputs.is_empty() && !p.runtime {
        return Err(usage("bench needs at least one --input or --runtime"));
    }
    if p.methods.is_empty() {
        return Err(usage("no methods selected"));
    }
    let methods = p.methods.iter().map(|m| build_method(m, &p, g)).collect::<Result<Vec<_>, _>>()?;
    let protocol = ProtocolConfig {
        masks: p.masks,
        rate: p.rate,
        seed: g.seed,
        split_ratio: p.split_ratio,
    };
    let out = prepare_out(g, "bench", &p)?;
    if !p.inputs.is_empty() {
        let mut results = Vec::new();
        for path in &p.inputs {
            let mut ds = load_dataset(path, p.label_col.as_deref())?;
            let (train, test) = split_dataset(ds.n_rows(), p.split_ratio, g.seed, ds.labels.as_deref())?;
            ds.train = train;
            ds.test = test;
            for m in &methods {
                results.push(run_mnar_protocol(&ds, &protocol, m.as_ref())?);
            }
        }
        let report = BenchmarkReport::assemble(&protocol, &results)?;
        write_text(&out.join("report.json"), &(report.to_json()? + "\n"))?;
        let text = report.render_text();
        write_text(&out.join("report.txt"), &text)?;
        write_text(&out.join("report.svg"), &report.render_svg())?;
        print!("{text}");
    }
    if p.runtime {
        // Wall-clock numbers vary run to run, so they stay out of the
        // deterministic report files.
        let fixture = runtime_fixture(RUNTIME_ROWS, RUNTIME_COLS, p.rate, g.seed)?;
        let mut records = Vec::new();
        let mut skipped = Vec::new();
        for m in &methods {
            match bench_runtime(m.as_ref(), &fixture, p.repeats, g.seed) {
                Ok(r) => {
                    println!("{}: {:.6}s ± {:.6}s over {} repeats", r.method, r.mean, r.std, r.timings.len());
                    records.push(r);
                }
                Err(e) => skipped.push(serde_json::json!({ "method": m.name(), "reason": e.to_string() })),
            }
        }
        let record = serde_json::json!({
            "rows": RUNTIME_ROWS,
            "cols": RUNTIME_COLS,
            "records": records,
            "skipped": skipped,
        });
        write_json(&out.join("runtime.json"), &record)?;
    }
    Ok(())
}

#[derive(Args, Debug, Serialize)]
pub struct ReportArgs {
    /// `report.json` written by `bench`.
    #[arg(long)]
    input: Option<PathBuf>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportParams {
    pub input: Option<PathBuf>,
}

pub fn report(g: &Globals, file: &Map<String, Value>, a: &ReportArgs) -> Result<(), CliError> {
    let p: ReportParams = resolve(file, a)?;
    let input = required(&p.input, "input")?;
    let text = std::fs::read_to_string(&input).map_err(|e| runtime(format!("{}: {e}", input.display())))?;
    let report: BenchmarkReport =
        serde_json::from_str(&text).map_err(|e| runtime(format!("{}: {e}", input.display())))?;
    let out = prepare_out(g, "report", &p)?;
    let rendered = report.render_text();
    write_text(&out.join("report.txt"), &rendered)?;
    write_text(&out.join("report.svg"), &report.render_svg())?;
    print!("{rendered}");
    Ok(())
}
