//! Benchmark protocol: datasets and splits, repeated MNAR masking,
//! metrics, baselines, reports and runtime measurement.

pub mod baselines;
pub mod dataset;
pub mod metrics;
pub mod protocol;
pub mod report;
pub mod runtime;

pub use baselines::{baseline_impute, BaselineKind, ConstantImputer, FlowImputer, Imputed, Imputer, OracleImputer, StatImputer};
pub use dataset::{read_csv, split_dataset, write_csv, write_mask_csv, ColumnKind, ColumnMeta, MaskedDataset};
pub use metrics::{auc, auc_ovr, avg_rank, oos_mae, ColumnScale, Direction, RankSummary};
pub use protocol::{run_mnar_protocol, ProtocolConfig, ProtocolResult};
pub use report::BenchmarkReport;
pub use runtime::{bench_runtime, runtime_fixture, RuntimeRecord, RUNTIME_COLS, RUNTIME_ROWS};
