//! Run configuration, command pipelines, persistence and reports.
//!
//! A run directory holds everything one `(config, seed)` produced: the
//! checkpoints, CSV logs, `metrics.json` and a `manifest.json` listing them.

mod config;
mod report;
mod run;

pub use config::{parse_config, DatasetConfig, EvalConfig, Method, RunConfig, ScheduleConfig};
pub use report::{
    discover_runs, line_svg, mean_std, read_column, read_samples, scatter_svg, summarize, write_report, MethodSummary,
    MetricStat, Report, RunSummary,
};
pub use run::{
    dataset, evaluate_run, exit_code, generate_samples, heldout_reference, load_bundle, load_denoiser,
    load_inference_net, manifest_config, run_command, train_base_model, CommandStamp, FileEntry, RunManifest, Verb,
    GENERATOR_FILE, LAMBDA_FILE, MANIFEST_FILE, METRICS_FILE, MODEL_FILE, SAMPLES_FILE,
};

#[cfg(test)]
mod tests;
