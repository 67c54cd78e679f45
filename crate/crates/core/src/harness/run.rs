//! Command pipelines and the per-directory run manifest.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::config::{Method, RunConfig};
use super::report::{discover_runs, write_report};
use crate::adaptive::{run_adaptive, AdaptiveRecord, InferenceNet};
use crate::data::{gen_contam2d, split_forget_retain, GaussMixtureSpec, LabeledDataset, Provenance};
use crate::diffusion::{ancestral_sample, train_base, Denoiser};
use crate::error::{config_err, contract, Error, Result};
use crate::metrics::{evaluate, MetricReport};
use crate::rl::sac::run_sac;
use crate::rl::{run_option1, run_option2, Task, TrajectoryRow, ITERATION_CSV_HEADER};
use crate::rng::substream;
use crate::sfd::{run_sfd, Generator, SfdState, ROUND_CSV_HEADER};
use crate::siss::{run_static, StepRecord, STEP_CSV_HEADER};
use crate::tensor::{read_checkpoint, write_checkpoint, ParamSet, Tensor};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const SAMPLES_FILE: &str = "samples.csv";
pub const LAMBDA_FILE: &str = "lambda.csv";
pub const MODEL_FILE: &str = "model.uftc";
pub const GENERATOR_FILE: &str = "generator.uftc";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verb {
    TrainBase,
    Unlearn,
    Eval,
    Report,
}

impl Verb {
    pub fn name(self) -> &'static str {
        match self {
            Verb::TrainBase => "train-base",
            Verb::Unlearn => "unlearn",
            Verb::Eval => "eval",
            Verb::Report => "report",
        }
    }
}

/// Process exit status for a command result.
pub fn exit_code(result: &Result<()>) -> i32 {
    match result {
        Ok(()) => 0,
        Err(Error::MissingPrerequisite(_)) => 2,
        Err(Error::Divergence { .. }) => 3,
        Err(_) => 1,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandStamp {
    pub verb: Verb,
    /// Seconds since the Unix epoch.
    pub started: f64,
    pub finished: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FileEntry {
    /// Path relative to the run directory.
    pub path: String,
    pub bytes: u64,
}

/// Self-description of a run directory. Timestamps are the only
/// nondeterministic content.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub code_version: String,
    pub method: Method,
    pub seed: u64,
    pub config: RunConfig,
    pub commands: Vec<CommandStamp>,
    pub files: Vec<FileEntry>,
}

impl RunManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Err(Error::MissingPrerequisite(path));
        }
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Config stored in `<dir>/manifest.json`, if any.
pub fn manifest_config(dir: &Path) -> Result<Option<RunConfig>> {
    if !dir.join(MANIFEST_FILE).exists() {
        return Ok(None);
    }
    Ok(Some(RunManifest::load(dir)?.config))
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

/// Runs `verb` against `config.out` and records it in the manifest.
pub fn run_command(verb: Verb, config: &RunConfig) -> Result<()> {
    let started = now();
    fs::create_dir_all(&config.out)?;
    let files = match verb {
        Verb::TrainBase => cmd_train_base(config)?,
        Verb::Unlearn => cmd_unlearn(config)?,
        Verb::Eval => cmd_eval(config)?,
        Verb::Report => {
            let runs = discover_runs(&config.out)?;
            write_report(&runs, &config.out)?
        }
    };
    finalize(config, verb, started, &files)
}

fn finalize(config: &RunConfig, verb: Verb, started: f64, files: &[String]) -> Result<()> {
    let dir = &config.out;
    let mut manifest = match RunManifest::load(dir) {
        Ok(m) => m,
        Err(Error::MissingPrerequisite(_)) => RunManifest {
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            method: config.method,
            seed: config.seed,
            config: config.clone(),
            commands: Vec::new(),
            files: Vec::new(),
        },
        Err(e) => return Err(e),
    };
    manifest.method = config.method;
    manifest.seed = config.seed;
    manifest.config = config.clone();
    manifest.commands.push(CommandStamp {
        verb,
        started,
        finished: now(),
    });
    let mut names: Vec<String> = manifest.files.iter().map(|f| f.path.clone()).collect();
    names.extend(files.iter().cloned());
    names.sort();
    names.dedup();
    manifest.files = names
        .into_iter()
        .map(|path| {
            let meta = fs::metadata(dir.join(&path))
                .map_err(|_| contract!("manifest lists {path}, which does not exist"))?;
            Ok(FileEntry { path, bytes: meta.len() })
        })
        .collect::<Result<_>>()?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

/// Training set and its Gaussian-mixture description for the config's seed.
pub fn dataset(config: &RunConfig) -> Result<(LabeledDataset, GaussMixtureSpec)> {
    gen_contam2d(config.seed, config.dataset.count, config.dataset.ratio)
}

/// Clean held-out points per class, the reference sets of `eval`.
pub fn heldout_reference(config: &RunConfig) -> Result<Vec<Tensor>> {
    let (held, _) = gen_contam2d(
        config.seed.wrapping_add(config.dataset.heldout_offset),
        config.dataset.count,
        config.dataset.ratio,
    )?;
    Ok((0..held.classes)
        .map(|c| {
            let idx: Vec<usize> = (0..held.len())
                .filter(|&i| held.labels[i] == c && held.provenance[i] == Provenance::Clean)
                .collect();
            held.points.gather_rows(&idx)
        })
        .collect())
}

fn new_denoiser(data: &LabeledDataset, seed: u64) -> Denoiser {
    Denoiser::new(data.dim(), data.classes, &mut substream(seed, "init"))
}

/// Freshly trained base model, without touching the filesystem.
pub fn train_base_model(config: &RunConfig) -> Result<(Denoiser, Vec<f64>)> {
    let (data, _) = dataset(config)?;
    let schedule = config.schedule.build()?;
    let mut den = new_denoiser(&data, config.seed);
    let losses = train_base(&mut den, &data, &schedule, &config.base, &mut substream(config.seed, "diffusion"))?;
    Ok((den, losses))
}

pub fn load_bundle(path: &Path) -> Result<Vec<(String, Tensor)>> {
    if !path.exists() {
        return Err(Error::MissingPrerequisite(path.to_path_buf()));
    }
    read_checkpoint(fs::File::open(path)?)
}

fn save_bundle(path: &Path, parts: &[(&str, &ParamSet)]) -> Result<()> {
    let entries: Vec<(String, Tensor)> = parts.iter().flat_map(|(p, ps)| ps.prefixed(p)).collect();
    write_checkpoint(fs::File::create(path)?, &entries)
}

pub fn load_denoiser(config: &RunConfig, data: &LabeledDataset, path: &Path) -> Result<Denoiser> {
    let entries = load_bundle(path)?;
    let mut den = new_denoiser(data, config.seed);
    den.params_mut().load_prefixed("den", &entries)?;
    Ok(den)
}

fn write_lines(path: &Path, header: &str, rows: impl IntoIterator<Item = String>) -> Result<()> {
    let mut s = String::from(header);
    s.push('\n');
    for r in rows {
        s.push_str(&r);
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

fn cmd_train_base(config: &RunConfig) -> Result<Vec<String>> {
    let (den, losses) = train_base_model(config)?;
    let ckpt = config.base_checkpoint_path();
    if let Some(parent) = ckpt.parent() {
        fs::create_dir_all(parent)?;
    }
    save_bundle(&ckpt, &[("den", den.params())])?;
    write_lines(
        &config.out.join("base_loss.csv"),
        "step,loss",
        losses.iter().enumerate().map(|(i, l)| format!("{i},{l}")),
    )?;
    let mut files = vec!["base_loss.csv".to_string()];
    if let Ok(rel) = ckpt.strip_prefix(&config.out) {
        files.push(rel.to_string_lossy().into_owned());
    }
    Ok(files)
}

fn step_rows(records: &[StepRecord]) -> impl Iterator<Item = String> + '_ {
    records.iter().map(StepRecord::csv_row)
}

fn trajectory_files(dir: &Path, state_dim: usize, rows: &[TrajectoryRow], records: &[StepRecord]) -> Result<Vec<String>> {
    write_lines(&dir.join("trajectory.csv"), &TrajectoryRow::csv_header(state_dim), rows.iter().map(TrajectoryRow::csv_row))?;
    write_lines(&dir.join("steps.csv"), STEP_CSV_HEADER, step_rows(records))?;
    write_lines(&dir.join(LAMBDA_FILE), "t,lambda", rows.iter().map(|r| format!("{},{}", r.t, r.lambda)))?;
    Ok(vec!["trajectory.csv".into(), "steps.csv".into(), LAMBDA_FILE.into()])
}

fn cmd_unlearn(config: &RunConfig) -> Result<Vec<String>> {
    if config.method == Method::Base {
        return Err(config_err!("method base has nothing to unlearn; use train-base"));
    }
    let (data, spec) = dataset(config)?;
    let schedule = config.schedule.build()?;
    let mut den = load_denoiser(config, &data, &config.base_checkpoint_path())?;
    let dir = &config.out;
    let seed = config.seed;
    let model = dir.join(MODEL_FILE);
    let mut files = Vec::new();
    match config.method {
        Method::Base => unreachable!(),
        Method::Static => {
            let split = split_forget_retain(&data)?;
            let log = run_static(&mut den, &schedule, &data, &split, &config.siss, &mut substream(seed, "siss"))?;
            write_lines(&dir.join("steps.csv"), STEP_CSV_HEADER, step_rows(&log))?;
            save_bundle(&model, &[("den", den.params())])?;
            files.push("steps.csv".into());
        }
        Method::Adaptive => {
            let split = split_forget_retain(&data)?;
            let (log, net) = run_adaptive(&mut den, &schedule, &data, &split, &config.siss, &config.adaptive, seed)?;
            write_lines(&dir.join("steps.csv"), &AdaptiveRecord::csv_header(), log.iter().map(AdaptiveRecord::csv_row))?;
            write_lines(
                &dir.join(LAMBDA_FILE),
                "t,lambda",
                log.iter().map(|r| format!("{},{}", r.siss.step, r.siss.lambda)),
            )?;
            save_bundle(&model, &[("den", den.params()), ("inference", &net.mlp.params)])?;
            files.extend(["steps.csv".into(), LAMBDA_FILE.into()]);
        }
        Method::RlPpoOpt1 | Method::RlPpoOpt2 | Method::RlSac => {
            let split = split_forget_retain(&data)?;
            let task = Task {
                schedule: &schedule,
                data: &data,
                split: &split,
                siss: &config.siss,
            };
            let dim = config.rl.state_dim();
            let policy = dir.join("policy.uftc");
            match config.method {
                Method::RlPpoOpt1 => {
                    let out = run_option1(&den, task, &config.rl, seed)?;
                    write_lines(&dir.join("iterations.csv"), ITERATION_CSV_HEADER, out.iterations.iter().map(|i| i.csv_row()))?;
                    files.push("iterations.csv".into());
                    files.extend(trajectory_files(dir, dim, &out.trajectory, &out.records)?);
                    save_bundle(&model, &[("den", out.denoiser.params())])?;
                    save_bundle(&policy, &[("policy", &out.learner.policy.mlp.params), ("value", &out.learner.value.mlp.params)])?;
                }
                Method::RlPpoOpt2 => {
                    let out = run_option2(&den, task, &config.rl, seed)?;
                    write_lines(&dir.join("updates.csv"), ITERATION_CSV_HEADER, out.updates.iter().map(|i| i.csv_row()))?;
                    files.push("updates.csv".into());
                    files.extend(trajectory_files(dir, dim, &out.trajectory, &out.records)?);
                    save_bundle(&model, &[("den", out.denoiser.params())])?;
                    save_bundle(&policy, &[("policy", &out.learner.policy.mlp.params), ("value", &out.learner.value.mlp.params)])?;
                }
                _ => {
                    let out = run_sac(&den, task, &config.rl, seed)?;
                    write_lines(
                        &dir.join("sac.csv"),
                        "update,q1_loss,q2_loss,actor_loss",
                        out.stats.iter().enumerate().map(|(i, s)| format!("{i},{},{},{}", s.q1_loss, s.q2_loss, s.actor_loss)),
                    )?;
                    files.push("sac.csv".into());
                    files.extend(trajectory_files(dir, dim, &out.trajectory, &out.records)?);
                    save_bundle(&model, &[("den", out.denoiser.params())])?;
                    let l = &out.learner;
                    save_bundle(&policy, &[("policy", &l.policy.mlp.params), ("q1", &l.q1.mlp.params), ("q2", &l.q2.mlp.params)])?;
                }
            }
            files.push("policy.uftc".into());
        }
        Method::Sfd | Method::SfdMulticlass => {
            let mixture = (config.method == Method::SfdMulticlass).then_some(&spec);
            let out = run_sfd(&den, &schedule, mixture, &config.sfd, seed)?;
            write_lines(&dir.join("rounds.csv"), ROUND_CSV_HEADER, out.records.iter().map(|r| r.csv_row()))?;
            files.push("rounds.csv".into());
            if mixture.is_some() {
                write_lines(
                    &dir.join(LAMBDA_FILE),
                    "t,lambda",
                    out.records.iter().map(|r| format!("{},{}", r.round, r.lambda.unwrap_or(f64::NAN))),
                )?;
                files.push(LAMBDA_FILE.into());
            }
            let SfdState { generator, fake, .. } = &out.state;
            let mut parts = vec![("gen", generator.params()), ("fake", fake.params())];
            if let Some(net) = &out.inference {
                parts.push(("inference", &net.mlp.params));
            }
            save_bundle(&dir.join(GENERATOR_FILE), &parts)?;
            files.push(GENERATOR_FILE.into());
            return Ok(files);
        }
    }
    files.push(MODEL_FILE.into());
    Ok(files)
}

/// Samples per class from the model the config's method produced.
pub fn generate_samples(config: &RunConfig) -> Result<Vec<Tensor>> {
    let (data, _) = dataset(config)?;
    let n = config.eval.samples;
    let mut rng = substream(config.seed, "eval");
    if config.method.is_sfd() {
        let entries = load_bundle(&config.out.join(GENERATOR_FILE))?;
        let mut generator = Generator::new(data.dim(), data.classes, &mut substream(config.seed, "sfd.init"));
        generator.params_mut().load_prefixed("gen", &entries)?;
        return (0..data.classes).map(|c| generator.sample(n, c, &mut rng)).collect();
    }
    let path = match config.method {
        Method::Base => config.base_checkpoint_path(),
        _ => config.out.join(MODEL_FILE),
    };
    let den = load_denoiser(config, &data, &path)?;
    let schedule = config.schedule.build()?;
    (0..data.classes).map(|c| ancestral_sample(&den, &schedule, n, Some(c), &mut rng)).collect()
}

/// Metric report of the run's model against clean held-out data.
pub fn evaluate_run(config: &RunConfig) -> Result<(MetricReport, Vec<Tensor>)> {
    let (_, spec) = dataset(config)?;
    let generated = generate_samples(config)?;
    let reference = heldout_reference(config)?;
    let (forget, over) = config.forget_target();
    let report = evaluate(&generated, &reference, &spec, forget, over, config.seed)?;
    Ok((report, generated))
}

fn cmd_eval(config: &RunConfig) -> Result<Vec<String>> {
    let (report, generated) = evaluate_run(config)?;
    let dir = &config.out;
    fs::write(dir.join(METRICS_FILE), serde_json::to_string_pretty(&report)? + "\n")?;
    write_lines(
        &dir.join("metrics.csv"),
        "metric,value",
        report.flatten().into_iter().map(|(k, v)| format!("{k},{v}")),
    )?;
    let mut samples = String::from("class");
    for j in 0..generated.first().map_or(0, Tensor::cols) {
        write!(samples, ",x{j}").expect("string write");
    }
    samples.push('\n');
    for (c, set) in generated.iter().enumerate() {
        for i in 0..set.rows() {
            write!(samples, "{c}").expect("string write");
            for v in set.row(i) {
                write!(samples, ",{v}").expect("string write");
            }
            samples.push('\n');
        }
    }
    fs::write(dir.join(SAMPLES_FILE), samples)?;
    Ok(vec![METRICS_FILE.into(), "metrics.csv".into(), SAMPLES_FILE.into()])
}

/// Inference net stored in an adaptive or multi-class SFD run.
pub fn load_inference_net(path: &Path) -> Result<InferenceNet> {
    let entries = load_bundle(path)?;
    let mut net = InferenceNet::new(&mut substream(0, "adaptive.init"));
    net.mlp.params.load_prefixed("inference", &entries)?;
    Ok(net)
}

