//! Run configuration: a TOML document with every key optional.
//!
//! ```toml
//! method = "adaptive"
//! seed = 3
//! out = "runs/adaptive-3"
//!
//! [dataset]
//! count = 1000
//!
//! [siss]
//! lambda = 0.5
//! s = 0.1
//! ```

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::adaptive::AdaptiveConfig;
use crate::data::{CONTAMINATED_CLASS, CONTAM_CLASSES};
use crate::diffusion::{BaseTrainConfig, NoiseSchedule};
use crate::error::{Error, Result};
use crate::rl::RlConfig;
use crate::sfd::SfdConfig;
use crate::siss::SissConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Base,
    Static,
    Adaptive,
    RlPpoOpt1,
    RlPpoOpt2,
    RlSac,
    Sfd,
    SfdMulticlass,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Base,
        Method::Static,
        Method::Adaptive,
        Method::RlPpoOpt1,
        Method::RlPpoOpt2,
        Method::RlSac,
        Method::Sfd,
        Method::SfdMulticlass,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Base => "base",
            Method::Static => "static",
            Method::Adaptive => "adaptive",
            Method::RlPpoOpt1 => "rl-ppo-opt1",
            Method::RlPpoOpt2 => "rl-ppo-opt2",
            Method::RlSac => "rl-sac",
            Method::Sfd => "sfd",
            Method::SfdMulticlass => "sfd-multiclass",
        }
    }

    pub fn is_sfd(self) -> bool {
        matches!(self, Method::Sfd | Method::SfdMulticlass)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Contaminated 2-D mixture: four clean clusters on a circle, class 1 also
/// holding a `ratio` share of points at its reflected mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Points per clean class.
    pub count: usize,
    pub ratio: f64,
    /// Seed offset of the held-out copy used by `eval`.
    pub heldout_offset: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            count: 1000,
            ratio: 1.0 / 11.0,
            heldout_offset: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            beta_start: 1e-3,
            beta_end: 0.2,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Generated samples per class.
    pub samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { samples: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub method: Method,
    pub seed: u64,
    pub out: PathBuf,
    /// Base model read by `unlearn`; defaults to `<out>/base.uftc`.
    pub base_checkpoint: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub schedule: ScheduleConfig,
    pub base: BaseTrainConfig,
    pub siss: SissConfig,
    pub adaptive: AdaptiveConfig,
    pub rl: RlConfig,
    pub sfd: SfdConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            method: Method::Static,
            seed: 0,
            out: PathBuf::from("runs/default"),
            base_checkpoint: None,
            dataset: DatasetConfig::default(),
            schedule: ScheduleConfig::default(),
            base: BaseTrainConfig::default(),
            siss: SissConfig::default(),
            adaptive: AdaptiveConfig::default(),
            rl: RlConfig::default(),
            sfd: SfdConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn base_checkpoint_path(&self) -> PathBuf {
        self.base_checkpoint.clone().unwrap_or_else(|| self.out.join("base.uftc"))
    }

    /// Class whose contaminant component is forgotten, and the class the
    /// forget condition is steered to (SFD only).
    pub fn forget_target(&self) -> (usize, Option<usize>) {
        if self.method.is_sfd() {
            (self.sfd.forget_class, Some(self.sfd.override_class))
        } else {
            (CONTAMINATED_CLASS, None)
        }
    }

    /// Range checks; the error names the offending key.
    pub fn validate(&self) -> Result<(), (String, String)> {
        let mut checks: Vec<(&str, bool, String)> = Vec::new();
        let mut check = |key: &'static str, ok: bool, msg: &str| checks.push((key, ok, msg.to_string()));
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let pos = |v: f64| v > 0.0 && v.is_finite();

        check("dataset.count", self.dataset.count >= 20, "must be at least 20");
        check("dataset.ratio", self.dataset.ratio > 0.0 && self.dataset.ratio < 1.0, "must lie in (0, 1)");

        let s = &self.schedule;
        check("schedule.steps", s.steps >= 1, "must be at least 1");
        check("schedule.beta_start", s.beta_start > 0.0 && s.beta_start < 1.0, "must lie in (0, 1)");
        check(
            "schedule.beta_end",
            s.beta_end >= s.beta_start && s.beta_end < 1.0,
            "must lie in [beta_start, 1)",
        );

        check("base.steps", self.base.steps >= 1, "must be at least 1");
        check("base.batch_size", self.base.batch_size >= 1, "must be at least 1");
        check("base.lr", pos(self.base.lr), "must be positive");

        let q = &self.siss;
        check("siss.lambda", unit(q.lambda), "must lie in [0, 1]");
        check("siss.s", q.s >= 0.0 && q.s.is_finite(), "must be non-negative");
        check("siss.clip", q.clip.is_none_or(pos), "must be positive");
        check("siss.batch_size", q.batch_size >= 2, "must be at least 2");
        check("siss.lr", pos(q.lr), "must be positive");
        check("siss.steps", q.steps >= 1, "must be at least 1");

        let a = &self.adaptive;
        check("adaptive.beta", a.beta >= 0.0 && a.beta.is_finite(), "must be non-negative");
        check("adaptive.lr_phi", pos(a.lr_phi), "must be positive");
        check("adaptive.warmup_lambda", unit(a.warmup_lambda), "must lie in [0, 1]");

        let r = &self.rl;
        check("rl.lambda_min", unit(r.lambda_min), "must lie in [0, 1]");
        check(
            "rl.lambda_max",
            unit(r.lambda_max) && r.lambda_max > r.lambda_min,
            "must lie in (lambda_min, 1]",
        );
        check("rl.smoothness", r.smoothness >= 0.0, "must be non-negative");
        check("rl.horizon", r.horizon >= 1, "must be at least 1");
        check("rl.episodes", r.episodes >= 1, "must be at least 1");
        check("rl.gamma", unit(r.gamma), "must lie in [0, 1]");
        check("rl.gae_lambda", unit(r.gae_lambda), "must lie in [0, 1]");
        check("rl.clip_eps", pos(r.clip_eps), "must be positive");
        check("rl.lr", pos(r.lr), "must be positive");
        check("rl.epochs", r.epochs >= 1, "must be at least 1");
        check("rl.minibatch", r.minibatch >= 1, "must be at least 1");
        check("rl.entropy_coef", r.entropy_coef >= 0.0, "must be non-negative");
        check("rl.kl_coef", r.kl_coef >= 0.0, "must be non-negative");
        check("rl.total_steps", r.total_steps >= 1, "must be at least 1");
        check("rl.update_every", r.update_every >= 1, "must be at least 1");
        check("rl.window", r.window >= 1, "must be at least 1");
        check("rl.sac_tau", r.sac_tau > 0.0 && r.sac_tau <= 1.0, "must lie in (0, 1]");
        check("rl.sac_alpha", r.sac_alpha >= 0.0, "must be non-negative");
        check("rl.buffer_capacity", r.buffer_capacity >= 1, "must be at least 1");
        check("rl.sac_batch", r.sac_batch >= 1, "must be at least 1");

        let f = &self.sfd;
        check("sfd.rounds", f.rounds >= 1, "must be at least 1");
        check("sfd.batch_size", f.batch_size >= CONTAM_CLASSES, "must cover every class");
        check("sfd.lr_generator", pos(f.lr_generator), "must be positive");
        check("sfd.lr_fake", pos(f.lr_fake), "must be positive");
        check("sfd.alpha", f.alpha == 1.0 || f.alpha == 1.2, "must be 1 or 1.2");
        check("sfd.lambda_sfd", f.lambda_sfd >= 0.0, "must be non-negative");
        check("sfd.forget_class", f.forget_class < CONTAM_CLASSES, "must name one of the 4 classes");
        check(
            "sfd.override_class",
            f.override_class < CONTAM_CLASSES && f.override_class != f.forget_class,
            "must name a retain class",
        );
        check("sfd.fake_steps", f.fake_steps >= 1, "must be at least 1");
        check("sfd.beta", f.beta >= 0.0, "must be non-negative");
        check("sfd.lr_phi", pos(f.lr_phi), "must be positive");

        check("eval.samples", self.eval.samples >= 100, "must be at least 100");

        match checks.into_iter().find(|(_, ok, _)| !ok) {
            Some((key, _, msg)) => Err((key.to_string(), msg)),
            None => Ok(()),
        }
    }
}

/// Parses and validates a run config. Errors carry the 1-based line of the
/// offending key (0 when it cannot be located).
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Parse {
        line: e.span().map_or(0, |s| line_of_offset(text, s.start)),
        message: e.message().trim().to_string(),
    })?;
    cfg.validate().map_err(|(key, msg)| Error::Parse {
        line: key_line(text, &key),
        message: format!("{key} {msg}"),
    })?;
    Ok(cfg)
}

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Line of `table.key`, written either under a `[table]` header or as a
/// dotted key.
fn key_line(text: &str, dotted: &str) -> usize {
    let mut current = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(h) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = h.trim().to_string();
            continue;
        }
        let Some((k, _)) = line.split_once('=') else { continue };
        let k: String = k.split('.').map(str::trim).collect::<Vec<_>>().join(".");
        let full = if current.is_empty() { k } else { format!("{current}.{k}") };
        if full == dotted {
            return i + 1;
        }
    }
    0
}
