//! λ selection as a sequential decision problem: the unlearning MDP, a
//! squashed-Gaussian policy, PPO with GAE (episodic and online variants)
//! and a SAC alternative.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adaptive::{kl_prior_node, RunningNorm};
use crate::data::{ForgetSplit, LabeledDataset};
use crate::diffusion::{Denoiser, NoiseSchedule};
use crate::error::{config_err, contract, Error, Result};
use crate::nn::Mlp;
use crate::rng::{normal, substream, StreamRng};
use crate::siss::{apply_siss_update, draw_pairs, evaluate_fixed, SissConfig, SissWeights, StepRecord};
use crate::tensor::{softplus_f64, Adam, AdamConfig, Graph, NodeId, Tensor};

pub mod sac;

pub const LOG_STD_MIN: f64 = -6.907_755_278_982_137;
pub const LOG_STD_MAX: f64 = 0.0;
const INIT_LOG_STD: f64 = -0.5;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Admissible action range `[λ_min, λ_max]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionBounds {
    pub lambda_min: f64,
    pub lambda_max: f64,
}

impl ActionBounds {
    pub fn new(lambda_min: f64, lambda_max: f64) -> Result<Self> {
        if !(0.0 <= lambda_min && lambda_min < lambda_max && lambda_max <= 1.0) {
            return Err(config_err!("action bounds need 0 <= min < max <= 1, got [{lambda_min}, {lambda_max}]"));
        }
        Ok(Self { lambda_min, lambda_max })
    }

    pub fn width(&self) -> f64 {
        self.lambda_max - self.lambda_min
    }

    pub fn squash(&self, z: f64) -> f64 {
        self.lambda_min + self.width() * crate::tensor::sigmoid_f64(z)
    }

    /// Inverse of [`squash`](Self::squash) on the open interval.
    pub fn unsquash(&self, lambda: f64) -> f64 {
        let p = (lambda - self.lambda_min) / self.width();
        (p / (1.0 - p)).ln()
    }

    /// `log[(λ_max − λ_min) σ'(z)]`.
    pub fn log_jacobian(&self, z: f64) -> f64 {
        self.width().ln() - softplus_f64(-z) - softplus_f64(z)
    }

    pub fn contains(&self, lambda: f64) -> bool {
        (self.lambda_min..=self.lambda_max).contains(&lambda)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RlConfig {
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// Smoothness penalty weight α on `(λ_t − λ_{t−1})²`.
    pub smoothness: f64,
    /// Episode length T.
    pub horizon: usize,
    /// Episodes per PPO iteration.
    pub episodes: usize,
    /// PPO iterations of the episodic trainer.
    pub iterations: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_eps: f64,
    pub lr: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub entropy_coef: f64,
    /// Weight of the KL-to-N(0,1) regularizer on the latent policy.
    pub kl_coef: f64,
    /// Length of the online trajectory.
    pub total_steps: usize,
    /// Online PPO update period M.
    pub update_every: usize,
    /// Most recent transitions used per online update.
    pub window: usize,
    /// Drops the two gradient-norm entries from the state.
    pub drop_grad_norms: bool,
    pub sac_tau: f64,
    pub sac_alpha: f64,
    pub buffer_capacity: usize,
    pub sac_batch: usize,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            lambda_min: 0.1,
            lambda_max: 0.9,
            smoothness: 0.01,
            horizon: 200,
            episodes: 8,
            iterations: 25,
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_eps: 0.2,
            lr: 3e-4,
            epochs: 4,
            minibatch: 256,
            entropy_coef: 0.01,
            kl_coef: 0.0,
            total_steps: 2000,
            update_every: 200,
            window: 1600,
            drop_grad_norms: false,
            sac_tau: 0.005,
            sac_alpha: 0.1,
            buffer_capacity: 50_000,
            sac_batch: 256,
        }
    }
}

impl RlConfig {
    pub fn bounds(&self) -> Result<ActionBounds> {
        ActionBounds::new(self.lambda_min, self.lambda_max)
    }

    pub fn state_dim(&self) -> usize {
        if self.drop_grad_norms {
            4
        } else {
            6
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.bounds()?;
        if self.horizon == 0 || self.epochs == 0 || self.minibatch == 0 || self.update_every == 0 || self.window == 0 {
            return Err(config_err!("horizon, epochs, minibatch, update_every and window must be positive"));
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(config_err!("gamma and gae_lambda must lie in [0, 1]"));
        }
        if self.buffer_capacity < self.sac_batch || self.sac_batch == 0 {
            return Err(config_err!("buffer_capacity must be at least sac_batch > 0"));
        }
        Ok(())
    }
}

/// `R_t = −𝓛_siss − α (λ_t − λ_{t−1})²`.
pub fn reward(loss_siss: f64, lambda: f64, prev_lambda: f64, smoothness: f64) -> f64 {
    -loss_siss - smoothness * (lambda - prev_lambda).powi(2)
}

/// Data and SISS settings shared by every environment of a run.
#[derive(Debug, Clone, Copy)]
pub struct Task<'a> {
    pub schedule: &'a NoiseSchedule,
    pub data: &'a LabeledDataset,
    pub split: &'a ForgetSplit,
    pub siss: &'a SissConfig,
}

/// One unlearning trajectory: θ, its optimizer and the state features.
#[derive(Debug, Clone)]
pub struct UnlearnEnv<'a> {
    pub denoiser: Denoiser,
    opt: Adam,
    task: Task<'a>,
    weights: SissWeights,
    bounds: ActionBounds,
    smoothness: f64,
    horizon: usize,
    drop_grad_norms: bool,
    t: usize,
    prev_lambda: f64,
    raw: [f64; 4],
    pub norm: RunningNorm,
    update_norm: bool,
    /// Raw contexts in the order they were observed.
    pub contexts: Vec<[f64; 4]>,
    rng: StreamRng,
}

/// Result of one environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvStep {
    pub state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub record: StepRecord,
}

/// Resets θ to `base`, sets λ_0 = 0.5 and builds S_1 from one warm-up pass.
#[allow(clippy::too_many_arguments)]
pub fn env_reset<'a>(
    base: &Denoiser,
    task: Task<'a>,
    rl: &RlConfig,
    horizon: usize,
    norm: RunningNorm,
    update_norm: bool,
    warmup_rng: &mut impl Rng,
    pair_rng: StreamRng,
) -> Result<(UnlearnEnv<'a>, Vec<f64>)> {
    rl.validate()?;
    let weights = SissWeights::from_split(task.split, task.siss.s, task.siss.forget_weight_mode)?;
    let batch = draw_pairs(task.data, task.split, task.schedule, task.siss.pairs(), 0.5, warmup_rng)?;
    let eval = evaluate_fixed(base, task.schedule, &batch, &weights)?;
    let mut env = UnlearnEnv {
        denoiser: base.clone(),
        opt: Adam::new(AdamConfig::with_lr(task.siss.lr))?,
        task,
        weights,
        bounds: rl.bounds()?,
        smoothness: rl.smoothness,
        horizon,
        drop_grad_norms: rl.drop_grad_norms,
        t: 1,
        prev_lambda: 0.5,
        raw: [eval.parts.retain, eval.parts.forget, eval.retain_grad_norm(), eval.forget_grad_norm()],
        norm,
        update_norm,
        contexts: Vec::new(),
        rng: pair_rng,
    };
    let s = env.observe()?;
    Ok((env, s))
}

impl UnlearnEnv<'_> {
    pub fn t(&self) -> usize {
        self.t
    }

    pub fn is_done(&self) -> bool {
        self.t > self.horizon
    }

    fn observe(&mut self) -> Result<Vec<f64>> {
        let logged: Vec<f64> = self.raw.iter().map(|v| v.ln_1p()).collect();
        if logged.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                step: self.t,
                message: format!("state features are not finite: {:?}", self.raw),
            });
        }
        self.contexts.push(self.raw);
        if self.update_norm {
            self.norm.update(&logged);
        }
        let z = self.norm.normalize(&logged);
        let mut s = if self.drop_grad_norms { z[..2].to_vec() } else { z };
        s.push(self.prev_lambda);
        s.push(self.t.min(self.horizon) as f64 / self.horizon as f64);
        Ok(s)
    }

    /// One SISS update of θ at `lambda`.
    pub fn step(&mut self, lambda: f64) -> Result<EnvStep> {
        if !self.bounds.contains(lambda) {
            return Err(contract!(
                "action {lambda} outside [{}, {}]",
                self.bounds.lambda_min,
                self.bounds.lambda_max
            ));
        }
        if self.is_done() {
            return Err(contract!("step after the episode ended"));
        }
        let task = self.task;
        let batch = draw_pairs(task.data, task.split, task.schedule, task.siss.pairs(), lambda, &mut self.rng)?;
        let eval = evaluate_fixed(&self.denoiser, task.schedule, &batch, &self.weights)?;
        let record = apply_siss_update(
            &mut self.denoiser,
            &mut self.opt,
            &eval,
            &self.weights,
            task.siss.clip,
            self.t - 1,
            lambda,
        )?;
        let r = reward(record.total, lambda, self.prev_lambda, self.smoothness);
        self.raw = [record.retain, record.forget, record.retain_grad_norm, record.forget_grad_norm];
        self.prev_lambda = lambda;
        let done = self.t == self.horizon;
        self.t += 1;
        Ok(EnvStep {
            state: self.observe()?,
            reward: r,
            done,
            record,
        })
    }
}

/// Gaussian latent policy: MLP → (μ, log σ), log σ clamped to
/// `[ln 1e-3, 0]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet {
    pub mlp: Mlp,
}

impl PolicyNet {
    /// The output layer starts at zero weights, μ = 0 and log σ = −0.5.
    pub fn new(state_dim: usize, rng: &mut impl Rng) -> Self {
        let mut mlp = Mlp::new(&[state_dim, 64, 64, 2], rng);
        mlp.set_output_layer(&[0.0, INIT_LOG_STD]);
        Self { mlp }
    }

    pub fn heads(&self, g: &mut Graph, bound: &crate::tensor::Bound, states: NodeId) -> Result<(NodeId, NodeId)> {
        let out = self.mlp.forward(g, bound, states)?;
        let mu = g.slice_cols(out, 0, 1)?;
        let raw = g.slice_cols(out, 1, 2)?;
        Ok((mu, g.clamp(raw, LOG_STD_MIN, LOG_STD_MAX)))
    }

    /// `(μ, log σ)` for each state.
    pub fn eval_heads(&self, states: &[Vec<f64>]) -> Result<Vec<(f64, f64)>> {
        let out = self.mlp.eval(&Tensor::from_rows(states)?)?;
        Ok((0..out.rows())
            .map(|i| (out.row(i)[0], out.row(i)[1].clamp(LOG_STD_MIN, LOG_STD_MAX)))
            .collect())
    }
}

pub fn gaussian_log_prob(z: f64, mu: f64, log_std: f64) -> f64 {
    let u = (z - mu) * (-log_std).exp();
    -0.5 * u * u - log_std - HALF_LN_2PI
}

/// Log-density of the squashed action at latent `z`.
pub fn squashed_log_prob(z: f64, mu: f64, log_std: f64, bounds: &ActionBounds) -> f64 {
    gaussian_log_prob(z, mu, log_std) - bounds.log_jacobian(z)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Action {
    pub lambda: f64,
    pub z: f64,
    pub log_prob: f64,
}

/// Action at reparameterization noise `xi`.
pub fn act_with_noise(policy: &PolicyNet, state: &[f64], bounds: &ActionBounds, xi: f64) -> Result<Action> {
    let (mu, log_std) = policy.eval_heads(&[state.to_vec()])?[0];
    let z = mu + xi * log_std.exp();
    Ok(Action {
        lambda: bounds.squash(z),
        z,
        log_prob: squashed_log_prob(z, mu, log_std, bounds),
    })
}

pub fn policy_act(policy: &PolicyNet, state: &[f64], bounds: &ActionBounds, rng: &mut impl Rng) -> Result<Action> {
    act_with_noise(policy, state, bounds, normal(rng))
}

/// Deterministic action `squash(μ)`.
pub fn policy_mean_action(policy: &PolicyNet, state: &[f64], bounds: &ActionBounds) -> Result<Action> {
    act_with_noise(policy, state, bounds, 0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueNet {
    pub mlp: Mlp,
}

impl ValueNet {
    pub fn new(state_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            mlp: Mlp::new(&[state_dim, 64, 64, 1], rng),
        }
    }

    pub fn values(&self, states: &[Vec<f64>]) -> Result<Vec<f64>> {
        if states.is_empty() {
            return Ok(Vec::new());
        }
        Ok(self.mlp.eval(&Tensor::from_rows(states)?)?.into_data())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub lambda: f64,
    pub z: f64,
    pub log_prob: f64,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

/// GAE over one trajectory segment. `values[i] = V(S_i)`; `bootstrap` is
/// the value after the last step (0 at a terminal). Returns raw advantages
/// and `A + V`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    bootstrap: f64,
    gamma: f64,
    gae_lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if rewards.is_empty() || rewards.len() != values.len() {
        return Err(contract!("GAE needs matching nonempty rewards and values"));
    }
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut acc = 0.0;
    for i in (0..n).rev() {
        let next = if i + 1 < n { values[i + 1] } else { bootstrap };
        let delta = rewards[i] + gamma * next - values[i];
        acc = delta + gamma * gae_lambda * acc;
        adv[i] = acc;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, ret))
}

/// Zero mean, unit variance; left unscaled when the spread vanishes.
pub fn normalize_advantages(adv: &mut [f64]) {
    let n = adv.len() as f64;
    if adv.len() < 2 {
        return;
    }
    let mean = adv.iter().sum::<f64>() / n;
    let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
    for a in adv.iter_mut() {
        *a = (*a - mean) / std.max(1e-8);
    }
}

/// `min(r A, clip(r, 1 − ε, 1 + ε) A)`.
pub fn ppo_objective(ratio: f64, advantage: f64, eps: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - eps, 1.0 + eps) * advantage)
}

/// Policy and value networks with their optimizers.
#[derive(Debug, Clone)]
pub struct PpoLearner {
    pub policy: PolicyNet,
    pub value: ValueNet,
    pub opt_policy: Adam,
    pub opt_value: Adam,
}

impl PpoLearner {
    pub fn new(state_dim: usize, lr: f64, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            policy: PolicyNet::new(state_dim, rng),
            value: ValueNet::new(state_dim, rng),
            opt_policy: Adam::new(AdamConfig::with_lr(lr))?,
            opt_value: Adam::new(AdamConfig::with_lr(lr))?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct PpoStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    /// `max |r − 1|` over the batch before the first update.
    pub initial_ratio_deviation: f64,
    pub minibatches: usize,
}

/// Probability ratios of the current policy against the stored behavior
/// log-probs.
pub fn ppo_ratios(policy: &PolicyNet, batch: &[Transition], bounds: &ActionBounds) -> Result<Vec<f64>> {
    let states: Vec<Vec<f64>> = batch.iter().map(|t| t.state.clone()).collect();
    let heads = policy.eval_heads(&states)?;
    Ok(batch
        .iter()
        .zip(heads)
        .map(|(t, (mu, ls))| (squashed_log_prob(t.z, mu, ls, bounds) - t.log_prob).exp())
        .collect())
}

struct PolicyLoss {
    loss: NodeId,
    objective: f64,
    entropy: f64,
}

fn policy_loss(
    g: &mut Graph,
    policy: &PolicyNet,
    bound: &crate::tensor::Bound,
    batch: &[&Transition],
    adv: &[f64],
    rl: &RlConfig,
    bounds: &ActionBounds,
) -> Result<PolicyLoss> {
    let states: Vec<Vec<f64>> = batch.iter().map(|t| t.state.clone()).collect();
    let s = g.constant(Tensor::from_rows(&states)?);
    let (mu, log_std) = policy.heads(g, bound, s)?;
    let z = g.constant(Tensor::column(batch.iter().map(|t| t.z).collect()));
    let diff = g.sub(z, mu)?;
    let neg = g.scale(log_std, -1.0);
    let inv = g.exp(neg);
    let u = g.mul(diff, inv)?;
    let sq = g.square(u);
    let half = g.scale(sq, -0.5);
    let lp = g.sub(half, log_std)?;
    let offset: Vec<f64> = batch.iter().map(|t| -HALF_LN_2PI - bounds.log_jacobian(t.z) - t.log_prob).collect();
    let offset = g.constant(Tensor::column(offset));
    let log_ratio = g.add(lp, offset)?;
    let ratio = g.exp(log_ratio);

    let (lo, hi) = (1.0 - rl.clip_eps, 1.0 + rl.clip_eps);
    let rv = g.value(ratio).data().to_vec();
    let keep: Vec<f64> = rv
        .iter()
        .zip(adv)
        .map(|(&r, &a)| if r * a <= r.clamp(lo, hi) * a { 1.0 } else { 0.0 })
        .collect();
    let a_keep = g.constant(Tensor::column(adv.iter().zip(&keep).map(|(a, k)| a * k).collect()));
    let a_clip = g.constant(Tensor::column(adv.iter().zip(&keep).map(|(a, k)| a * (1.0 - k)).collect()));
    let s1 = g.mul(ratio, a_keep)?;
    let clipped = g.clamp(ratio, lo, hi);
    let s2 = g.mul(clipped, a_clip)?;
    let surr = g.add(s1, s2)?;
    let obj = g.mean(surr)?;
    let ent_raw = g.mean(log_std)?;
    let mut loss = g.scale(obj, -1.0);
    let ent = g.scale(ent_raw, -rl.entropy_coef);
    loss = g.add(loss, ent)?;
    if rl.kl_coef > 0.0 {
        let sigma = g.exp(log_std);
        let kl = kl_prior_node(g, mu, sigma)?;
        let kl = g.mean(kl)?;
        let kl = g.scale(kl, rl.kl_coef);
        loss = g.add(loss, kl)?;
    }
    let objective = g.scalar(obj);
    let entropy = g.scalar(ent_raw) + 0.5 + HALF_LN_2PI;
    Ok(PolicyLoss { loss, objective, entropy })
}

fn value_loss(g: &mut Graph, value: &ValueNet, bound: &crate::tensor::Bound, batch: &[&Transition], ret: &[f64]) -> Result<NodeId> {
    let states: Vec<Vec<f64>> = batch.iter().map(|t| t.state.clone()).collect();
    let s = g.constant(Tensor::from_rows(&states)?);
    let v = value.mlp.forward(g, bound, s)?;
    let target = g.constant(Tensor::column(ret.to_vec()));
    let d = g.sub(v, target)?;
    let sq = g.square(d);
    g.mean(sq)
}

/// Clipped-surrogate PPO over `epochs` passes of shuffled minibatches.
pub fn ppo_update(
    learner: &mut PpoLearner,
    batch: &[Transition],
    advantages: &[f64],
    returns: &[f64],
    rl: &RlConfig,
    rng: &mut impl Rng,
) -> Result<PpoStats> {
    if batch.is_empty() || batch.len() != advantages.len() || batch.len() != returns.len() {
        return Err(contract!("PPO batch, advantages and returns must be nonempty and aligned"));
    }
    let bounds = rl.bounds()?;
    let initial = ppo_ratios(&learner.policy, batch, &bounds)?;
    let mut stats = PpoStats {
        initial_ratio_deviation: initial.iter().map(|r| (r - 1.0).abs()).fold(0.0, f64::max),
        ..Default::default()
    };
    let mut order: Vec<usize> = (0..batch.len()).collect();
    for _ in 0..rl.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(rl.minibatch) {
            let mb: Vec<&Transition> = chunk.iter().map(|&i| &batch[i]).collect();
            let adv: Vec<f64> = chunk.iter().map(|&i| advantages[i]).collect();
            let ret: Vec<f64> = chunk.iter().map(|&i| returns[i]).collect();

            let mut g = Graph::new();
            let pb = g.bind(&learner.policy.mlp.params, true);
            let pl = policy_loss(&mut g, &learner.policy, &pb, &mb, &adv, rl, &bounds)?;
            let grads = g.backward(pl.loss)?.collect(pb.ids());
            learner.opt_policy.apply(&mut learner.policy.mlp.params, &grads)?;

            let mut g = Graph::new();
            let vb = g.bind(&learner.value.mlp.params, true);
            let vl = value_loss(&mut g, &learner.value, &vb, &mb, &ret)?;
            let grads = g.backward(vl)?.collect(vb.ids());
            learner.opt_value.apply(&mut learner.value.mlp.params, &grads)?;

            stats.policy_loss = -pl.objective;
            stats.value_loss = g.scalar(vl);
            stats.entropy = pl.entropy;
            stats.minibatches += 1;
        }
    }
    Ok(stats)
}

/// One row of a trajectory log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryRow {
    pub t: usize,
    pub state: Vec<f64>,
    pub lambda: f64,
    pub reward: f64,
}

impl TrajectoryRow {
    pub fn csv_header(state_dim: usize) -> String {
        let s: Vec<String> = (0..state_dim).map(|i| format!("s{i}")).collect();
        format!("t,{},lambda,reward", s.join(","))
    }

    pub fn csv_row(&self) -> String {
        let s: Vec<String> = self.state.iter().map(|v| v.to_string()).collect();
        format!("{},{},{},{}", self.t, s.join(","), self.lambda, self.reward)
    }
}

/// Summary of one PPO update.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub mean_return: f64,
    pub mean_lambda: f64,
    pub stats: PpoStats,
}

pub const ITERATION_CSV_HEADER: &str =
    "iteration,mean_return,mean_lambda,policy_loss,value_loss,entropy,initial_ratio_deviation";

impl IterationLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.iteration,
            self.mean_return,
            self.mean_lambda,
            self.stats.policy_loss,
            self.stats.value_loss,
            self.stats.entropy,
            self.stats.initial_ratio_deviation
        )
    }
}

/// Transitions and bookkeeping of one episode.
#[derive(Debug, Clone)]
pub struct Episode {
    pub transitions: Vec<Transition>,
    pub contexts: Vec<[f64; 4]>,
    pub total_return: f64,
}

/// Runs one stochastic episode from `base` under a frozen normalizer.
#[allow(clippy::too_many_arguments)]
pub fn run_episode(
    base: &Denoiser,
    task: Task<'_>,
    rl: &RlConfig,
    policy: &PolicyNet,
    norm: &RunningNorm,
    seed: u64,
    pair_stream: &str,
    action_stream: &str,
) -> Result<Episode> {
    let bounds = rl.bounds()?;
    let (mut env, mut s) = env_reset(
        base,
        task,
        rl,
        rl.horizon,
        norm.clone(),
        false,
        &mut substream(seed, "rl.warmup"),
        substream(seed, pair_stream),
    )?;
    let mut arng = substream(seed, action_stream);
    let mut transitions = Vec::with_capacity(rl.horizon);
    loop {
        let a = policy_act(policy, &s, &bounds, &mut arng)?;
        let out = env.step(a.lambda)?;
        transitions.push(Transition {
            state: s,
            lambda: a.lambda,
            z: a.z,
            log_prob: a.log_prob,
            reward: out.reward,
            next_state: out.state.clone(),
            done: out.done,
        });
        s = out.state;
        if out.done {
            break;
        }
    }
    Ok(Episode {
        total_return: transitions.iter().map(|t| t.reward).sum(),
        transitions,
        contexts: env.contexts,
    })
}

/// Deterministic run with a frozen policy.
pub fn rollout_frozen(
    base: &Denoiser,
    task: Task<'_>,
    rl: &RlConfig,
    policy: &PolicyNet,
    norm: &RunningNorm,
    seed: u64,
) -> Result<(Denoiser, Vec<TrajectoryRow>, Vec<StepRecord>)> {
    let bounds = rl.bounds()?;
    let (mut env, mut s) = env_reset(
        base,
        task,
        rl,
        rl.horizon,
        norm.clone(),
        false,
        &mut substream(seed, "rl.warmup"),
        substream(seed, "siss"),
    )?;
    let mut rows = Vec::with_capacity(rl.horizon);
    let mut records = Vec::with_capacity(rl.horizon);
    loop {
        let a = policy_mean_action(policy, &s, &bounds)?;
        let out = env.step(a.lambda)?;
        rows.push(TrajectoryRow {
            t: env.t() - 1,
            state: s,
            lambda: a.lambda,
            reward: out.reward,
        });
        records.push(out.record);
        s = out.state;
        if out.done {
            break;
        }
    }
    Ok((env.denoiser, rows, records))
}

fn gae_batch(value: &ValueNet, transitions: &[Transition], rl: &RlConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    let states: Vec<Vec<f64>> = transitions.iter().map(|t| t.state.clone()).collect();
    let values = value.values(&states)?;
    let last = transitions.last().expect("nonempty");
    let bootstrap = if last.done {
        0.0
    } else {
        value.values(std::slice::from_ref(&last.next_state))?[0]
    };
    let rewards: Vec<f64> = transitions.iter().map(|t| t.reward).collect();
    compute_gae(&rewards, &values, bootstrap, rl.gamma, rl.gae_lambda)
}

#[derive(Debug, Clone)]
pub struct Option1Result {
    pub learner: PpoLearner,
    pub norm: RunningNorm,
    pub iterations: Vec<IterationLog>,
    /// Per-iteration episode returns in episode order.
    pub returns: Vec<Vec<f64>>,
    pub denoiser: Denoiser,
    pub trajectory: Vec<TrajectoryRow>,
    pub records: Vec<StepRecord>,
    pub policy_fingerprint: u64,
}

/// Episodic PPO with θ reset to `base` every episode, followed by a final
/// deterministic run with the frozen policy. Episode `e` of every
/// iteration draws its SISS batches from the same stream.
pub fn run_option1(base: &Denoiser, task: Task<'_>, rl: &RlConfig, seed: u64) -> Result<Option1Result> {
    rl.validate()?;
    let mut learner = PpoLearner::new(rl.state_dim(), rl.lr, &mut substream(seed, "rl.init"))?;
    let mut norm = RunningNorm::new(4);
    let mut shuffle = substream(seed, "rl.ppo");
    let mut iterations = Vec::with_capacity(rl.iterations);
    let mut returns = Vec::with_capacity(rl.iterations);
    for it in 0..rl.iterations {
        let episodes: Vec<Episode> = (0..rl.episodes)
            .into_par_iter()
            .map(|e| {
                run_episode(
                    base,
                    task,
                    rl,
                    &learner.policy,
                    &norm,
                    seed,
                    &format!("rl.episode.{e}"),
                    &format!("rl.action.{it}.{e}"),
                )
            })
            .collect::<Result<_>>()?;
        let mut batch = Vec::new();
        let mut adv = Vec::new();
        let mut ret = Vec::new();
        for ep in &episodes {
            let (a, r) = gae_batch(&learner.value, &ep.transitions, rl)?;
            adv.extend(a);
            ret.extend(r);
            batch.extend(ep.transitions.iter().cloned());
        }
        normalize_advantages(&mut adv);
        let stats = ppo_update(&mut learner, &batch, &adv, &ret, rl, &mut shuffle)?;
        let ep_returns: Vec<f64> = episodes.iter().map(|e| e.total_return).collect();
        iterations.push(IterationLog {
            iteration: it,
            mean_return: ep_returns.iter().sum::<f64>() / ep_returns.len() as f64,
            mean_lambda: batch.iter().map(|t| t.lambda).sum::<f64>() / batch.len() as f64,
            stats,
        });
        returns.push(ep_returns);
        for ep in &episodes {
            for c in &ep.contexts {
                norm.update(&c.iter().map(|v| v.ln_1p()).collect::<Vec<_>>());
            }
        }
    }
    let policy_fingerprint = learner.policy.mlp.params.fingerprint();
    let (denoiser, trajectory, records) = rollout_frozen(base, task, rl, &learner.policy, &norm, seed)?;
    debug_assert_eq!(policy_fingerprint, learner.policy.mlp.params.fingerprint());
    Ok(Option1Result {
        learner,
        norm,
        iterations,
        returns,
        denoiser,
        trajectory,
        records,
        policy_fingerprint,
    })
}

#[derive(Debug, Clone)]
pub struct Option2Result {
    pub learner: PpoLearner,
    pub denoiser: Denoiser,
    pub trajectory: Vec<TrajectoryRow>,
    pub records: Vec<StepRecord>,
    pub updates: Vec<IterationLog>,
}

/// One long trajectory of `total_steps` SISS updates; PPO runs every
/// `update_every` steps on the most recent `window` transitions.
pub fn run_option2(base: &Denoiser, task: Task<'_>, rl: &RlConfig, seed: u64) -> Result<Option2Result> {
    rl.validate()?;
    let bounds = rl.bounds()?;
    let mut learner = PpoLearner::new(rl.state_dim(), rl.lr, &mut substream(seed, "rl.init"))?;
    let (mut env, mut s) = env_reset(
        base,
        task,
        rl,
        rl.total_steps,
        RunningNorm::new(4),
        true,
        &mut substream(seed, "rl.warmup"),
        substream(seed, "siss"),
    )?;
    let mut arng = substream(seed, "rl.action");
    let mut shuffle = substream(seed, "rl.ppo");
    let mut transitions: Vec<Transition> = Vec::with_capacity(rl.total_steps);
    let mut trajectory = Vec::with_capacity(rl.total_steps);
    let mut records = Vec::with_capacity(rl.total_steps);
    let mut updates = Vec::new();
    for step in 1..=rl.total_steps {
        let a = policy_act(&learner.policy, &s, &bounds, &mut arng)?;
        let out = env.step(a.lambda)?;
        trajectory.push(TrajectoryRow {
            t: step,
            state: s.clone(),
            lambda: a.lambda,
            reward: out.reward,
        });
        records.push(out.record.clone());
        transitions.push(Transition {
            state: s,
            lambda: a.lambda,
            z: a.z,
            log_prob: a.log_prob,
            reward: out.reward,
            next_state: out.state.clone(),
            done: out.done,
        });
        s = out.state;
        if step % rl.update_every == 0 {
            let start = transitions.len().saturating_sub(rl.window);
            let window = &transitions[start..];
            let (mut adv, ret) = gae_batch(&learner.value, window, rl)?;
            normalize_advantages(&mut adv);
            let stats = ppo_update(&mut learner, window, &adv, &ret, rl, &mut shuffle)?;
            let recent = &transitions[transitions.len() - rl.update_every..];
            updates.push(IterationLog {
                iteration: updates.len(),
                mean_return: recent.iter().map(|t| t.reward).sum::<f64>(),
                mean_lambda: recent.iter().map(|t| t.lambda).sum::<f64>() / recent.len() as f64,
                stats,
            });
        }
    }
    Ok(Option2Result {
        learner,
        denoiser: env.denoiser,
        trajectory,
        records,
        updates,
    })
}
