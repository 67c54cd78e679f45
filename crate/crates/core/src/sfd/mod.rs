//! Score forgetting distillation at desk scale: a one-step conditional
//! generator distilled from a diffusion teacher, with the forget class
//! steered toward an override class.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adaptive::{build_context, kl_prior_node, InferenceNet, RunningNorm};
use crate::data::GaussMixtureSpec;
use crate::diffusion::{Denoiser, NoiseSchedule};
use crate::error::{config_err, contract, Error, Result};
use crate::nn::{CondNet, CondNetConfig};
use crate::rng::{normal, normal_tensor, substream};
use crate::tensor::{global_norm, Adam, AdamConfig, Bound, Graph, NodeId, ParamSet, Tensor};

/// One-step map `g(n, c)` from Gaussian noise to a data point.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    net: CondNet,
}

impl Generator {
    pub fn new(data_dim: usize, classes: usize, rng: &mut impl Rng) -> Self {
        Self {
            net: CondNet::new(CondNetConfig::standard(data_dim, data_dim, false, classes), rng),
        }
    }

    pub fn params(&self) -> &ParamSet {
        &self.net.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.net.params
    }

    pub fn data_dim(&self) -> usize {
        self.net.config().output_dim
    }

    pub fn forward(&self, g: &mut Graph, bound: &Bound, noise: NodeId, labels: &[usize]) -> Result<NodeId> {
        self.net.forward(g, bound, noise, None, Some(labels))
    }

    pub fn generate(&self, noise: &Tensor, labels: &[usize]) -> Result<Tensor> {
        self.net.eval(noise, None, Some(labels))
    }

    /// `n` samples of class `c`.
    pub fn sample(&self, n: usize, class: usize, rng: &mut impl Rng) -> Result<Tensor> {
        let noise = normal_tensor(rng, n, self.data_dim());
        self.generate(&noise, &vec![class; n])
    }
}

/// Mean predictor `x_ψ(z_t, c, t)` trained on generator output.
#[derive(Debug, Clone, PartialEq)]
pub struct FakeScoreNet {
    net: CondNet,
}

impl FakeScoreNet {
    pub fn new(data_dim: usize, classes: usize, rng: &mut impl Rng) -> Self {
        Self {
            net: CondNet::new(CondNetConfig::standard(data_dim, data_dim, true, classes), rng),
        }
    }

    pub fn params(&self) -> &ParamSet {
        &self.net.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.net.params
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &Bound,
        z: NodeId,
        ts: &[usize],
        schedule: &NoiseSchedule,
        labels: &[usize],
    ) -> Result<NodeId> {
        let tau: Vec<f64> = ts.iter().map(|&t| schedule.tau(t)).collect();
        self.net.forward(g, bound, z, Some(&tau), Some(labels))
    }

    pub fn predict(&self, z: &Tensor, ts: &[usize], schedule: &NoiseSchedule, labels: &[usize]) -> Result<Tensor> {
        let tau: Vec<f64> = ts.iter().map(|&t| schedule.tau(t)).collect();
        self.net.eval(z, Some(&tau), Some(labels))
    }
}

/// Tweedie mean of the teacher, `x_φ = (z − σ_t ε_φ(z, c, t)) / a_t`.
pub fn teacher_mean(
    teacher: &Denoiser,
    z: &Tensor,
    ts: &[usize],
    schedule: &NoiseSchedule,
    labels: &[usize],
) -> Result<Tensor> {
    let eps = teacher.predict_eval(z, ts, schedule, Some(labels))?;
    let d = z.cols();
    let mut out = z.clone();
    for (i, &t) in ts.iter().enumerate() {
        let (a, s) = (schedule.gamma(t), schedule.sigma(t));
        for j in 0..d {
            out.data_mut()[i * d + j] = (z.row(i)[j] - s * eps.row(i)[j]) / a;
        }
    }
    Ok(out)
}

/// Noised generator output `z_t = a_t x + σ_t ε`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisedSample {
    pub z: Tensor,
    pub ts: Vec<usize>,
    pub eps: Tensor,
}

pub fn noise_samples(x: &Tensor, schedule: &NoiseSchedule, rng: &mut impl Rng) -> NoisedSample {
    let ts: Vec<usize> = (0..x.rows()).map(|_| schedule.sample_t(rng)).collect();
    let eps = normal_tensor(rng, x.rows(), x.cols());
    let z = crate::diffusion::noised(schedule, x, &ts, &eps).expect("shapes match");
    NoisedSample { z, ts, eps }
}

/// Mean-prediction denoising loss `mean_i ‖x_ψ(z_i) − x_i‖²`.
pub fn fake_score_loss(
    g: &mut Graph,
    fake: &FakeScoreNet,
    bound: &Bound,
    x: &Tensor,
    noised: &NoisedSample,
    schedule: &NoiseSchedule,
    labels: &[usize],
) -> Result<NodeId> {
    let z = g.constant(noised.z.clone());
    let pred = fake.forward(g, bound, z, &noised.ts, schedule, labels)?;
    let target = g.constant(x.clone());
    let d = g.sub(pred, target)?;
    let sq = g.square(d);
    let s = g.sum(sq);
    Ok(g.scale(s, 1.0 / x.rows() as f64))
}

/// One optimizer step of the fake-score net on fresh generator samples.
pub fn fake_score_update(
    fake: &mut FakeScoreNet,
    opt: &mut Adam,
    generator: &Generator,
    schedule: &NoiseSchedule,
    labels: &[usize],
    rng: &mut impl Rng,
) -> Result<f64> {
    let noise = normal_tensor(rng, labels.len(), generator.data_dim());
    let x = generator.generate(&noise, labels)?;
    let noised = noise_samples(&x, schedule, rng);
    let mut g = Graph::new();
    let bound = g.bind(fake.params(), true);
    let loss = fake_score_loss(&mut g, fake, &bound, &x, &noised, schedule, labels)?;
    let grads = g.backward(loss)?.collect(bound.ids());
    opt.apply(fake.params_mut(), &grads)?;
    Ok(g.scalar(loss))
}

/// `ω_t = σ_t⁴ a_t² C ‖x_φ − x‖₁` per row, computed from values only.
pub fn omega(x_phi: &Tensor, x: &Tensor, ts: &[usize], schedule: &NoiseSchedule, c: f64) -> Vec<f64> {
    ts.iter()
        .enumerate()
        .map(|(i, &t)| {
            let (a, s) = (schedule.gamma(t), schedule.sigma(t));
            let l1: f64 = x_phi.row(i).iter().zip(x.row(i)).map(|(p, q)| (p - q).abs()).sum();
            s.powi(4) * a * a * c * l1
        })
        .collect()
}

/// Scalar form of the per-sample loss for weight `k = ω a² σ⁴`.
pub fn sfd_hat_value(x_phi: &[f64], x_psi: &[f64], x: &[f64], k: f64, alpha: f64) -> f64 {
    let mut sq = 0.0;
    let mut inner = 0.0;
    for j in 0..x.len() {
        let d = x_phi[j] - x_psi[j];
        sq += d * d;
        inner += d * (x_psi[j] - x[j]);
    }
    k * ((1.0 - alpha) * sq + inner)
}

/// Per-row losses `[B, 1]`:
/// `k_i [(1 − α)‖x_φ − x_ψ‖² + (x_φ − x_ψ)ᵀ(x_ψ − x)]` with `k_i = ω_i a_i² σ_i⁴`.
/// Only `x` carries gradient.
#[allow(clippy::too_many_arguments)]
pub fn sfd_hat_rows(
    g: &mut Graph,
    x: NodeId,
    x_phi: &Tensor,
    x_psi: &Tensor,
    ts: &[usize],
    schedule: &NoiseSchedule,
    alpha: f64,
    omega: &[f64],
) -> Result<NodeId> {
    let (rows, d) = x_phi.dims2()?;
    if omega.len() != rows || ts.len() != rows || !x_psi.same_shape(x_phi) {
        return Err(contract!("sfd loss inputs disagree on the batch size"));
    }
    let mut coef = Vec::with_capacity(rows * d);
    let mut offset = Vec::with_capacity(rows);
    for i in 0..rows {
        let t = ts[i];
        let k = omega[i] * schedule.gamma(t).powi(2) * schedule.sigma(t).powi(4);
        let mut sq = 0.0;
        let mut lin = 0.0;
        for j in 0..d {
            let diff = x_phi.row(i)[j] - x_psi.row(i)[j];
            sq += diff * diff;
            lin += diff * x_psi.row(i)[j];
            coef.push(-k * diff);
        }
        offset.push(k * ((1.0 - alpha) * sq + lin));
    }
    let c = g.constant(Tensor::matrix(rows, d, coef)?);
    let cx = g.mul(c, x)?;
    let per = g.sum_cols(cx)?;
    let off = g.constant(Tensor::column(offset));
    g.add(per, off)
}

/// Sum over rows of [`sfd_hat_rows`].
#[allow(clippy::too_many_arguments)]
pub fn sfd_hat_loss(
    g: &mut Graph,
    x: NodeId,
    x_phi: &Tensor,
    x_psi: &Tensor,
    ts: &[usize],
    schedule: &NoiseSchedule,
    alpha: f64,
    omega: &[f64],
) -> Result<NodeId> {
    let rows = sfd_hat_rows(g, x, x_phi, x_psi, ts, schedule, alpha, omega)?;
    Ok(g.sum(rows))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SfdConfig {
    pub rounds: usize,
    /// Generator samples per round, spread evenly over the classes.
    pub batch_size: usize,
    pub lr_generator: f64,
    pub lr_fake: f64,
    /// Loss exponent α ∈ {1, 1.2}.
    pub alpha: f64,
    /// Balance λ_sfd of the forgetting term.
    pub lambda_sfd: f64,
    pub forget_class: usize,
    pub override_class: usize,
    /// Fake-score updates per generator update.
    pub fake_steps: usize,
    /// Fake-score updates before the first round.
    pub fake_warmup: usize,
    /// KL weight of the multi-class inference net.
    pub beta: f64,
    pub lr_phi: f64,
    /// Anneal the generator learning rate to zero along a half cosine.
    pub cosine_decay: bool,
}

impl Default for SfdConfig {
    fn default() -> Self {
        Self {
            rounds: 2000,
            batch_size: 256,
            lr_generator: 1e-3,
            lr_fake: 1e-3,
            alpha: 1.2,
            lambda_sfd: 1.0,
            forget_class: 1,
            override_class: 0,
            fake_steps: 1,
            fake_warmup: 200,
            beta: 0.01,
            lr_phi: 1e-3,
            cosine_decay: true,
        }
    }
}

impl SfdConfig {
    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.forget_class >= classes || self.override_class >= classes {
            return Err(config_err!("forget and override classes must be below {classes}"));
        }
        if self.override_class == self.forget_class {
            return Err(config_err!("forget class {} is also a retain class", self.forget_class));
        }
        if self.alpha != 1.0 && self.alpha != 1.2 {
            return Err(config_err!("alpha must be 1 or 1.2, got {}", self.alpha));
        }
        if self.batch_size < classes {
            return Err(config_err!("batch_size must cover every class"));
        }
        if !(self.lambda_sfd >= 0.0) {
            return Err(config_err!("lambda_sfd must be non-negative"));
        }
        Ok(())
    }

    pub fn retain_classes(&self, classes: usize) -> Vec<usize> {
        (0..classes).filter(|&c| c != self.forget_class).collect()
    }
}

/// Per-round log row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RoundRecord {
    pub round: usize,
    pub fake_loss: f64,
    pub distill_loss: f64,
    pub forget_loss: f64,
    pub omega_mean: f64,
    pub omega_max: f64,
    /// Sampled λ of the multi-class objective.
    pub lambda: Option<f64>,
}

pub const ROUND_CSV_HEADER: &str = "round,fake_loss,distill_loss,forget_loss,omega_mean,omega_max,lambda";

impl RoundRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.round,
            self.fake_loss,
            self.distill_loss,
            self.forget_loss,
            self.omega_mean,
            self.omega_max,
            self.lambda.map(|l| l.to_string()).unwrap_or_default()
        )
    }
}

/// Networks and optimizers of an SFD run.
#[derive(Debug, Clone)]
pub struct SfdState {
    pub generator: Generator,
    pub fake: FakeScoreNet,
    pub opt_generator: Adam,
    pub opt_fake: Adam,
}

impl SfdState {
    pub fn new(data_dim: usize, classes: usize, cfg: &SfdConfig, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            generator: Generator::new(data_dim, classes, rng),
            fake: FakeScoreNet::new(data_dim, classes, rng),
            opt_generator: Adam::new(AdamConfig::with_lr(cfg.lr_generator))?,
            opt_fake: Adam::new(AdamConfig::with_lr(cfg.lr_fake))?,
        })
    }
}

fn round_robin(n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|i| i % classes).collect()
}

/// Generator rows of one term and the stop-gradient quantities of its loss.
struct TermBatch {
    x: NodeId,
    x_val: Tensor,
    noised: NoisedSample,
    labels: Vec<usize>,
}

fn generator_term(
    g: &mut Graph,
    generator: &Generator,
    bound: &Bound,
    labels: Vec<usize>,
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<TermBatch> {
    let noise = g.constant(normal_tensor(rng, labels.len(), generator.data_dim()));
    let x = generator.forward(g, bound, noise, &labels)?;
    let x_val = g.value(x).clone();
    let noised = noise_samples(&x_val, schedule, rng);
    Ok(TermBatch {
        x,
        x_val,
        noised,
        labels,
    })
}

/// Row losses of one `(c1, c2)` pairing and its ω values.
fn term_rows(
    g: &mut Graph,
    term: &TermBatch,
    teacher: &Denoiser,
    fake: &FakeScoreNet,
    schedule: &NoiseSchedule,
    teacher_labels: &[usize],
    alpha: f64,
) -> Result<(NodeId, Vec<f64>)> {
    let n = &term.noised;
    let x_phi = teacher_mean(teacher, &n.z, &n.ts, schedule, teacher_labels)?;
    let x_psi = fake.predict(&n.z, &n.ts, schedule, &term.labels)?;
    let c = 1.0 / (term.x_val.len() as f64);
    let w = omega(&x_phi, &term.x_val, &n.ts, schedule, c);
    let rows = sfd_hat_rows(g, term.x, &x_phi, &x_psi, &n.ts, schedule, alpha, &w)?;
    Ok((rows, w))
}

fn omega_stats(all: &[f64]) -> (f64, f64) {
    if all.is_empty() {
        return (0.0, 0.0);
    }
    (all.iter().sum::<f64>() / all.len() as f64, all.iter().cloned().fold(0.0, f64::max))
}

fn check_teacher(teacher: &Denoiser, cfg: &SfdConfig) -> Result<usize> {
    let classes = teacher.classes();
    if classes == 0 {
        return Err(config_err!("the SFD teacher must be class-conditional"));
    }
    cfg.validate(classes)?;
    Ok(classes)
}

/// One alternation: `fake_steps` fake-score updates, then one generator
/// step on `E_{c_r}[𝓛̂(c_r, c_r)] + λ_sfd 𝓛̂(c_o, c_f)`.
pub fn sfd_round(
    state: &mut SfdState,
    teacher: &Denoiser,
    schedule: &NoiseSchedule,
    cfg: &SfdConfig,
    round: usize,
    rng: &mut impl Rng,
) -> Result<RoundRecord> {
    let classes = check_teacher(teacher, cfg)?;
    let all = round_robin(cfg.batch_size, classes);
    let mut fake_loss = 0.0;
    for _ in 0..cfg.fake_steps {
        fake_loss = fake_score_update(&mut state.fake, &mut state.opt_fake, &state.generator, schedule, &all, rng)?;
    }
    let retain: Vec<usize> = all.iter().copied().filter(|&c| c != cfg.forget_class).collect();
    let forget_n = all.len() - retain.len();

    let mut g = Graph::new();
    let bound = g.bind(state.generator.params(), true);
    let rterm = generator_term(&mut g, &state.generator, &bound, retain, schedule, rng)?;
    let (rrows, mut omegas) = term_rows(&mut g, &rterm, teacher, &state.fake, schedule, &rterm.labels, cfg.alpha)?;
    let distill = g.sum(rrows);
    let mut total = distill;
    let mut forget_loss = 0.0;
    if cfg.lambda_sfd > 0.0 {
        let fterm = generator_term(&mut g, &state.generator, &bound, vec![cfg.forget_class; forget_n], schedule, rng)?;
        let (frows, w) =
            term_rows(&mut g, &fterm, teacher, &state.fake, schedule, &vec![cfg.override_class; forget_n], cfg.alpha)?;
        omegas.extend(w);
        let forget = g.sum(frows);
        forget_loss = g.scalar(forget);
        let scaled = g.scale(forget, cfg.lambda_sfd);
        total = g.add(distill, scaled)?;
    }
    let grads = g.backward(total)?.collect(bound.ids());
    if !g.scalar(total).is_finite() || global_norm(&grads).is_nan() {
        return Err(Error::Divergence {
            step: round,
            message: "SFD generator loss is not finite".into(),
        });
    }
    state.opt_generator.apply(state.generator.params_mut(), &grads)?;
    let (omega_mean, omega_max) = omega_stats(&omegas);
    Ok(RoundRecord {
        round,
        fake_loss,
        distill_loss: g.scalar(distill),
        forget_loss,
        omega_mean,
        omega_max,
        lambda: None,
    })
}

/// Log responsibilities `log[(1 − λ) q(z|c_o) / ((1 − λ) q(z|c_o) + λ q(z|c_f))]`
/// as a `[B, 1]` node per retain class, differentiable in λ.
fn log_responsibility(g: &mut Graph, lambda: NodeId, log_q_o: &[f64], log_q_f: &[f64]) -> Result<NodeId> {
    let rows = log_q_o.len();
    let d: Vec<f64> = log_q_o.iter().zip(log_q_f).map(|(o, f)| (f - o).clamp(-50.0, 50.0)).collect();
    let lam = g.broadcast_rows(lambda, rows)?;
    let neg = g.scale(lam, -1.0);
    let one = g.constant(Tensor::filled(&[rows, 1], 1.0));
    let keep = g.add(one, neg)?;
    let ed = g.constant(Tensor::column(d.iter().map(|v| v.exp()).collect()));
    let lf = g.mul(lam, ed)?;
    let denom = g.add(keep, lf)?;
    let lk = g.log(keep);
    let ld = g.log(denom);
    g.sub(lk, ld)
}

/// Softmax over retain classes of the log responsibilities, per row.
pub fn responsibility_weights(g: &mut Graph, logits: &[NodeId]) -> Result<Vec<NodeId>> {
    if logits.is_empty() {
        return Err(config_err!("empty retain class set"));
    }
    let rows = g.value(logits[0]).rows();
    let shift: Vec<f64> = (0..rows)
        .map(|i| logits.iter().map(|&l| g.value(l).data()[i]).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let shift = g.constant(Tensor::column(shift));
    let mut exps = Vec::with_capacity(logits.len());
    for &l in logits {
        let centered = g.sub(l, shift)?;
        exps.push(g.exp(centered));
    }
    let mut sum = exps[0];
    for &e in &exps[1..] {
        sum = g.add(sum, e)?;
    }
    let ls = g.log(sum);
    let inv = g.scale(ls, -1.0);
    let inv = g.exp(inv);
    exps.iter().map(|&e| g.mul(e, inv)).collect()
}

/// Value-only responsibility weights for inspection and tests.
pub fn responsibility_weights_at(lambda: f64, log_q_retain: &[Vec<f64>], log_q_forget: &[f64]) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::new();
    let lam = g.constant(Tensor::scalar(lambda));
    let logits: Vec<NodeId> = log_q_retain
        .iter()
        .map(|lq| log_responsibility(&mut g, lam, lq, log_q_forget))
        .collect::<Result<_>>()?;
    let w = responsibility_weights(&mut g, &logits)?;
    Ok(w.iter().map(|&n| g.value(n).data().to_vec()).collect())
}

/// Nodes of the multi-class objective.
#[derive(Debug, Clone, Copy)]
pub struct MulticlassNodes {
    pub distill: NodeId,
    pub forget: NodeId,
    pub total: NodeId,
}

/// Distillation on the retain classes plus the forget class steered toward
/// every retain class `c_o`, weighted per row by responsibilities at `λ`.
#[allow(clippy::too_many_arguments)]
pub fn multiclass_adaptive_loss(
    g: &mut Graph,
    bound: &Bound,
    state: &SfdState,
    teacher: &Denoiser,
    schedule: &NoiseSchedule,
    spec: &GaussMixtureSpec,
    cfg: &SfdConfig,
    lambda: NodeId,
    rng: &mut impl Rng,
) -> Result<(MulticlassNodes, Vec<f64>)> {
    let classes = check_teacher(teacher, cfg)?;
    let retain_classes = cfg.retain_classes(classes);
    if retain_classes.is_empty() {
        return Err(config_err!("empty retain class set"));
    }
    let all = round_robin(cfg.batch_size, classes);
    let retain: Vec<usize> = all.iter().copied().filter(|&c| c != cfg.forget_class).collect();
    let forget_n = all.len() - retain.len();
    let rterm = generator_term(g, &state.generator, bound, retain, schedule, rng)?;
    let (rrows, mut omegas) = term_rows(g, &rterm, teacher, &state.fake, schedule, &rterm.labels, cfg.alpha)?;
    let distill = g.sum(rrows);

    let fterm = generator_term(g, &state.generator, bound, vec![cfg.forget_class; forget_n], schedule, rng)?;
    let nz = &fterm.noised;
    let log_q = |c: usize| -> Vec<f64> {
        (0..forget_n)
            .map(|i| {
                let t = nz.ts[i];
                spec.noisy_class_log_density(c, nz.z.row(i), schedule.gamma(t), schedule.sigma(t))
            })
            .collect()
    };
    let lq_f = log_q(cfg.forget_class);
    let mut logits = Vec::with_capacity(retain_classes.len());
    for &c in &retain_classes {
        let lq = log_q(c);
        logits.push(log_responsibility(g, lambda, &lq, &lq_f)?);
    }
    let weights = responsibility_weights(g, &logits)?;
    let mut forget: Option<NodeId> = None;
    for (&c, &w) in retain_classes.iter().zip(&weights) {
        let (rows, om) = term_rows(g, &fterm, teacher, &state.fake, schedule, &vec![c; forget_n], cfg.alpha)?;
        omegas.extend(om);
        let weighted = g.mul(rows, w)?;
        let s = g.sum(weighted);
        forget = Some(match forget {
            Some(acc) => g.add(acc, s)?,
            None => s,
        });
    }
    let forget = forget.expect("nonempty retain set");
    let scaled = g.scale(forget, cfg.lambda_sfd);
    let total = g.add(distill, scaled)?;
    Ok((MulticlassNodes { distill, forget, total }, omegas))
}

/// Inference-net state of the multi-class objective.
#[derive(Debug, Clone)]
pub struct MulticlassState {
    pub net: InferenceNet,
    pub opt: Adam,
    pub norm: RunningNorm,
    /// `[fake loss, mean ω, ‖∇ distill‖, ‖∇ forget‖]` of the previous round.
    pub prev: [f64; 4],
}

/// One multi-class round: fake-score updates, then a joint step on the
/// generator and the inference net of `total + β KL`.
#[allow(clippy::too_many_arguments)]
pub fn multiclass_round(
    state: &mut SfdState,
    mc: &mut MulticlassState,
    teacher: &Denoiser,
    schedule: &NoiseSchedule,
    spec: &GaussMixtureSpec,
    cfg: &SfdConfig,
    round: usize,
    rng: &mut impl Rng,
) -> Result<RoundRecord> {
    let classes = check_teacher(teacher, cfg)?;
    let all = round_robin(cfg.batch_size, classes);
    let mut fake_loss = 0.0;
    for _ in 0..cfg.fake_steps {
        fake_loss = fake_score_update(&mut state.fake, &mut state.opt_fake, &state.generator, schedule, &all, rng)?;
    }
    let ctx = build_context(mc.prev, &mut mc.norm, true)?;
    let mut g = Graph::new();
    let phi = g.bind(&mc.net.mlp.params, true);
    let v = g.constant(Tensor::matrix(1, 4, ctx.normalized.to_vec())?);
    let (mu, sigma) = mc.net.posterior_nodes(&mut g, &phi, v)?;
    let xi = normal(rng);
    let noise = g.scale(sigma, xi);
    let z = g.add(mu, noise)?;
    let lambda = g.sigmoid(z);
    let bound = g.bind(state.generator.params(), true);
    let (nodes, omegas) = multiclass_adaptive_loss(&mut g, &bound, state, teacher, schedule, spec, cfg, lambda, rng)?;
    let kl = kl_prior_node(&mut g, mu, sigma)?;
    let bkl = g.scale(kl, cfg.beta);
    let elbo = g.add(nodes.total, bkl)?;
    if !g.scalar(elbo).is_finite() {
        return Err(Error::Divergence {
            step: round,
            message: "multi-class SFD loss is not finite".into(),
        });
    }
    let sweep = g.backward(elbo)?;
    let gen_grads = sweep.collect(bound.ids());
    let phi_grads = sweep.collect(phi.ids());
    let gd = global_norm(&g.backward(nodes.distill)?.collect(bound.ids()));
    let gf = global_norm(&g.backward(nodes.forget)?.collect(bound.ids()));
    state.opt_generator.apply(state.generator.params_mut(), &gen_grads)?;
    mc.opt.apply(&mut mc.net.mlp.params, &phi_grads)?;
    let (omega_mean, omega_max) = omega_stats(&omegas);
    mc.prev = [fake_loss, omega_mean, gd, gf];
    Ok(RoundRecord {
        round,
        fake_loss,
        distill_loss: g.scalar(nodes.distill),
        forget_loss: g.scalar(nodes.forget),
        omega_mean,
        omega_max,
        lambda: Some(g.scalar(lambda)),
    })
}

#[derive(Debug, Clone)]
pub struct SfdResult {
    pub state: SfdState,
    pub records: Vec<RoundRecord>,
    pub inference: Option<InferenceNet>,
}

/// Fake-score warm-up followed by `cfg.rounds` rounds. With `spec` given,
/// rounds use the multi-class objective. Random streams: `sfd.init` and
/// `sfd`.
fn anneal(state: &mut SfdState, cfg: &SfdConfig, round: usize) {
    if cfg.cosine_decay {
        let frac = round as f64 / cfg.rounds as f64;
        state.opt_generator.config.lr = cfg.lr_generator * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
    }
}

pub fn run_sfd(
    teacher: &Denoiser,
    schedule: &NoiseSchedule,
    spec: Option<&GaussMixtureSpec>,
    cfg: &SfdConfig,
    seed: u64,
) -> Result<SfdResult> {
    let classes = check_teacher(teacher, cfg)?;
    let mut init = substream(seed, "sfd.init");
    let mut state = SfdState::new(teacher.data_dim(), classes, cfg, &mut init)?;
    let mut rng = substream(seed, "sfd");
    let all = round_robin(cfg.batch_size, classes);
    for _ in 0..cfg.fake_warmup {
        fake_score_update(&mut state.fake, &mut state.opt_fake, &state.generator, schedule, &all, &mut rng)?;
    }
    let mut records = Vec::with_capacity(cfg.rounds);
    let inference = match spec {
        None => {
            for round in 0..cfg.rounds {
                anneal(&mut state, cfg, round);
                records.push(sfd_round(&mut state, teacher, schedule, cfg, round, &mut rng)?);
            }
            None
        }
        Some(spec) => {
            let mut mc = MulticlassState {
                net: InferenceNet::new(&mut init),
                opt: Adam::new(AdamConfig::with_lr(cfg.lr_phi))?,
                norm: RunningNorm::new(4),
                prev: [0.0; 4],
            };
            for round in 0..cfg.rounds {
                anneal(&mut state, cfg, round);
                records.push(multiclass_round(&mut state, &mut mc, teacher, schedule, spec, cfg, round, &mut rng)?);
            }
            Some(mc.net)
        }
    };
    Ok(SfdResult {
        state,
        records,
        inference,
    })
}

#[cfg(test)]
mod tests;
