//! Importance-sampled mixture unlearning loss and the static-λ loop.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{draw_indices, log_sum_exp, ForgetSplit, LabeledDataset};
use crate::diffusion::{noised, Denoiser, NoiseSchedule};
use crate::error::{config_err, contract, Error, Result};
use crate::rng::normal_tensor;
use crate::tensor::{global_norm, Adam, Bound, Graph, NodeId, Tensor};

/// Coefficient applied to the forget loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ForgetWeightMode {
    /// `k / (n − k)`.
    #[serde(rename = "eq8")]
    Mixture,
    /// `n / k`.
    #[serde(rename = "alg1")]
    Direct,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SissWeights {
    pub n: usize,
    pub k: usize,
    /// `n / (n − k)`.
    pub retain: f64,
    pub forget: f64,
    /// Forget-loss scale `s`.
    pub s: f64,
}

impl SissWeights {
    pub fn new(n: usize, k: usize, s: f64, mode: ForgetWeightMode) -> Result<Self> {
        if k == 0 || k >= n {
            return Err(config_err!("forget set size k={k} must satisfy 0 < k < n={n}"));
        }
        if !(s >= 0.0) {
            return Err(config_err!("forget scale s must be non-negative, got {s}"));
        }
        let (nf, kf) = (n as f64, k as f64);
        Ok(Self {
            n,
            k,
            retain: nf / (nf - kf),
            forget: match mode {
                ForgetWeightMode::Mixture => kf / (nf - kf),
                ForgetWeightMode::Direct => nf / kf,
            },
            s,
        })
    }

    pub fn from_split(split: &ForgetSplit, s: f64, mode: ForgetWeightMode) -> Result<Self> {
        Self::new(split.n(), split.k(), s, mode)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Retain,
    Forget,
}

/// One draw from the mixture `(1 − λ) q(m_t|x_r) + λ q(m_t|x_f)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureLatent {
    pub m: Vec<f64>,
    pub t: usize,
    pub lambda: f64,
    pub x_r: Vec<f64>,
    pub x_f: Vec<f64>,
    pub component: Component,
}

fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(contract!("mixture weight λ={lambda} outside [0, 1]"))
    }
}

/// Bernoulli(λ) picks the forget source, then `m_t = γ_t x + σ_t ε`.
pub fn mixture_sample(
    schedule: &NoiseSchedule,
    x_r: &[f64],
    x_f: &[f64],
    t: usize,
    lambda: f64,
    rng: &mut impl Rng,
) -> Result<MixtureLatent> {
    check_lambda(lambda)?;
    schedule.check_t(t)?;
    if x_r.len() != x_f.len() {
        return Err(contract!("x_r and x_f dimensions differ"));
    }
    let u: f64 = rng.random();
    let component = if u < lambda { Component::Forget } else { Component::Retain };
    let x = if component == Component::Forget { x_f } else { x_r };
    let eps = normal_tensor(rng, 1, x.len());
    let (g, s) = (schedule.gamma(t), schedule.sigma(t));
    let m = x.iter().zip(eps.data()).map(|(xi, e)| g * xi + s * e).collect();
    Ok(MixtureLatent {
        m,
        t,
        lambda,
        x_r: x_r.to_vec(),
        x_f: x_f.to_vec(),
        component,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogDensities {
    pub log_qr: f64,
    pub log_qf: f64,
    pub log_q_lambda: f64,
}

impl LogDensities {
    pub fn log_ratio_retain(&self) -> f64 {
        self.log_qr - self.log_q_lambda
    }

    pub fn log_ratio_forget(&self) -> f64 {
        self.log_qf - self.log_q_lambda
    }
}

/// `log N(m; γ x, σ² I)`.
pub fn log_gaussian(m: &[f64], x: &[f64], gamma: f64, sigma: f64) -> f64 {
    let var = sigma * sigma;
    let sq: f64 = m.iter().zip(x).map(|(a, b)| (a - gamma * b).powi(2)).sum();
    -0.5 * sq / var - 0.5 * m.len() as f64 * (2.0 * std::f64::consts::PI * var).ln()
}

/// Log-densities of `m` under the retain, forget and λ-mixture forward
/// marginals at step `t`.
pub fn log_densities(
    schedule: &NoiseSchedule,
    m: &[f64],
    x_r: &[f64],
    x_f: &[f64],
    t: usize,
    lambda: f64,
) -> Result<LogDensities> {
    check_lambda(lambda)?;
    schedule.check_t(t)?;
    Ok(log_densities_with(m, x_r, x_f, schedule.gamma(t), schedule.sigma(t), lambda))
}

pub fn log_densities_with(m: &[f64], x_r: &[f64], x_f: &[f64], gamma: f64, sigma: f64, lambda: f64) -> LogDensities {
    let log_qr = log_gaussian(m, x_r, gamma, sigma);
    let log_qf = log_gaussian(m, x_f, gamma, sigma);
    let log_q_lambda = if lambda == 0.0 {
        log_qr
    } else if lambda == 1.0 {
        log_qf
    } else {
        log_sum_exp(&[(1.0 - lambda).ln() + log_qr, lambda.ln() + log_qf])
    };
    LogDensities {
        log_qr,
        log_qf,
        log_q_lambda,
    }
}

/// A minibatch of `(x_r, x_f)` pairs with one mixture latent each. The
/// Bernoulli draw is `u < λ` on the stored uniforms.
#[derive(Debug, Clone)]
pub struct PairBatch {
    pub x_r: Tensor,
    pub x_f: Tensor,
    pub c_r: Vec<usize>,
    pub c_f: Vec<usize>,
    pub ts: Vec<usize>,
    pub u: Vec<f64>,
    pub eps: Tensor,
    pub lambda: f64,
    pub m: Tensor,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.ts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ts.is_empty()
    }

    /// Forget components drawn.
    pub fn forget_count(&self) -> usize {
        self.u.iter().filter(|&&u| u < self.lambda).count()
    }

    pub fn log_densities(&self, schedule: &NoiseSchedule) -> Vec<LogDensities> {
        (0..self.len())
            .map(|i| {
                let t = self.ts[i];
                log_densities_with(
                    self.m.row(i),
                    self.x_r.row(i),
                    self.x_f.row(i),
                    schedule.gamma(t),
                    schedule.sigma(t),
                    self.lambda,
                )
            })
            .collect()
    }
}

/// Samples `pairs` retain/forget pairs uniformly and draws their latents.
pub fn draw_pairs(
    data: &LabeledDataset,
    split: &ForgetSplit,
    schedule: &NoiseSchedule,
    pairs: usize,
    lambda: f64,
    rng: &mut impl Rng,
) -> Result<PairBatch> {
    check_lambda(lambda)?;
    if split.retain.is_empty() || split.forget.is_empty() {
        return Err(config_err!("SISS needs non-empty forget and retain sets"));
    }
    if pairs == 0 {
        return Err(config_err!("SISS batch must contain at least one pair"));
    }
    let ri = draw_indices(&split.retain, pairs, rng);
    let fi = draw_indices(&split.forget, pairs, rng);
    let ts: Vec<usize> = (0..pairs).map(|_| schedule.sample_t(rng)).collect();
    let u: Vec<f64> = (0..pairs).map(|_| rng.random()).collect();
    let eps = normal_tensor(rng, pairs, data.dim());
    let x_r = data.points.gather_rows(&ri);
    let x_f = data.points.gather_rows(&fi);
    let chosen: Vec<Vec<f64>> = (0..pairs)
        .map(|i| if u[i] < lambda { x_f.row(i).to_vec() } else { x_r.row(i).to_vec() })
        .collect();
    let m = noised(schedule, &Tensor::from_rows(&chosen)?, &ts, &eps)?;
    Ok(PairBatch {
        c_r: ri.iter().map(|&i| data.labels[i]).collect(),
        c_f: fi.iter().map(|&i| data.labels[i]).collect(),
        x_r,
        x_f,
        ts,
        u,
        eps,
        lambda,
        m,
    })
}

/// Per-pair importance ratios `q_r/q_λ` and `q_f/q_λ` as `[B, 1]` graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct RatioNodes {
    pub retain: NodeId,
    pub forget: NodeId,
}

/// Ratios for a fixed λ, computed in log space and inserted as constants.
pub fn fixed_ratios(g: &mut Graph, batch: &PairBatch, schedule: &NoiseSchedule) -> (RatioNodes, Vec<LogDensities>) {
    let ld = batch.log_densities(schedule);
    let r = ld.iter().map(|l| l.log_ratio_retain().exp()).collect();
    let f = ld.iter().map(|l| l.log_ratio_forget().exp()).collect();
    let nodes = RatioNodes {
        retain: g.constant(Tensor::column(r)),
        forget: g.constant(Tensor::column(f)),
    };
    (nodes, ld)
}

/// Ratios as differentiable functions of a `[1, 1]` λ node. With
/// `d = log q_f − log q_r` and `m = max(d, 0)`,
/// `log(q_r/q_λ) = −m − log(e^{−m} + λ (e^{d−m} − e^{−m}))`, which never
/// exponentiates a positive number.
pub fn lambda_ratios(g: &mut Graph, batch: &PairBatch, schedule: &NoiseSchedule, lambda: NodeId) -> Result<RatioNodes> {
    let ld = batch.log_densities(schedule);
    let n = ld.len();
    let (mut neg_m, mut a, mut diff, mut d) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for l in &ld {
        let di = l.log_qf - l.log_qr;
        let mi = di.max(0.0);
        let ai = (-mi).exp();
        let bi = (di - mi).exp();
        neg_m.push(-mi);
        a.push(ai);
        diff.push(bi - ai);
        d.push(di);
    }
    let lam = g.broadcast_rows(lambda, n)?;
    let diff = g.constant(Tensor::column(diff));
    let a = g.constant(Tensor::column(a));
    let scaled = g.mul(lam, diff)?;
    let s = g.add(scaled, a)?;
    let log_s = g.log(s);
    let neg_m = g.constant(Tensor::column(neg_m));
    let log_r = g.sub(neg_m, log_s)?;
    let d = g.constant(Tensor::column(d));
    let log_f = g.add(log_r, d)?;
    Ok(RatioNodes {
        retain: g.exp(log_r),
        forget: g.exp(log_f),
    })
}

/// Graph nodes of the three SISS losses.
#[derive(Debug, Clone, Copy)]
pub struct SissNodes {
    pub retain: NodeId,
    pub forget: NodeId,
    pub total: NodeId,
}

fn residual_target(batch: &PairBatch, x: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    let d = x.cols();
    let mut data = Vec::with_capacity(x.len());
    for i in 0..batch.len() {
        let t = batch.ts[i];
        let (g, s) = (schedule.gamma(t), schedule.sigma(t));
        for j in 0..d {
            data.push((batch.m.row(i)[j] - g * x.row(i)[j]) / s);
        }
    }
    Tensor::matrix(batch.len(), d, data)
}

fn weighted_term(
    g: &mut Graph,
    pred: NodeId,
    target: Tensor,
    ratio: NodeId,
    coef: f64,
    pairs: usize,
) -> Result<NodeId> {
    let t = g.constant(target);
    let diff = g.sub(t, pred)?;
    let sq = g.square(diff);
    let per = g.sum_cols(sq)?;
    let w = g.mul(ratio, per)?;
    let s = g.sum(w);
    Ok(g.scale(s, coef / pairs as f64))
}

/// `𝓛_retain`, `𝓛_forget` and `𝓛_siss = 𝓛_retain − (1+s) 𝓛_forget`, each a
/// mean over pairs of an importance-weighted noise-prediction residual.
pub fn siss_nodes(
    g: &mut Graph,
    denoiser: &Denoiser,
    bound: &Bound,
    schedule: &NoiseSchedule,
    batch: &PairBatch,
    weights: &SissWeights,
    ratios: RatioNodes,
) -> Result<SissNodes> {
    if batch.is_empty() {
        return Err(contract!("empty SISS batch"));
    }
    let m = g.constant(batch.m.clone());
    let pred_r = denoiser.predict(g, bound, m, &batch.ts, schedule, Some(&batch.c_r))?;
    let pred_f = if denoiser.classes() > 0 && batch.c_r != batch.c_f {
        denoiser.predict(g, bound, m, &batch.ts, schedule, Some(&batch.c_f))?
    } else {
        pred_r
    };
    let n = batch.len();
    let retain = weighted_term(g, pred_r, residual_target(batch, &batch.x_r, schedule)?, ratios.retain, weights.retain, n)?;
    let forget = weighted_term(g, pred_f, residual_target(batch, &batch.x_f, schedule)?, ratios.forget, weights.forget, n)?;
    let scaled = g.scale(forget, 1.0 + weights.s);
    let total = g.sub(retain, scaled)?;
    Ok(SissNodes { retain, forget, total })
}

/// Loss values of one SISS evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct SissLossParts {
    pub retain: f64,
    pub forget: f64,
    pub total: f64,
    pub log_ratio_retain: Vec<f64>,
    pub log_ratio_forget: Vec<f64>,
}

impl SissLossParts {
    pub fn read(g: &Graph, nodes: &SissNodes, ld: &[LogDensities]) -> Self {
        Self {
            retain: g.scalar(nodes.retain),
            forget: g.scalar(nodes.forget),
            total: g.scalar(nodes.total),
            log_ratio_retain: ld.iter().map(LogDensities::log_ratio_retain).collect(),
            log_ratio_forget: ld.iter().map(LogDensities::log_ratio_forget).collect(),
        }
    }
}

/// Evaluates the SISS losses of a single latent with fixed λ.
pub fn siss_losses(
    denoiser: &Denoiser,
    schedule: &NoiseSchedule,
    latent: &MixtureLatent,
    c_r: usize,
    c_f: usize,
    weights: &SissWeights,
) -> Result<SissLossParts> {
    let d = latent.m.len();
    let u = if latent.component == Component::Forget { 0.0 } else { 1.0 };
    let batch = PairBatch {
        x_r: Tensor::matrix(1, d, latent.x_r.clone())?,
        x_f: Tensor::matrix(1, d, latent.x_f.clone())?,
        c_r: vec![c_r],
        c_f: vec![c_f],
        ts: vec![latent.t],
        u: vec![u],
        eps: Tensor::zeros(&[1, d]),
        lambda: latent.lambda,
        m: Tensor::matrix(1, d, latent.m.clone())?,
    };
    let mut g = Graph::new();
    let bound = g.bind(denoiser.params(), false);
    let (ratios, ld) = fixed_ratios(&mut g, &batch, schedule);
    let nodes = siss_nodes(&mut g, denoiser, &bound, schedule, &batch, weights, ratios)?;
    Ok(SissLossParts::read(&g, &nodes, &ld))
}

/// Combines retain and forget gradients into the `𝓛_siss` gradient. With a
/// clip factor `c`, the forget term `(1+s)∇𝓛_forget` is rescaled so its norm
/// is at most `c‖∇𝓛_retain‖`. Returns the combined gradient and whether the
/// forget term was rescaled.
pub fn combine_gradients(retain: &[Tensor], forget: &[Tensor], s: f64, clip: Option<f64>) -> (Vec<Tensor>, bool) {
    let mut scale = 1.0 + s;
    let mut clipped = false;
    if let Some(c) = clip {
        let nr = global_norm(retain);
        let nf = (1.0 + s) * global_norm(forget);
        if nf > c * nr {
            scale = if nf > 0.0 { (1.0 + s) * c * nr / nf } else { 0.0 };
            clipped = true;
        }
    }
    let out = retain
        .iter()
        .zip(forget)
        .map(|(r, f)| {
            let mut t = r.clone();
            for (a, b) in t.data_mut().iter_mut().zip(f.data()) {
                *a -= scale * b;
            }
            t
        })
        .collect();
    (out, clipped)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SissConfig {
    pub lambda: f64,
    pub s: f64,
    /// Forget-gradient clip factor `c`; `None` disables clipping.
    pub clip: Option<f64>,
    pub forget_weight_mode: ForgetWeightMode,
    /// Samples per step `B`; each step uses `B / 2` pairs.
    pub batch_size: usize,
    pub lr: f64,
    pub steps: usize,
}

impl Default for SissConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            s: 0.1,
            clip: Some(2.0),
            forget_weight_mode: ForgetWeightMode::Mixture,
            batch_size: 64,
            lr: 1e-4,
            steps: 1000,
        }
    }
}

impl SissConfig {
    pub fn pairs(&self) -> usize {
        (self.batch_size / 2).max(1)
    }
}

/// Per-step log row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub lambda: f64,
    pub retain: f64,
    pub forget: f64,
    pub total: f64,
    pub retain_grad_norm: f64,
    pub forget_grad_norm: f64,
}

pub const STEP_CSV_HEADER: &str = "step,lambda,loss_retain,loss_forget,loss_siss,grad_norm_retain,grad_norm_forget";

impl StepRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.lambda, self.retain, self.forget, self.total, self.retain_grad_norm, self.forget_grad_norm
        )
    }

    pub fn is_finite(&self) -> bool {
        [self.retain, self.forget, self.total, self.retain_grad_norm, self.forget_grad_norm]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Outcome of one SISS gradient evaluation on θ.
#[derive(Debug, Clone)]
pub struct SissEvaluation {
    pub parts: SissLossParts,
    pub retain_grads: Vec<Tensor>,
    pub forget_grads: Vec<Tensor>,
}

impl SissEvaluation {
    pub fn retain_grad_norm(&self) -> f64 {
        global_norm(&self.retain_grads)
    }

    pub fn forget_grad_norm(&self) -> f64 {
        global_norm(&self.forget_grads)
    }
}

/// Losses and separate θ-gradients of `𝓛_retain` and `𝓛_forget` on a pair
/// batch at fixed λ.
pub fn evaluate_fixed(
    denoiser: &Denoiser,
    schedule: &NoiseSchedule,
    batch: &PairBatch,
    weights: &SissWeights,
) -> Result<SissEvaluation> {
    let mut g = Graph::new();
    let bound = g.bind(denoiser.params(), true);
    let (ratios, ld) = fixed_ratios(&mut g, batch, schedule);
    let nodes = siss_nodes(&mut g, denoiser, &bound, schedule, batch, weights, ratios)?;
    let retain_grads = g.backward(nodes.retain)?.collect(bound.ids());
    let forget_grads = g.backward(nodes.forget)?.collect(bound.ids());
    Ok(SissEvaluation {
        parts: SissLossParts::read(&g, &nodes, &ld),
        retain_grads,
        forget_grads,
    })
}

fn divergence(step: usize, what: &str) -> Error {
    Error::Divergence {
        step,
        message: format!("{what} is not finite"),
    }
}

/// Applies the combined SISS gradient of `eval` to θ and returns the log row.
pub fn apply_siss_update(
    denoiser: &mut Denoiser,
    opt: &mut Adam,
    eval: &SissEvaluation,
    weights: &SissWeights,
    clip: Option<f64>,
    step: usize,
    lambda: f64,
) -> Result<StepRecord> {
    let rec = StepRecord {
        step,
        lambda,
        retain: eval.parts.retain,
        forget: eval.parts.forget,
        total: eval.parts.total,
        retain_grad_norm: eval.retain_grad_norm(),
        forget_grad_norm: eval.forget_grad_norm(),
    };
    if !rec.is_finite() {
        return Err(divergence(step, "SISS loss or gradient"));
    }
    let (grads, _) = combine_gradients(&eval.retain_grads, &eval.forget_grads, weights.s, clip);
    opt.apply(denoiser.params_mut(), &grads)?;
    Ok(rec)
}

/// One static-λ step: draw pairs, evaluate the SISS loss on the batch mean, combine
/// (and optionally clip) gradients, and take one optimizer step on θ.
#[allow(clippy::too_many_arguments)]
pub fn static_step(
    denoiser: &mut Denoiser,
    schedule: &NoiseSchedule,
    data: &LabeledDataset,
    split: &ForgetSplit,
    weights: &SissWeights,
    config: &SissConfig,
    opt: &mut Adam,
    step: usize,
    rng: &mut impl Rng,
) -> Result<StepRecord> {
    let batch = draw_pairs(data, split, schedule, config.pairs(), config.lambda, rng)?;
    let eval = evaluate_fixed(denoiser, schedule, &batch, weights)?;
    apply_siss_update(denoiser, opt, &eval, weights, config.clip, step, config.lambda)
}

/// Runs the static-λ loop for `config.steps` steps.
pub fn run_static(
    denoiser: &mut Denoiser,
    schedule: &NoiseSchedule,
    data: &LabeledDataset,
    split: &ForgetSplit,
    config: &SissConfig,
    rng: &mut impl Rng,
) -> Result<Vec<StepRecord>> {
    check_lambda(config.lambda)?;
    let weights = SissWeights::from_split(split, config.s, config.forget_weight_mode)?;
    let mut opt = Adam::new(crate::tensor::AdamConfig::with_lr(config.lr))?;
    (0..config.steps)
        .map(|step| static_step(denoiser, schedule, data, split, &weights, config, &mut opt, step, rng))
        .collect()
}
