//! Variational inference of the SISS mixture weight λ from the unlearning
//! context.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ForgetSplit, LabeledDataset};
use crate::diffusion::{Denoiser, NoiseSchedule};
use crate::error::{contract, Error, Result};
use crate::nn::Mlp;
use crate::rng::{normal, substream};
use crate::siss::{
    combine_gradients, draw_pairs, lambda_ratios, siss_nodes, PairBatch, SissConfig, SissEvaluation, SissLossParts,
    SissNodes, SissWeights, StepRecord, STEP_CSV_HEADER,
};
use crate::tensor::{global_norm, Adam, AdamConfig, Bound, Graph, NodeId, Tensor};

/// Welford running mean/variance over fixed-width feature vectors, applied
/// after `log1p` to the first `transformed` entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningNorm {
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl RunningNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn update(&mut self, x: &[f64]) {
        self.count += 1;
        let n = self.count as f64;
        for (i, &v) in x.iter().enumerate() {
            let delta = v - self.mean[i];
            self.mean[i] += delta / n;
            self.m2[i] += delta * (v - self.mean[i]);
        }
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(i, &v)| {
                let std = if self.count > 1 {
                    (self.m2[i] / (self.count - 1) as f64).sqrt()
                } else {
                    1.0
                };
                let centered = v - self.mean[i];
                if centered == 0.0 {
                    0.0
                } else {
                    centered / std.max(1e-8)
                }
            })
            .collect()
    }
}

/// Raw context `[𝓛_retain, 𝓛_forget, ‖∇𝓛_retain‖, ‖∇𝓛_forget‖]` plus its
/// normalized form.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextVector {
    pub raw: [f64; 4],
    pub normalized: [f64; 4],
}

impl ContextVector {
    pub fn from_evaluation(eval: &SissEvaluation) -> [f64; 4] {
        [
            eval.parts.retain,
            eval.parts.forget,
            eval.retain_grad_norm(),
            eval.forget_grad_norm(),
        ]
    }
}

/// Applies `log1p`, updates the running statistics when `train` is set, and
/// z-scores. A non-finite transformed entry is an error and leaves the
/// statistics untouched.
pub fn build_context(raw: [f64; 4], norm: &mut RunningNorm, train: bool) -> Result<ContextVector> {
    let logged: Vec<f64> = raw.iter().map(|v| v.ln_1p()).collect();
    if logged.iter().any(|v| !v.is_finite()) {
        return Err(contract!("context entries must be finite after log1p, got {raw:?}"));
    }
    if train {
        norm.update(&logged);
    }
    let z = norm.normalize(&logged);
    Ok(ContextVector {
        raw,
        normalized: [z[0], z[1], z[2], z[3]],
    })
}

/// Gaussian over the latent `z`, with `λ = sigmoid(z)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LambdaPosterior {
    pub mu: f64,
    pub sigma: f64,
}

/// `q_φ(z | v)`: MLP 4 → 32 → 32 → 2 with heads `(μ, softplus(·) = σ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceNet {
    pub mlp: Mlp,
}

impl InferenceNet {
    pub fn new(rng: &mut impl Rng) -> Self {
        Self {
            mlp: Mlp::new(&[4, 32, 32, 2], rng),
        }
    }

    /// `(μ, σ)` nodes for a `[1, 4]` context node.
    pub fn posterior_nodes(&self, g: &mut Graph, bound: &Bound, v: NodeId) -> Result<(NodeId, NodeId)> {
        let out = self.mlp.forward(g, bound, v)?;
        let mu = g.slice_cols(out, 0, 1)?;
        let raw = g.slice_cols(out, 1, 2)?;
        Ok((mu, g.softplus(raw)))
    }

    pub fn posterior(&self, v: &[f64; 4]) -> Result<LambdaPosterior> {
        let out = self.mlp.eval(&Tensor::matrix(1, 4, v.to_vec())?)?;
        Ok(LambdaPosterior {
            mu: out.data()[0],
            sigma: crate::tensor::softplus_f64(out.data()[1]),
        })
    }
}

pub fn sigmoid(z: f64) -> f64 {
    crate::tensor::sigmoid_f64(z)
}

/// Reparameterized draw `z = μ + ξσ`, `λ = sigmoid(z)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaDraw {
    pub lambda: f64,
    pub z: f64,
    pub xi: f64,
    pub posterior: LambdaPosterior,
}

pub fn infer_lambda(net: &InferenceNet, v: &ContextVector, rng: &mut impl Rng) -> Result<LambdaDraw> {
    let posterior = net.posterior(&v.normalized)?;
    let xi = normal(rng);
    let z = posterior.mu + xi * posterior.sigma;
    Ok(LambdaDraw {
        lambda: sigmoid(z),
        z,
        xi,
        posterior,
    })
}

/// `KL(N(μ, σ²) ‖ N(0, 1)) = (σ² + μ² − 1)/2 − ln σ`.
pub fn kl_prior(post: LambdaPosterior) -> f64 {
    0.5 * (post.sigma * post.sigma + post.mu * post.mu - 1.0) - post.sigma.ln()
}

pub fn kl_prior_node(g: &mut Graph, mu: NodeId, sigma: NodeId) -> Result<NodeId> {
    let s2 = g.square(sigma);
    let m2 = g.square(mu);
    let sum = g.add(s2, m2)?;
    let half = g.scale(sum, 0.5);
    let minus_one = g.constant(Tensor::scalar(-0.5));
    let shifted = g.add(half, minus_one)?;
    let ls = g.log(sigma);
    g.sub(shifted, ls)
}

/// The ELBO graph of one step, with θ and φ both trainable.
#[derive(Debug)]
pub struct ElboGraph {
    pub graph: Graph,
    pub theta: Bound,
    pub phi: Bound,
    pub mu: NodeId,
    pub sigma: NodeId,
    pub z: NodeId,
    pub lambda: NodeId,
    pub siss: SissNodes,
    pub kl: NodeId,
    pub elbo: NodeId,
    pub batch: PairBatch,
    pub xi: f64,
}

/// Builds `𝓛_ELBO = 𝓛_siss(λ) + β KL` for context `v` and noise `ξ`. The
/// importance ratios are differentiable functions of λ, so backward reaches
/// φ through `λ = sigmoid(μ + ξσ)`.
#[allow(clippy::too_many_arguments)]
pub fn build_elbo(
    denoiser: &Denoiser,
    net: &InferenceNet,
    schedule: &NoiseSchedule,
    data: &LabeledDataset,
    split: &ForgetSplit,
    weights: &SissWeights,
    pairs: usize,
    v: &[f64; 4],
    xi: f64,
    beta: f64,
    pair_rng: &mut impl Rng,
) -> Result<ElboGraph> {
    let mut g = Graph::new();
    let phi = g.bind(&net.mlp.params, true);
    let vn = g.constant(Tensor::matrix(1, 4, v.to_vec())?);
    let (mu, sigma) = net.posterior_nodes(&mut g, &phi, vn)?;
    let noise = g.scale(sigma, xi);
    let z = g.add(mu, noise)?;
    let lambda = g.sigmoid(z);
    let batch = draw_pairs(data, split, schedule, pairs, g.scalar(lambda), pair_rng)?;
    let theta = g.bind(denoiser.params(), true);
    let ratios = lambda_ratios(&mut g, &batch, schedule, lambda)?;
    let siss = siss_nodes(&mut g, denoiser, &theta, schedule, &batch, weights, ratios)?;
    let kl = kl_prior_node(&mut g, mu, sigma)?;
    let bkl = g.scale(kl, beta);
    let elbo = g.add(siss.total, bkl)?;
    Ok(ElboGraph {
        graph: g,
        theta,
        phi,
        mu,
        sigma,
        z,
        lambda,
        siss,
        kl,
        elbo,
        batch,
        xi,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptiveConfig {
    /// KL weight β.
    pub beta: f64,
    /// Learning rate of the inference net.
    pub lr_phi: f64,
    /// λ of the warm-up pass that seeds the first context.
    pub warmup_lambda: f64,
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        Self {
            beta: 0.01,
            lr_phi: 1e-3,
            warmup_lambda: 0.5,
        }
    }
}

/// Per-step log row of the adaptive loop.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdaptiveRecord {
    pub siss: StepRecord,
    pub mu: f64,
    pub sigma: f64,
    pub kl: f64,
    pub elbo: f64,
    pub skipped: bool,
}

pub const ADAPTIVE_CSV_HEADER: &str = "mu,sigma,kl,loss_elbo,skipped";

impl AdaptiveRecord {
    pub fn csv_header() -> String {
        format!("{STEP_CSV_HEADER},{ADAPTIVE_CSV_HEADER}")
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.siss.csv_row(),
            self.mu,
            self.sigma,
            self.kl,
            self.elbo,
            u8::from(self.skipped)
        )
    }
}

/// Mutable state of an adaptive run besides θ.
#[derive(Debug, Clone)]
pub struct AdaptiveState {
    pub net: InferenceNet,
    pub opt_phi: Adam,
    pub norm: RunningNorm,
    /// Context of the most recent completed step.
    pub prev: [f64; 4],
    /// When false, φ is held fixed.
    pub train_phi: bool,
}

impl AdaptiveState {
    pub fn new(net: InferenceNet, config: &AdaptiveConfig) -> Result<Self> {
        Ok(Self {
            net,
            opt_phi: Adam::new(AdamConfig::with_lr(config.lr_phi))?,
            norm: RunningNorm::new(4),
            prev: [0.0; 4],
            train_phi: true,
        })
    }
}

/// Forward and backward pass at the warm-up λ without updating θ; seeds the
/// first context.
#[allow(clippy::too_many_arguments)]
pub fn warmup(
    denoiser: &Denoiser,
    schedule: &NoiseSchedule,
    data: &LabeledDataset,
    split: &ForgetSplit,
    weights: &SissWeights,
    pairs: usize,
    lambda: f64,
    rng: &mut impl Rng,
) -> Result<SissEvaluation> {
    let batch = draw_pairs(data, split, schedule, pairs, lambda, rng)?;
    crate::siss::evaluate_fixed(denoiser, schedule, &batch, weights)
}

/// One joint update of θ and φ on the ELBO.
#[allow(clippy::too_many_arguments)]
pub fn elbo_step(
    denoiser: &mut Denoiser,
    opt_theta: &mut Adam,
    state: &mut AdaptiveState,
    schedule: &NoiseSchedule,
    data: &LabeledDataset,
    split: &ForgetSplit,
    weights: &SissWeights,
    siss: &SissConfig,
    config: &AdaptiveConfig,
    step: usize,
    xi_rng: &mut impl Rng,
    pair_rng: &mut impl Rng,
) -> Result<AdaptiveRecord> {
    let ctx = match build_context(state.prev, &mut state.norm, true) {
        Ok(c) => c,
        Err(_) => {
            return Ok(AdaptiveRecord {
                siss: StepRecord {
                    step,
                    lambda: f64::NAN,
                    retain: state.prev[0],
                    forget: state.prev[1],
                    total: f64::NAN,
                    retain_grad_norm: state.prev[2],
                    forget_grad_norm: state.prev[3],
                },
                mu: f64::NAN,
                sigma: f64::NAN,
                kl: f64::NAN,
                elbo: f64::NAN,
                skipped: true,
            })
        }
    };
    let xi = normal(xi_rng);
    let eg = build_elbo(
        denoiser,
        &state.net,
        schedule,
        data,
        split,
        weights,
        siss.pairs(),
        &ctx.normalized,
        xi,
        config.beta,
        pair_rng,
    )?;
    let g = &eg.graph;
    let parts = SissLossParts::read(g, &eg.siss, &eg.batch.log_densities(schedule));
    let retain_sweep = g.backward_weighted(&[(eg.siss.retain, 1.0), (eg.kl, config.beta)])?;
    let forget_sweep = g.backward(eg.siss.forget)?;
    let gr = retain_sweep.collect(eg.theta.ids());
    let gf = forget_sweep.collect(eg.theta.ids());
    let phi_r = retain_sweep.collect(eg.phi.ids());
    let phi_f = forget_sweep.collect(eg.phi.ids());

    let lambda = g.scalar(eg.lambda);
    let rec = AdaptiveRecord {
        siss: StepRecord {
            step,
            lambda,
            retain: parts.retain,
            forget: parts.forget,
            total: parts.total,
            retain_grad_norm: global_norm(&gr),
            forget_grad_norm: global_norm(&gf),
        },
        mu: g.scalar(eg.mu),
        sigma: g.scalar(eg.sigma),
        kl: g.scalar(eg.kl),
        elbo: g.scalar(eg.elbo),
        skipped: false,
    };
    if !rec.siss.is_finite() || !rec.elbo.is_finite() {
        return Err(Error::Divergence {
            step,
            message: "ELBO or SISS gradient is not finite".into(),
        });
    }
    let (theta_grad, _) = combine_gradients(&gr, &gf, weights.s, siss.clip);
    opt_theta.apply(denoiser.params_mut(), &theta_grad)?;
    if state.train_phi {
        let scale = 1.0 + weights.s;
        let phi_grad: Vec<Tensor> = phi_r
            .iter()
            .zip(&phi_f)
            .map(|(r, f)| {
                let mut t = r.clone();
                t.axpy(-scale, f);
                t
            })
            .collect();
        state.opt_phi.apply(&mut state.net.mlp.params, &phi_grad)?;
    }
    state.prev = [rec.siss.retain, rec.siss.forget, rec.siss.retain_grad_norm, rec.siss.forget_grad_norm];
    Ok(rec)
}

/// Warm-up plus `siss.steps` ELBO steps. Random streams: `adaptive.init`
/// (inference net), `adaptive.warmup`, `adaptive.xi` and `siss` (pairs).
pub fn run_adaptive(
    denoiser: &mut Denoiser,
    schedule: &NoiseSchedule,
    data: &LabeledDataset,
    split: &ForgetSplit,
    siss: &SissConfig,
    config: &AdaptiveConfig,
    seed: u64,
) -> Result<(Vec<AdaptiveRecord>, InferenceNet)> {
    let weights = SissWeights::from_split(split, siss.s, siss.forget_weight_mode)?;
    let net = InferenceNet::new(&mut substream(seed, "adaptive.init"));
    let mut state = AdaptiveState::new(net, config)?;
    let warm = warmup(
        denoiser,
        schedule,
        data,
        split,
        &weights,
        siss.pairs(),
        config.warmup_lambda,
        &mut substream(seed, "adaptive.warmup"),
    )?;
    state.prev = ContextVector::from_evaluation(&warm);
    let mut opt = Adam::new(AdamConfig::with_lr(siss.lr))?;
    let mut xi_rng = substream(seed, "adaptive.xi");
    let mut pair_rng = substream(seed, "siss");
    let mut log = Vec::with_capacity(siss.steps);
    for step in 0..siss.steps {
        log.push(elbo_step(
            denoiser,
            &mut opt,
            &mut state,
            schedule,
            data,
            split,
            &weights,
            siss,
            config,
            step,
            &mut xi_rng,
            &mut pair_rng,
        )?);
    }
    Ok((log, state.net))
}

#[cfg(test)]
mod tests;
