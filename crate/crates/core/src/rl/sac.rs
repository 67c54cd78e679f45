//! Soft actor-critic with twin Q-functions, Polyak-averaged targets and a
//! fixed entropy temperature.

use std::collections::VecDeque;

use rand::Rng;
use serde::Serialize;

use super::{env_reset, policy_act, ActionBounds, PolicyNet, RlConfig, Task, TrajectoryRow, Transition, HALF_LN_2PI};
use crate::adaptive::RunningNorm;
use crate::diffusion::Denoiser;
use crate::error::{contract, Result};
use crate::nn::Mlp;
use crate::rng::{normal, substream};
use crate::siss::StepRecord;
use crate::tensor::{Adam, AdamConfig, Bound, Graph, NodeId, ParamSet, Tensor};

/// `Q(s, λ)` on the state concatenated with the action.
#[derive(Debug, Clone, PartialEq)]
pub struct QNet {
    pub mlp: Mlp,
}

impl QNet {
    pub fn new(state_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            mlp: Mlp::new(&[state_dim + 1, 64, 64, 1], rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, bound: &Bound, states: NodeId, actions: NodeId) -> Result<NodeId> {
        let x = g.concat(states, actions)?;
        self.mlp.forward(g, bound, x)
    }

    pub fn values(&self, states: &[Vec<f64>], actions: &[f64]) -> Result<Vec<f64>> {
        let rows: Vec<Vec<f64>> = states
            .iter()
            .zip(actions)
            .map(|(s, &a)| {
                let mut r = s.clone();
                r.push(a);
                r
            })
            .collect();
        Ok(self.mlp.eval(&Tensor::from_rows(&rows)?)?.into_data())
    }
}

/// FIFO replay memory.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            items: VecDeque::with_capacity(capacity.min(4096)),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    /// Uniform draw with replacement.
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Vec<&Transition> {
        (0..n).map(|_| &self.items[rng.random_range(0..self.items.len())]).collect()
    }
}

/// Soft Bellman target `R + γ (1 − done) V'`.
pub fn sac_target(reward: f64, gamma: f64, done: bool, next_value: f64) -> f64 {
    if done {
        reward
    } else {
        reward + gamma * next_value
    }
}

/// `θ' ← τ θ + (1 − τ) θ'`.
pub fn polyak(target: &mut ParamSet, source: &ParamSet, tau: f64) {
    for (t, s) in target.tensors_mut().iter_mut().zip(source.tensors()) {
        for (a, b) in t.data_mut().iter_mut().zip(s.data()) {
            *a = tau * b + (1.0 - tau) * *a;
        }
    }
}

#[derive(Debug, Clone)]
pub struct SacLearner {
    pub policy: PolicyNet,
    pub q1: QNet,
    pub q2: QNet,
    pub q1_target: QNet,
    pub q2_target: QNet,
    pub opt_policy: Adam,
    pub opt_q1: Adam,
    pub opt_q2: Adam,
}

impl SacLearner {
    pub fn new(state_dim: usize, lr: f64, rng: &mut impl Rng) -> Result<Self> {
        let q1 = QNet::new(state_dim, rng);
        let q2 = QNet::new(state_dim, rng);
        Ok(Self {
            policy: PolicyNet::new(state_dim, rng),
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            q1,
            q2,
            opt_policy: Adam::new(AdamConfig::with_lr(lr))?,
            opt_q1: Adam::new(AdamConfig::with_lr(lr))?,
            opt_q2: Adam::new(AdamConfig::with_lr(lr))?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct SacStats {
    pub q1_loss: f64,
    pub q2_loss: f64,
    pub actor_loss: f64,
}

/// Actor loss `mean(α log π(λ|s) − min_i Q_i(s, λ))` with reparameterized
/// `λ = squash(μ + ξσ)`, and its gradient on the policy parameters.
pub fn actor_gradient(
    policy: &PolicyNet,
    critics: &[&QNet],
    states: &[Vec<f64>],
    xi: &[f64],
    bounds: &ActionBounds,
    alpha: f64,
) -> Result<(f64, Vec<Tensor>)> {
    if critics.is_empty() || states.len() != xi.len() || states.is_empty() {
        return Err(contract!("actor loss needs critics and one noise value per state"));
    }
    let mut g = Graph::new();
    let pb = g.bind(&policy.mlp.params, true);
    let s = g.constant(Tensor::from_rows(states)?);
    let (mu, log_std) = policy.heads(&mut g, &pb, s)?;
    let sigma = g.exp(log_std);
    let xin = g.constant(Tensor::column(xi.to_vec()));
    let noise = g.mul(sigma, xin)?;
    let z = g.add(mu, noise)?;
    let p = g.sigmoid(z);
    let lam_unit = g.scale(p, bounds.width());
    let lo = g.constant(Tensor::filled(&[states.len(), 1], bounds.lambda_min));
    let lambda = g.add(lam_unit, lo)?;

    // log π = −ξ²/2 − log σ − ½ln 2π − ln w − ln p − ln(1 − p)
    let c = g.constant(Tensor::column(
        xi.iter().map(|x| -0.5 * x * x - HALF_LN_2PI - bounds.width().ln()).collect(),
    ));
    let lp = g.sub(c, log_std)?;
    let ln_p = g.log(p);
    let lp = g.sub(lp, ln_p)?;
    let neg_p = g.scale(p, -1.0);
    let one = g.constant(Tensor::filled(&[states.len(), 1], 1.0));
    let q = g.add(one, neg_p)?;
    let ln_q = g.log(q);
    let logp = g.sub(lp, ln_q)?;

    let qs: Vec<NodeId> = critics
        .iter()
        .map(|c| {
            let b = g.bind(&c.mlp.params, false);
            c.forward(&mut g, &b, s, lambda)
        })
        .collect::<Result<_>>()?;
    let mut qmin = qs[0];
    for &qi in &qs[1..] {
        let take_new: Vec<f64> = g
            .value(qi)
            .data()
            .iter()
            .zip(g.value(qmin).data())
            .map(|(a, b)| if a < b { 1.0 } else { 0.0 })
            .collect();
        let keep = g.constant(Tensor::column(take_new.iter().map(|t| 1.0 - t).collect()));
        let take = g.constant(Tensor::column(take_new));
        let a = g.mul(qmin, keep)?;
        let b = g.mul(qi, take)?;
        qmin = g.add(a, b)?;
    }
    let ent = g.scale(logp, alpha);
    let per = g.sub(ent, qmin)?;
    let loss = g.mean(per)?;
    let grads = g.backward(loss)?.collect(pb.ids());
    Ok((g.scalar(loss), grads))
}

fn critic_step(q: &mut QNet, opt: &mut Adam, states: &[Vec<f64>], actions: &[f64], targets: &[f64]) -> Result<f64> {
    let mut g = Graph::new();
    let b = g.bind(&q.mlp.params, true);
    let s = g.constant(Tensor::from_rows(states)?);
    let a = g.constant(Tensor::column(actions.to_vec()));
    let v = q.forward(&mut g, &b, s, a)?;
    let y = g.constant(Tensor::column(targets.to_vec()));
    let d = g.sub(v, y)?;
    let sq = g.square(d);
    let loss = g.mean(sq)?;
    let grads = g.backward(loss)?.collect(b.ids());
    opt.apply(&mut q.mlp.params, &grads)?;
    Ok(g.scalar(loss))
}

/// One gradient step on both critics and the actor, then a Polyak update of
/// the targets.
pub fn sac_update(learner: &mut SacLearner, buffer: &ReplayBuffer, rl: &RlConfig, rng: &mut impl Rng) -> Result<SacStats> {
    if buffer.len() < rl.sac_batch {
        return Err(contract!("replay buffer holds {} < {} transitions", buffer.len(), rl.sac_batch));
    }
    let bounds = rl.bounds()?;
    let batch = buffer.sample(rl.sac_batch, rng);
    let states: Vec<Vec<f64>> = batch.iter().map(|t| t.state.clone()).collect();
    let next: Vec<Vec<f64>> = batch.iter().map(|t| t.next_state.clone()).collect();
    let actions: Vec<f64> = batch.iter().map(|t| t.lambda).collect();

    let next_actions: Vec<_> = next
        .iter()
        .map(|s| policy_act(&learner.policy, s, &bounds, rng))
        .collect::<Result<_>>()?;
    let next_lambda: Vec<f64> = next_actions.iter().map(|a| a.lambda).collect();
    let t1 = learner.q1_target.values(&next, &next_lambda)?;
    let t2 = learner.q2_target.values(&next, &next_lambda)?;
    let targets: Vec<f64> = batch
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let v = t1[i].min(t2[i]) - rl.sac_alpha * next_actions[i].log_prob;
            sac_target(t.reward, rl.gamma, t.done, v)
        })
        .collect();
    let q1_loss = critic_step(&mut learner.q1, &mut learner.opt_q1, &states, &actions, &targets)?;
    let q2_loss = critic_step(&mut learner.q2, &mut learner.opt_q2, &states, &actions, &targets)?;

    let xi: Vec<f64> = (0..states.len()).map(|_| normal(rng)).collect();
    let (actor_loss, grads) =
        actor_gradient(&learner.policy, &[&learner.q1, &learner.q2], &states, &xi, &bounds, rl.sac_alpha)?;
    learner.opt_policy.apply(&mut learner.policy.mlp.params, &grads)?;

    polyak(&mut learner.q1_target.mlp.params, &learner.q1.mlp.params, rl.sac_tau);
    polyak(&mut learner.q2_target.mlp.params, &learner.q2.mlp.params, rl.sac_tau);
    Ok(SacStats {
        q1_loss,
        q2_loss,
        actor_loss,
    })
}

#[derive(Debug, Clone)]
pub struct SacResult {
    pub learner: SacLearner,
    pub denoiser: Denoiser,
    pub trajectory: Vec<TrajectoryRow>,
    pub records: Vec<StepRecord>,
    pub stats: Vec<SacStats>,
}

/// Online SAC along one trajectory of `total_steps` SISS updates.
pub fn run_sac(base: &Denoiser, task: Task<'_>, rl: &RlConfig, seed: u64) -> Result<SacResult> {
    rl.validate()?;
    let bounds = rl.bounds()?;
    let mut learner = SacLearner::new(rl.state_dim(), rl.lr, &mut substream(seed, "rl.init"))?;
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
    let mut urng = substream(seed, "rl.sac");
    let mut buffer = ReplayBuffer::new(rl.buffer_capacity);
    let mut trajectory = Vec::with_capacity(rl.total_steps);
    let mut records = Vec::with_capacity(rl.total_steps);
    let mut stats = Vec::new();
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
        buffer.push(Transition {
            state: s,
            lambda: a.lambda,
            z: a.z,
            log_prob: a.log_prob,
            reward: out.reward,
            next_state: out.state.clone(),
            done: out.done,
        });
        s = out.state;
        if buffer.len() >= rl.sac_batch {
            stats.push(sac_update(&mut learner, &buffer, rl, &mut urng)?);
        }
    }
    Ok(SacResult {
        learner,
        denoiser: env.denoiser,
        trajectory,
        records,
        stats,
    })
}
