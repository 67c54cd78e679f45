//! DDPM noise schedule, ε-prediction denoiser, training loss and ancestral
//! sampler.

mod schedule;

pub use schedule::{forward_marginal, noised, NoiseSchedule};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{contract, Error, Result};
use crate::nn::{CondNet, CondNetConfig};
use crate::rng::normal_tensor;
use crate::tensor::{Adam, AdamConfig, Bound, Graph, NodeId, ParamSet, Tensor};

/// ε-prediction network `ε_θ(m_t, t, c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    net: CondNet,
}

impl Denoiser {
    /// Standard architecture for `data_dim`-dimensional data; `classes = 0`
    /// builds an unconditional model.
    pub fn new(data_dim: usize, classes: usize, rng: &mut impl Rng) -> Self {
        Self {
            net: CondNet::new(CondNetConfig::standard(data_dim, data_dim, true, classes), rng),
        }
    }

    pub fn from_net(net: CondNet) -> Result<Self> {
        let c = net.config();
        if c.input_dim != c.output_dim || c.time_dim == 0 {
            return Err(contract!("a denoiser maps data to data and takes time"));
        }
        Ok(Self { net })
    }

    pub fn net(&self) -> &CondNet {
        &self.net
    }

    pub fn params(&self) -> &ParamSet {
        &self.net.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.net.params
    }

    pub fn data_dim(&self) -> usize {
        self.net.config().input_dim
    }

    pub fn classes(&self) -> usize {
        self.net.config().classes
    }

    fn labels<'a>(&self, labels: Option<&'a [usize]>) -> Option<&'a [usize]> {
        if self.classes() > 0 {
            labels
        } else {
            None
        }
    }

    /// Graph node for `ε_θ(m, t, c)` with one timestep per row.
    pub fn predict(
        &self,
        g: &mut Graph,
        bound: &Bound,
        m: NodeId,
        ts: &[usize],
        schedule: &NoiseSchedule,
        labels: Option<&[usize]>,
    ) -> Result<NodeId> {
        let tau: Vec<f64> = ts.iter().map(|&t| schedule.tau(t)).collect();
        self.net.forward(g, bound, m, Some(&tau), self.labels(labels))
    }

    pub fn predict_eval(
        &self,
        m: &Tensor,
        ts: &[usize],
        schedule: &NoiseSchedule,
        labels: Option<&[usize]>,
    ) -> Result<Tensor> {
        let tau: Vec<f64> = ts.iter().map(|&t| schedule.tau(t)).collect();
        self.net.eval(m, Some(&tau), self.labels(labels))
    }
}

/// A batch of noised data: `m = γ_t x0 + σ_t ε` with per-row timesteps.
#[derive(Debug, Clone)]
pub struct NoisyBatch {
    pub m: Tensor,
    pub eps: Tensor,
    pub ts: Vec<usize>,
}

pub fn noisy_batch(schedule: &NoiseSchedule, x0: &Tensor, rng: &mut impl Rng) -> Result<NoisyBatch> {
    let ts: Vec<usize> = (0..x0.rows()).map(|_| schedule.sample_t(rng)).collect();
    let eps = normal_tensor(rng, x0.rows(), x0.cols());
    let m = noised(schedule, x0, &ts, &eps)?;
    Ok(NoisyBatch { m, eps, ts })
}

/// Mean over rows of `‖target − pred‖²`.
pub fn eps_mse(g: &mut Graph, pred: NodeId, target: &Tensor) -> Result<NodeId> {
    let rows = target.rows();
    if rows == 0 {
        return Err(contract!("empty batch"));
    }
    let t = g.constant(target.clone());
    let d = g.sub(t, pred)?;
    let sq = g.square(d);
    let s = g.sum(sq);
    Ok(g.scale(s, 1.0 / rows as f64))
}

/// Simplified DDPM loss on `x0` with uniform timesteps.
pub fn ddpm_loss(
    g: &mut Graph,
    denoiser: &Denoiser,
    bound: &Bound,
    schedule: &NoiseSchedule,
    x0: &Tensor,
    labels: Option<&[usize]>,
    rng: &mut impl Rng,
) -> Result<NodeId> {
    if x0.rows() == 0 {
        return Err(contract!("ddpm_loss on an empty batch"));
    }
    let batch = noisy_batch(schedule, x0, rng)?;
    let m = g.constant(batch.m);
    let pred = denoiser.predict(g, bound, m, &batch.ts, schedule, labels)?;
    eps_mse(g, pred, &batch.eps)
}

/// Ancestral DDPM chain from `x_T` down to `t = 1` with variance `β_t`;
/// `predict(x, t)` returns the noise prediction at step `t`.
pub fn ancestral_sample_with(
    schedule: &NoiseSchedule,
    x_t: Tensor,
    rng: &mut impl Rng,
    mut predict: impl FnMut(&Tensor, usize) -> Result<Tensor>,
) -> Result<Tensor> {
    let mut x = x_t;
    for t in (1..=schedule.steps()).rev() {
        let eps = predict(&x, t)?;
        if !eps.same_shape(&x) {
            return Err(contract!("noise prediction shape {:?} vs {:?}", eps.shape(), x.shape()));
        }
        let coef = schedule.beta(t) / schedule.sigma(t);
        let inv = 1.0 / schedule.alpha(t).sqrt();
        let noise_scale = if t > 1 { schedule.beta(t).sqrt() } else { 0.0 };
        let z = if t > 1 {
            Some(normal_tensor(rng, x.rows(), x.cols()))
        } else {
            None
        };
        let data = x.data_mut();
        for (i, v) in data.iter_mut().enumerate() {
            *v = inv * (*v - coef * eps.data()[i]);
            if let Some(z) = &z {
                *v += noise_scale * z.data()[i];
            }
        }
    }
    Ok(x)
}

/// `n` samples from the denoiser, all under `condition` when conditional.
pub fn ancestral_sample(
    denoiser: &Denoiser,
    schedule: &NoiseSchedule,
    n: usize,
    condition: Option<usize>,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    if denoiser.classes() > 0 && condition.is_none() {
        return Err(contract!("conditional denoiser needs a condition to sample"));
    }
    let labels = condition.map(|c| vec![c; n]);
    let x_t = normal_tensor(rng, n, denoiser.data_dim());
    ancestral_sample_with(schedule, x_t, rng, |x, t| {
        denoiser.predict_eval(x, &vec![t; n], schedule, labels.as_deref())
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaseTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Anneal the learning rate to zero along a half cosine.
    pub cosine_decay: bool,
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 256,
            lr: 2e-3,
            cosine_decay: true,
        }
    }
}

/// Uniform minibatch (with replacement) of rows and labels.
pub fn sample_batch(data: &LabeledDataset, size: usize, rng: &mut impl Rng) -> (Tensor, Vec<usize>) {
    let idx: Vec<usize> = (0..size).map(|_| rng.random_range(0..data.len())).collect();
    let labels = idx.iter().map(|&i| data.labels[i]).collect();
    (data.points.gather_rows(&idx), labels)
}

/// Trains `denoiser` on `data` with the DDPM loss and Adam; returns the
/// per-step loss log.
pub fn train_base(
    denoiser: &mut Denoiser,
    data: &LabeledDataset,
    schedule: &NoiseSchedule,
    config: &BaseTrainConfig,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(contract!("train_base on an empty dataset"));
    }
    let mut opt = Adam::new(AdamConfig::with_lr(config.lr))?;
    let mut log = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        if config.cosine_decay {
            let frac = step as f64 / config.steps as f64;
            opt.config.lr = config.lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
        }
        let (x0, labels) = sample_batch(data, config.batch_size, rng);
        let mut g = Graph::new();
        let bound = g.bind(denoiser.params(), true);
        let loss = ddpm_loss(&mut g, denoiser, &bound, schedule, &x0, Some(&labels), rng)?;
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Divergence {
                step,
                message: "base training loss is not finite".into(),
            });
        }
        let grads = g.backward(loss)?.collect(bound.ids());
        opt.apply(denoiser.params_mut(), &grads)?;
        log.push(value);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_contam2d;
    use crate::rng::substream;

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::linear(100, 1e-3, 0.2).unwrap()
    }

    #[test]
    fn oracle_prediction_gives_zero_loss() {
        let s = schedule();
        let mut rng = substream(0, "test");
        let x0 = normal_tensor(&mut rng, 16, 2);
        let b = noisy_batch(&s, &x0, &mut rng).unwrap();
        let mut g = Graph::new();
        let pred = g.constant(b.eps.clone());
        let loss = eps_mse(&mut g, pred, &b.eps).unwrap();
        assert_eq!(g.scalar(loss), 0.0);
    }

    #[test]
    fn zero_prediction_gives_chi_square_mean() {
        let s = schedule();
        let mut rng = substream(1, "test");
        let x0 = normal_tensor(&mut rng, 20_000, 2);
        let b = noisy_batch(&s, &x0, &mut rng).unwrap();
        let mut g = Graph::new();
        let pred = g.constant(Tensor::zeros(&[20_000, 2]));
        let loss = eps_mse(&mut g, pred, &b.eps).unwrap();
        let loss = g.scalar(loss);
        // chi-square(2) has variance 4, so the standard error is 2/sqrt(2e4)
        assert!((loss - 2.0).abs() < 5.0 * 2.0 / (20_000f64).sqrt(), "loss = {loss}");
    }

    #[test]
    fn loss_is_permutation_invariant() {
        let s = schedule();
        let mut rng = substream(2, "test");
        let den = Denoiser::new(2, 0, &mut rng);
        let x0 = normal_tensor(&mut rng, 8, 2);
        let b = noisy_batch(&s, &x0, &mut rng).unwrap();
        let perm = [3, 1, 7, 0, 2, 6, 5, 4];
        let eval = |m: &Tensor, eps: &Tensor, ts: &[usize]| {
            let mut g = Graph::new();
            let bound = g.bind(den.params(), false);
            let mi = g.constant(m.clone());
            let p = den.predict(&mut g, &bound, mi, ts, &s, None).unwrap();
            let l = eps_mse(&mut g, p, eps).unwrap();
            g.scalar(l)
        };
        let a = eval(&b.m, &b.eps, &b.ts);
        let ts: Vec<usize> = perm.iter().map(|&i| b.ts[i]).collect();
        let c = eval(&b.m.gather_rows(&perm), &b.eps.gather_rows(&perm), &ts);
        assert!((a - c).abs() < 1e-12);
    }

    #[test]
    fn single_step_sampler_with_zero_prediction_rescales() {
        let s = NoiseSchedule::linear(1, 1e-4, 1e-4).unwrap();
        let mut rng = substream(3, "test");
        let x1 = normal_tensor(&mut rng, 5, 2);
        let out = ancestral_sample_with(&s, x1.clone(), &mut rng, |x, _| Ok(Tensor::zeros(x.shape()))).unwrap();
        for (o, x) in out.data().iter().zip(x1.data()) {
            assert!((o - x / s.gamma(1)).abs() < 1e-12);
        }
    }

    #[test]
    fn sampler_shape_and_determinism() {
        let s = schedule();
        let mut rng = substream(4, "test");
        let den = Denoiser::new(2, 4, &mut rng);
        let a = ancestral_sample(&den, &s, 7, Some(2), &mut substream(9, "sample")).unwrap();
        let b = ancestral_sample(&den, &s, 7, Some(2), &mut substream(9, "sample")).unwrap();
        assert_eq!(a.shape(), &[7, 2]);
        assert_eq!(a, b);
        assert!(ancestral_sample(&den, &s, 7, None, &mut rng).is_err());
    }

    #[test]
    fn zero_steps_leave_parameters_and_training_is_deterministic() {
        let s = schedule();
        let (data, _) = gen_contam2d(0, 100, 1.0 / 11.0).unwrap();
        let den0 = Denoiser::new(2, 4, &mut substream(0, "init"));
        let mut den = den0.clone();
        let cfg = BaseTrainConfig {
            steps: 0,
            ..Default::default()
        };
        assert!(train_base(&mut den, &data, &s, &cfg, &mut substream(0, "diffusion")).unwrap().is_empty());
        assert_eq!(den, den0);

        let cfg = BaseTrainConfig {
            steps: 20,
            batch_size: 32,
            lr: 1e-3,
            cosine_decay: true,
        };
        let mut a = den0.clone();
        let mut b = den0.clone();
        let la = train_base(&mut a, &data, &s, &cfg, &mut substream(0, "diffusion")).unwrap();
        let lb = train_base(&mut b, &data, &s, &cfg, &mut substream(0, "diffusion")).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a.params().fingerprint(), b.params().fingerprint());
    }

    #[test]
    fn denoiser_passes_grad_check() {
        use crate::tensor::{grad_check, GradCheckOptions};
        let s = schedule();
        let mut rng = substream(6, "test");
        let den = Denoiser::new(2, 4, &mut rng);
        let x0 = normal_tensor(&mut rng, 6, 2);
        let labels = [0, 1, 2, 3, 1, 0];
        let b = noisy_batch(&s, &x0, &mut rng).unwrap();
        let opts = GradCheckOptions {
            max_coords_per_tensor: Some(20),
            ..Default::default()
        };
        let err = grad_check(
            den.params(),
            |g, bound| {
                let m = g.constant(b.m.clone());
                let p = den.predict(g, bound, m, &b.ts, &s, Some(&labels))?;
                eps_mse(g, p, &b.eps)
            },
            &opts,
        )
        .unwrap();
        assert!(err < 1e-5, "err = {err}");
    }
}
