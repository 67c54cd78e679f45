use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract, Result};
use crate::rng::normal_tensor;
use crate::tensor::Tensor;

/// Linear-β DDPM noise schedule. Timesteps are 1-based: `t ∈ [1, T]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    gamma: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    /// `β_t` interpolated linearly from `beta_start` to `beta_end` over
    /// `steps` timesteps.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(config_err!("diffusion steps must be at least 1"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(config_err!(
                "noise schedule needs 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
            ));
        }
        let beta: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let gamma = alpha_bar.iter().map(|a| a.sqrt()).collect();
        let sigma = alpha_bar.iter().map(|a| (1.0 - a).sqrt()).collect();
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
            gamma,
            sigma,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn idx(&self, t: usize) -> usize {
        assert!(t >= 1 && t <= self.steps(), "timestep {t} outside [1, {}]", self.steps());
        t - 1
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t >= 1 && t <= self.steps() {
            Ok(())
        } else {
            Err(contract!("timestep {t} outside [1, {}]", self.steps()))
        }
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[self.idx(t)]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[self.idx(t)]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[self.idx(t)]
    }

    /// Signal coefficient `√ᾱ_t`.
    pub fn gamma(&self, t: usize) -> f64 {
        self.gamma[self.idx(t)]
    }

    /// Noise coefficient `√(1 − ᾱ_t)`.
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[self.idx(t)]
    }

    /// `t / T`, the network's time input.
    pub fn tau(&self, t: usize) -> f64 {
        t as f64 / self.steps() as f64
    }

    /// Uniform draw from `{1, …, T}`.
    pub fn sample_t(&self, rng: &mut impl Rng) -> usize {
        rng.random_range(1..=self.steps())
    }
}

/// `m_t = γ_t x0 + σ_t ε` row by row, with row `i` at timestep `ts[i]`.
pub fn noised(schedule: &NoiseSchedule, x0: &Tensor, ts: &[usize], eps: &Tensor) -> Result<Tensor> {
    if !x0.same_shape(eps) || x0.rows() != ts.len() {
        return Err(contract!(
            "noised: x0 {:?}, eps {:?}, {} timesteps",
            x0.shape(),
            eps.shape(),
            ts.len()
        ));
    }
    let d = x0.cols();
    let mut data = Vec::with_capacity(x0.len());
    for (i, &t) in ts.iter().enumerate() {
        schedule.check_t(t)?;
        let (g, s) = (schedule.gamma(t), schedule.sigma(t));
        for j in 0..d {
            data.push(g * x0.row(i)[j] + s * eps.row(i)[j]);
        }
    }
    Tensor::matrix(x0.rows(), d, data)
}

/// Draws `ε ~ N(0, I)` and returns `(m_t, ε)` for every row of `x0` at step `t`.
pub fn forward_marginal(
    schedule: &NoiseSchedule,
    x0: &Tensor,
    t: usize,
    rng: &mut impl Rng,
) -> Result<(Tensor, Tensor)> {
    schedule.check_t(t)?;
    let eps = normal_tensor(rng, x0.rows(), x0.cols());
    let ts = vec![t; x0.rows()];
    Ok((noised(schedule, x0, &ts, &eps)?, eps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn single_step_coefficients() {
        let s = NoiseSchedule::linear(1, 1e-4, 1e-4).unwrap();
        assert!((s.alpha_bar(1) - 0.9999).abs() < 1e-15);
        assert!((s.gamma(1) - 0.99995).abs() < 1e-8);
        assert!((s.sigma(1) - 0.01).abs() < 1e-12);
    }

    #[test]
    fn identity_and_monotonicity() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        for t in 1..=100 {
            assert!((s.gamma(t).powi(2) + s.sigma(t).powi(2) - 1.0).abs() < 1e-12);
            assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
            if t > 1 {
                assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            }
        }
        assert!(s.alpha_bar(100) < s.alpha_bar(1));
    }

    #[test]
    fn invalid_ranges_are_config_errors() {
        for (t, a, b) in [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)] {
            assert!(matches!(NoiseSchedule::linear(t, a, b), Err(crate::Error::Config(_))));
        }
    }

    #[test]
    fn marginal_special_cases_and_inversion() {
        let s = NoiseSchedule::linear(10, 1e-3, 0.2).unwrap();
        let x0 = Tensor::matrix(2, 2, vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let zero = Tensor::zeros(&[2, 2]);
        let m = noised(&s, &x0, &[4, 4], &zero).unwrap();
        assert_eq!(m, x0.map(|v| v * s.gamma(4)));
        let eps = Tensor::matrix(2, 2, vec![0.3, -0.1, 2.0, 0.0]).unwrap();
        let m = noised(&s, &zero, &[7, 7], &eps).unwrap();
        assert_eq!(m, eps.map(|v| v * s.sigma(7)));

        let mut rng = substream(1, "test");
        let (m, eps) = forward_marginal(&s, &x0, 5, &mut rng).unwrap();
        for i in 0..m.len() {
            let rec = (m.data()[i] - s.gamma(5) * x0.data()[i]) / s.sigma(5);
            assert!((rec - eps.data()[i]).abs() < 1e-12);
        }
        assert!(forward_marginal(&s, &x0, 0, &mut rng).is_err());
        assert!(forward_marginal(&s, &x0, 11, &mut rng).is_err());
    }
}
