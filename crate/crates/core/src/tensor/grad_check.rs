use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Bound, Graph, NodeId, ParamSet};
use crate::error::Result;

/// Gradients smaller than `HEADROOM` times the rounding error of the central
/// difference, `ε·max(|f|, 1)/h`, are compared on that scale instead.
const HEADROOM: f64 = 1e6;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step `h`.
    pub step: f64,
    /// Cap on coordinates checked per tensor; `None` checks every coordinate.
    pub max_coords_per_tensor: Option<usize>,
    /// Seed for choosing coordinates when capped.
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_coords_per_tensor: None,
            seed: 0,
        }
    }
}

fn evaluate<F>(params: &ParamSet, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &Bound) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let bound = g.bind(params, false);
    let root = f(&mut g, &bound)?;
    Ok(g.scalar(root))
}

/// Compares reverse-mode gradients of the scalar `f(params)` against central
/// differences `(f(x+h) - f(x-h)) / 2h`, coordinate by coordinate, and returns
/// the largest relative error. Coordinates whose gradient is below the
/// resolution of the difference quotient are scaled by that resolution.
pub fn grad_check<F>(params: &ParamSet, f: F, opts: &GradCheckOptions) -> Result<f64>
where
    F: Fn(&mut Graph, &Bound) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let bound = g.bind(params, true);
    let root = f(&mut g, &bound)?;
    let grads = g.backward(root)?.collect(bound.ids());
    let h = opts.step;
    let floor = HEADROOM * f64::EPSILON * g.scalar(root).abs().max(1.0) / h;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for (ti, grad) in grads.iter().enumerate() {
        let n = grad.len();
        let coords: Vec<usize> = match opts.max_coords_per_tensor {
            Some(cap) if cap < n => sample(&mut rng, n, cap).into_vec(),
            _ => (0..n).collect(),
        };
        for ci in coords {
            let x0 = params.get(ti).data()[ci];
            probe.tensors_mut()[ti].data_mut()[ci] = x0 + h;
            let fp = evaluate(&probe, &f)?;
            probe.tensors_mut()[ti].data_mut()[ci] = x0 - h;
            let fm = evaluate(&probe, &f)?;
            probe.tensors_mut()[ti].data_mut()[ci] = x0;

            let numeric = (fp - fm) / (2.0 * h);
            let analytic = grad.data()[ci];
            let scale = analytic.abs().max(numeric.abs()).max(floor);
            worst = worst.max((analytic - numeric).abs() / scale);
        }
    }
    Ok(worst)
}
