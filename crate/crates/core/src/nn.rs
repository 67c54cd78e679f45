//! Multilayer perceptrons on top of the autodiff graph.

use rand::Rng;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::rng::normal;
use crate::tensor::{Bound, Graph, NodeId, ParamSet, Tensor};

/// Appends a dense layer (`w: [fan_in, fan_out]`, `b: [1, fan_out]`) with
/// LeCun-normal weights scaled by `gain`. Returns the weight index.
pub fn push_dense(
    params: &mut ParamSet,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    gain: f64,
    rng: &mut impl Rng,
) -> usize {
    let std = gain / (fan_in as f64).sqrt();
    let w = (0..fan_in * fan_out).map(|_| std * normal(rng)).collect();
    let wi = params.push(format!("{prefix}.w"), Tensor::matrix(fan_in, fan_out, w).expect("shape"));
    params.push(format!("{prefix}.b"), Tensor::zeros(&[1, fan_out]));
    wi
}

/// `x · w + b` with parameters at `bound[wi]`, `bound[wi + 1]`.
pub fn dense(g: &mut Graph, bound: &Bound, wi: usize, x: NodeId) -> Result<NodeId> {
    let h = g.matmul(x, bound.get(wi))?;
    g.add_row(h, bound.get(wi + 1))
}

/// Tanh MLP with a linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    pub params: ParamSet,
}

impl Mlp {
    /// `sizes = [input, hidden..., output]`.
    pub fn new(sizes: &[usize], rng: &mut impl Rng) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let mut params = ParamSet::new();
        for (l, w) in sizes.windows(2).enumerate() {
            push_dense(&mut params, &format!("l{l}"), w[0], w[1], 1.0, rng);
        }
        Self {
            sizes: sizes.to_vec(),
            params,
        }
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("nonempty")
    }

    /// Zeroes the output layer's weights and sets its bias.
    pub fn set_output_layer(&mut self, bias: &[f64]) {
        let layers = self.sizes.len() - 1;
        let wi = 2 * (layers - 1);
        let t = self.params.tensors_mut();
        t[wi].data_mut().iter_mut().for_each(|v| *v = 0.0);
        t[wi + 1].data_mut().copy_from_slice(bias);
    }

    pub fn forward(&self, g: &mut Graph, bound: &Bound, x: NodeId) -> Result<NodeId> {
        let layers = self.sizes.len() - 1;
        let mut h = x;
        for l in 0..layers {
            h = dense(g, bound, 2 * l, h)?;
            if l + 1 < layers {
                h = g.tanh(h);
            }
        }
        Ok(h)
    }

    /// Forward pass without gradient tracking.
    pub fn eval(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = g.bind(&self.params, false);
        let xi = g.constant(x.clone());
        let out = self.forward(&mut g, &bound, xi)?;
        Ok(g.value(out).clone())
    }
}

/// Sinusoidal features of `tau` in `[0, 1]`: `dim / 2` sine/cosine pairs with
/// frequencies spaced geometrically from 1 to 1000.
pub fn time_features(tau: &[f64], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(tau.len() * dim);
    for &s in tau {
        for i in 0..half {
            let w = if half > 1 {
                1000f64.powf(i as f64 / (half - 1) as f64)
            } else {
                1.0
            };
            data.push((w * s).sin());
            data.push((w * s).cos());
        }
        if dim % 2 == 1 {
            data.push(s);
        }
    }
    Tensor::matrix(tau.len(), dim, data).expect("shape")
}

/// One-hot rows for `labels` over `classes`.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &c) in labels.iter().enumerate() {
        if c >= classes {
            return Err(contract!("label {c} out of range for {classes} classes"));
        }
        data[i * classes + c] = 1.0;
    }
    Tensor::matrix(labels.len(), classes, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CondNetConfig {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden: usize,
    /// Width of the sinusoidal time embedding; 0 for no time input.
    pub time_dim: usize,
    /// Number of classes; 0 for an unconditional network.
    pub classes: usize,
    pub class_dim: usize,
}

impl CondNetConfig {
    /// Two hidden layers of 128, 32-dim time features, 16-dim class table.
    pub fn standard(input_dim: usize, output_dim: usize, time: bool, classes: usize) -> Self {
        Self {
            input_dim,
            output_dim,
            hidden: 128,
            time_dim: if time { 32 } else { 0 },
            classes,
            class_dim: 16,
        }
    }
}

/// Tanh MLP over `input ⊕ time features`, with a learned class embedding
/// projected into and added to the first hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CondNet {
    config: CondNetConfig,
    pub params: ParamSet,
}

const EMBED: usize = 6;
const PROJ: usize = 7;

impl CondNet {
    pub fn new(config: CondNetConfig, rng: &mut impl Rng) -> Self {
        let mut params = ParamSet::new();
        let c = &config;
        push_dense(&mut params, "l0", c.input_dim + c.time_dim, c.hidden, 1.0, rng);
        push_dense(&mut params, "l1", c.hidden, c.hidden, 1.0, rng);
        push_dense(&mut params, "out", c.hidden, c.output_dim, 1.0, rng);
        if c.classes > 0 {
            let embed = (0..c.classes * c.class_dim).map(|_| normal(rng)).collect();
            params.push("embed", Tensor::matrix(c.classes, c.class_dim, embed).expect("shape"));
            let std = 1.0 / (c.class_dim as f64).sqrt();
            let proj = (0..c.class_dim * c.hidden).map(|_| std * normal(rng)).collect();
            params.push("proj", Tensor::matrix(c.class_dim, c.hidden, proj).expect("shape"));
        }
        Self { config, params }
    }

    pub fn config(&self) -> &CondNetConfig {
        &self.config
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &Bound,
        x: NodeId,
        tau: Option<&[f64]>,
        labels: Option<&[usize]>,
    ) -> Result<NodeId> {
        let c = &self.config;
        let rows = g.value(x).rows();
        let input = if c.time_dim > 0 {
            let tau = tau.ok_or_else(|| contract!("network expects timesteps"))?;
            if tau.len() != rows {
                return Err(contract!("{} timesteps for {rows} rows", tau.len()));
            }
            let tf = g.constant(time_features(tau, c.time_dim));
            g.concat(x, tf)?
        } else {
            x
        };
        let mut h = dense(g, bound, 0, input)?;
        if c.classes > 0 {
            let labels = labels.ok_or_else(|| contract!("network expects class labels"))?;
            if labels.len() != rows {
                return Err(contract!("{} labels for {rows} rows", labels.len()));
            }
            let oh = g.constant(one_hot(labels, c.classes)?);
            let e = g.matmul(oh, bound.get(EMBED))?;
            let e = g.matmul(e, bound.get(PROJ))?;
            h = g.add(h, e)?;
        }
        let h = g.tanh(h);
        let h = dense(g, bound, 2, h)?;
        let h = g.tanh(h);
        dense(g, bound, 4, h)
    }

    /// Forward pass without gradient tracking.
    pub fn eval(&self, x: &Tensor, tau: Option<&[f64]>, labels: Option<&[usize]>) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = g.bind(&self.params, false);
        let xi = g.constant(x.clone());
        let out = self.forward(&mut g, &bound, xi, tau, labels)?;
        Ok(g.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_tensor, substream};
    use crate::tensor::{grad_check, GradCheckOptions};

    #[test]
    fn mse_of_two_layer_tanh_net_passes_grad_check() {
        let mut rng = substream(3, "test");
        let net = Mlp::new(&[3, 8, 8, 2], &mut rng);
        let x = normal_tensor(&mut rng, 5, 3);
        let y = normal_tensor(&mut rng, 5, 2);
        let err = grad_check(
            &net.params,
            |g, b| {
                let xi = g.constant(x.clone());
                let yi = g.constant(y.clone());
                let out = net.forward(g, b, xi)?;
                let d = g.sub(out, yi)?;
                let sq = g.square(d);
                g.mean(sq)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(err < 1e-5, "err = {err}");
    }

    #[test]
    fn conditional_net_passes_grad_check() {
        let mut rng = substream(5, "test");
        let net = CondNet::new(
            CondNetConfig {
                input_dim: 2,
                output_dim: 2,
                hidden: 12,
                time_dim: 6,
                classes: 3,
                class_dim: 4,
            },
            &mut rng,
        );
        let x = normal_tensor(&mut rng, 4, 2);
        let tau = [0.1, 0.5, 0.9, 1.0];
        let labels = [0, 2, 1, 2];
        let err = grad_check(
            &net.params,
            |g, b| {
                let xi = g.constant(x.clone());
                let out = net.forward(g, b, xi, Some(&tau), Some(&labels))?;
                let sq = g.square(out);
                g.mean(sq)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(err < 1e-5, "err = {err}");
    }

    #[test]
    fn missing_labels_or_bad_label_is_contract_error() {
        let mut rng = substream(5, "test");
        let net = CondNet::new(CondNetConfig::standard(2, 2, true, 4), &mut rng);
        let x = normal_tensor(&mut rng, 1, 2);
        assert!(net.eval(&x, Some(&[0.5]), None).is_err());
        assert!(net.eval(&x, Some(&[0.5]), Some(&[4])).is_err());
        assert_eq!(net.eval(&x, Some(&[0.5]), Some(&[3])).unwrap().shape(), &[1, 2]);
    }

    #[test]
    fn time_features_are_bounded_pairs() {
        let f = time_features(&[0.0, 1.0], 32);
        assert_eq!(f.shape(), &[2, 32]);
        assert_eq!(f.row(0)[0], 0.0);
        assert_eq!(f.row(0)[1], 1.0);
        assert!(f.data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn output_layer_override() {
        let mut rng = substream(1, "test");
        let mut net = Mlp::new(&[2, 4, 2], &mut rng);
        net.set_output_layer(&[0.5, -1.0]);
        let out = net.eval(&normal_tensor(&mut rng, 3, 2)).unwrap();
        for r in 0..3 {
            assert_eq!(out.row(r), &[0.5, -1.0]);
        }
    }
}
