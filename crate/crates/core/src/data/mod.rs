//! Contaminated synthetic mixtures, forget/retain splits, and IDX rasters.

mod idx;

pub use idx::{load_idx, parse_idx_images, parse_idx_labels, write_idx_images, write_idx_labels, IdxImages};

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract, Result};
use crate::rng::{normal, substream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Clean,
    Contaminant,
}

/// Points `[N, d]` with a class label and provenance tag per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub points: Tensor,
    pub labels: Vec<usize>,
    pub provenance: Vec<Provenance>,
    pub classes: usize,
}

impl LabeledDataset {
    pub fn new(points: Tensor, labels: Vec<usize>, provenance: Vec<Provenance>, classes: usize) -> Result<Self> {
        let n = points.rows();
        if labels.len() != n || provenance.len() != n {
            return Err(contract!(
                "{n} points, {} labels, {} provenance tags",
                labels.len(),
                provenance.len()
            ));
        }
        if let Some(&c) = labels.iter().find(|&&c| c >= classes) {
            return Err(contract!("label {c} out of range for {classes} classes"));
        }
        Ok(Self {
            points,
            labels,
            provenance,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    /// Rows with the given label.
    pub fn class_points(&self, class: usize) -> Tensor {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == class).collect();
        self.points.gather_rows(&idx)
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            points: self.points.gather_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            provenance: idx.iter().map(|&i| self.provenance[i]).collect(),
            classes: self.classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub mean: Vec<f64>,
    pub std: f64,
    pub weight: f64,
    pub contaminant: bool,
}

/// Per-class isotropic Gaussian mixtures: the analytic ground truth of the
/// synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussMixtureSpec {
    pub classes: Vec<Vec<MixtureComponent>>,
}

fn log_normal_iso(x: &[f64], mean: &[f64], var: f64) -> f64 {
    let d = x.len() as f64;
    let sq: f64 = x.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
    -0.5 * sq / var - 0.5 * d * (2.0 * PI * var).ln()
}

/// `log Σ exp(v)`, with `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl GaussMixtureSpec {
    pub fn validate(&self) -> Result<()> {
        for (c, comps) in self.classes.iter().enumerate() {
            if comps.is_empty() {
                return Err(config_err!("class {c} has no components"));
            }
            let total: f64 = comps.iter().map(|m| m.weight).sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(config_err!("class {c} weights sum to {total}"));
            }
            if comps.iter().any(|m| !(m.std > 0.0) || m.weight < 0.0) {
                return Err(config_err!("class {c} has a non-positive std or negative weight"));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn dim(&self) -> usize {
        self.classes[0][0].mean.len()
    }

    /// Per-component `log w_j + log N(z; γ μ_j, (γ² s_j² + σ²) I)`, the
    /// component terms of the class density after noising with `(γ, σ)`.
    /// `(1, 0)` gives the clean density.
    pub fn noisy_component_logs(&self, class: usize, z: &[f64], gamma: f64, sigma: f64) -> Vec<f64> {
        self.classes[class]
            .iter()
            .map(|c| {
                let mean: Vec<f64> = c.mean.iter().map(|m| gamma * m).collect();
                let var = gamma * gamma * c.std * c.std + sigma * sigma;
                c.weight.ln() + log_normal_iso(z, &mean, var)
            })
            .collect()
    }

    pub fn noisy_class_log_density(&self, class: usize, z: &[f64], gamma: f64, sigma: f64) -> f64 {
        log_sum_exp(&self.noisy_component_logs(class, z, gamma, sigma))
    }

    pub fn class_log_density(&self, class: usize, x: &[f64]) -> f64 {
        self.noisy_class_log_density(class, x, 1.0, 0.0)
    }

    /// Posterior probability that `x` came from a contaminant component of
    /// `class`.
    pub fn contaminant_posterior(&self, class: usize, x: &[f64]) -> Result<f64> {
        let comps = self
            .classes
            .get(class)
            .ok_or_else(|| config_err!("class {class} not in the mixture"))?;
        if comps.len() < 2 || !comps.iter().any(|c| c.contaminant) {
            return Err(config_err!("class {class} has no contaminant component"));
        }
        let logs = self.noisy_component_logs(class, x, 1.0, 0.0);
        let total = log_sum_exp(&logs);
        let cont: Vec<f64> = logs
            .iter()
            .zip(comps)
            .filter(|(_, c)| c.contaminant)
            .map(|(l, _)| *l)
            .collect();
        Ok((log_sum_exp(&cont) - total).exp())
    }

    /// Bayes classification under equal class priors.
    pub fn classify(&self, x: &[f64]) -> usize {
        (0..self.num_classes())
            .map(|c| (c, self.class_log_density(c, x)))
            .fold((0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best })
            .0
    }
}

/// Number of classes in the synthetic task.
pub const CONTAM_CLASSES: usize = 4;
/// Class carrying the contaminant sub-cluster.
pub const CONTAMINATED_CLASS: usize = 1;
pub const CLUSTER_STD: f64 = 0.35;
pub const CIRCLE_RADIUS: f64 = 3.0;

/// Circle position of `class`. Angles are spaced by `2π/(C+1)` so the
/// reflection of class 1 through the origin does not land on another class.
pub fn class_mean(class: usize) -> [f64; 2] {
    let a = 2.0 * PI * class as f64 / (CONTAM_CLASSES + 1) as f64;
    [CIRCLE_RADIUS * a.cos(), CIRCLE_RADIUS * a.sin()]
}

/// Four isotropic 2-D clusters; class 1 holds `round(count / (1 − ratio))`
/// items of which `round(size · ratio)` sit at the reflection of its mean.
pub fn gen_contam2d(seed: u64, count: usize, ratio: f64) -> Result<(LabeledDataset, GaussMixtureSpec)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(contract!("contamination ratio must be in (0, 1), got {ratio}"));
    }
    if count < 20 {
        return Err(contract!("per-class count must be at least 20, got {count}"));
    }
    let mut rng = substream(seed, "data");
    let class1_size = (count as f64 / (1.0 - ratio)).round() as usize;
    let n_contam = (class1_size as f64 * ratio).round() as usize;

    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut prov = Vec::new();
    let mut spec = Vec::new();
    let mut draw = |mean: [f64; 2], n: usize, class: usize, p: Provenance, rng: &mut crate::rng::StreamRng| {
        for _ in 0..n {
            rows.push(vec![
                mean[0] + CLUSTER_STD * normal(rng),
                mean[1] + CLUSTER_STD * normal(rng),
            ]);
            labels.push(class);
            prov.push(p);
        }
    };
    for c in 0..CONTAM_CLASSES {
        let mean = class_mean(c);
        if c == CONTAMINATED_CLASS {
            let reflected = [-mean[0], -mean[1]];
            draw(mean, class1_size - n_contam, c, Provenance::Clean, &mut rng);
            draw(reflected, n_contam, c, Provenance::Contaminant, &mut rng);
            let mut comps = vec![MixtureComponent {
                mean: mean.to_vec(),
                std: CLUSTER_STD,
                weight: if n_contam > 0 { 1.0 - ratio } else { 1.0 },
                contaminant: false,
            }];
            if n_contam > 0 {
                comps.push(MixtureComponent {
                    mean: reflected.to_vec(),
                    std: CLUSTER_STD,
                    weight: ratio,
                    contaminant: true,
                });
            }
            spec.push(comps);
        } else {
            draw(mean, count, c, Provenance::Clean, &mut rng);
            spec.push(vec![MixtureComponent {
                mean: mean.to_vec(),
                std: CLUSTER_STD,
                weight: 1.0,
                contaminant: false,
            }]);
        }
    }
    let data = LabeledDataset::new(Tensor::from_rows(&rows)?, labels, prov, CONTAM_CLASSES)?;
    Ok((data, GaussMixtureSpec { classes: spec }))
}

/// Forget indices (contaminants) and retain indices (everything else).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForgetSplit {
    pub forget: Vec<usize>,
    pub retain: Vec<usize>,
}

impl ForgetSplit {
    /// Dataset size `n`.
    pub fn n(&self) -> usize {
        self.forget.len() + self.retain.len()
    }

    /// Forget-set size `k`.
    pub fn k(&self) -> usize {
        self.forget.len()
    }
}

pub fn split_forget_retain(data: &LabeledDataset) -> Result<ForgetSplit> {
    let (forget, retain): (Vec<usize>, Vec<usize>) =
        (0..data.len()).partition(|&i| data.provenance[i] == Provenance::Contaminant);
    if forget.is_empty() {
        return Err(config_err!("dataset has no contaminant items to forget"));
    }
    if retain.is_empty() {
        return Err(config_err!("every item is a contaminant; nothing to retain"));
    }
    Ok(ForgetSplit { forget, retain })
}

/// Draws `n` indices uniformly with replacement from `pool`.
pub fn draw_indices(pool: &[usize], n: usize, rng: &mut impl Rng) -> Vec<usize> {
    (0..n).map(|_| pool[rng.random_range(0..pool.len())]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_ratio_gives_hundred_contaminants() {
        let (data, spec) = gen_contam2d(0, 1000, 1.0 / 11.0).unwrap();
        let class1 = data.labels.iter().filter(|&&c| c == 1).count();
        let contam = data.provenance.iter().filter(|&&p| p == Provenance::Contaminant).count();
        assert_eq!(class1, 1100);
        assert_eq!(contam, 100);
        spec.validate().unwrap();
        assert_eq!(spec.classes[1].len(), 2);
        assert!((spec.classes[1][1].weight - 1.0 / 11.0).abs() < 1e-15);

        let split = split_forget_retain(&data).unwrap();
        assert_eq!(split.n(), 4100);
        assert_eq!(split.k(), 100);
    }

    #[test]
    fn tiny_ratio_degenerates_to_single_component() {
        let (data, spec) = gen_contam2d(0, 100, 1e-6).unwrap();
        assert!(data.provenance.iter().all(|&p| p == Provenance::Clean));
        assert_eq!(spec.classes[1].len(), 1);
        spec.validate().unwrap();
        assert!(split_forget_retain(&data).is_err());
    }

    #[test]
    fn same_seed_same_dataset() {
        assert_eq!(gen_contam2d(5, 50, 0.1).unwrap(), gen_contam2d(5, 50, 0.1).unwrap());
        assert_ne!(gen_contam2d(5, 50, 0.1).unwrap().0, gen_contam2d(6, 50, 0.1).unwrap().0);
    }

    #[test]
    fn clean_cluster_means_are_close_to_spec() {
        let count = 1000;
        let (data, _) = gen_contam2d(1, count, 1.0 / 11.0).unwrap();
        for c in 0..CONTAM_CLASSES {
            let idx: Vec<usize> = (0..data.len())
                .filter(|&i| data.labels[i] == c && data.provenance[i] == Provenance::Clean)
                .collect();
            let pts = data.points.gather_rows(&idx);
            let mean = class_mean(c);
            for j in 0..2 {
                let m: f64 = (0..pts.rows()).map(|i| pts.row(i)[j]).sum::<f64>() / pts.rows() as f64;
                assert!((m - mean[j]).abs() < 3.0 * CLUSTER_STD / (count as f64).sqrt());
            }
        }
        assert!(data.points.data().iter().all(|v| v.abs() < 4.5));
    }

    #[test]
    fn split_is_a_partition_and_rejects_all_contaminant() {
        let (data, _) = gen_contam2d(2, 40, 0.2).unwrap();
        let split = split_forget_retain(&data).unwrap();
        let mut all: Vec<usize> = split.forget.iter().chain(&split.retain).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..data.len()).collect::<Vec<_>>());
        for &i in &split.forget {
            assert_eq!(data.provenance[i], Provenance::Contaminant);
        }

        let bad = LabeledDataset::new(
            Tensor::zeros(&[3, 2]),
            vec![0, 0, 0],
            vec![Provenance::Contaminant; 3],
            1,
        )
        .unwrap();
        assert!(split_forget_retain(&bad).is_err());
    }

    #[test]
    fn contaminant_posterior_at_means() {
        let (_, spec) = gen_contam2d(0, 100, 1.0 / 11.0).unwrap();
        let m = class_mean(1);
        assert!(spec.contaminant_posterior(1, &m).unwrap() < 1e-6);
        assert!(spec.contaminant_posterior(1, &[-m[0], -m[1]]).unwrap() > 1.0 - 1e-6);
        assert!(spec.contaminant_posterior(0, &m).is_err());
        for c in 0..4 {
            assert_eq!(spec.classify(&class_mean(c)), c);
        }
    }
}
