//! Sample-quality and forgetting metrics on raw feature vectors.

mod ssim;

pub use ssim::ssim;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::GaussMixtureSpec;
use crate::error::{contract, Result};
use crate::tensor::Tensor;

const JITTER: f64 = 1e-6;

/// Mean and unbiased covariance of a sample set, with `1e-6` added to the
/// covariance diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFit {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianFit {
    pub fn fit(set: &Tensor) -> Result<Self> {
        let (n, d) = set.dims2()?;
        if n < 2 {
            return Err(contract!("a Gaussian fit needs at least 2 samples, got {n}"));
        }
        let x = DMatrix::from_row_slice(n, d, set.data());
        let mean = x.row_mean().transpose();
        let mut centered = x;
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let mut cov = centered.transpose() * &centered / (n as f64 - 1.0);
        for i in 0..d {
            cov[(i, i)] += JITTER;
        }
        Ok(Self { mean, cov })
    }
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `Tr((Σ_A Σ_B)^{1/2})`.
fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    if a.nrows() == 2 {
        // for 2x2 M with real non-negative eigenvalues, tr √M = √(tr M + 2√det M)
        let m = a * b;
        let det = m.determinant().max(0.0);
        return (m.trace() + 2.0 * det.sqrt()).max(0.0).sqrt();
    }
    let ra = sym_sqrt(a);
    let s = &ra * b * &ra;
    let s = (&s + s.transpose()) * 0.5;
    SymmetricEigen::new(s).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum()
}

pub fn frechet_fits(a: &GaussianFit, b: &GaussianFit) -> f64 {
    let dm = (&a.mean - &b.mean).norm_squared();
    let tr = a.cov.trace() + b.cov.trace() - 2.0 * trace_sqrt_product(&a.cov, &b.cov);
    (dm + tr).max(0.0)
}

/// Fréchet distance between Gaussian fits of two sample sets.
pub fn frechet(a: &Tensor, b: &Tensor) -> Result<f64> {
    let d = a.cols();
    if b.cols() != d {
        return Err(contract!("frechet: dimensions {d} and {}", b.cols()));
    }
    if a.rows() < d + 1 || b.rows() < d + 1 {
        return Err(contract!("frechet needs at least d+1 = {} samples per set", d + 1));
    }
    Ok(frechet_fits(&GaussianFit::fit(a)?, &GaussianFit::fit(b)?))
}

fn poly_kernel(x: &[f64], y: &[f64]) -> f64 {
    let d = x.len() as f64;
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (dot / d + 1.0).powi(3)
}

/// Unbiased MMD² with the cubic polynomial kernel `(xᵀy/d + 1)³`.
pub fn kid_mmd(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (m, n) = (a.rows(), b.rows());
    if m < 2 || n < 2 || a.cols() != b.cols() {
        return Err(contract!(
            "kid_mmd needs two sets of at least 2 samples with equal dimension"
        ));
    }
    let within = |s: &Tensor| {
        let r = s.rows();
        let mut acc = 0.0;
        for i in 0..r {
            for j in 0..r {
                if i != j {
                    acc += poly_kernel(s.row(i), s.row(j));
                }
            }
        }
        acc / (r * (r - 1)) as f64
    };
    let mut cross = 0.0;
    for i in 0..m {
        for j in 0..n {
            cross += poly_kernel(a.row(i), b.row(j));
        }
    }
    Ok(within(a) + within(b) - 2.0 * cross / (m * n) as f64)
}

/// Fraction of `samples` the exact Bayes posterior of `class` attributes to a
/// contaminant component with probability above one half.
pub fn forget_rate(samples: &Tensor, spec: &GaussMixtureSpec, class: usize) -> Result<f64> {
    if samples.rows() == 0 {
        return Err(contract!("forget_rate of an empty sample set"));
    }
    let mut hits = 0usize;
    for i in 0..samples.rows() {
        if spec.contaminant_posterior(class, samples.row(i))? > 0.5 {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.rows() as f64)
}

/// Fraction of `samples` the Bayes classifier (equal class priors) assigns
/// to `class`.
pub fn class_rate(samples: &Tensor, spec: &GaussMixtureSpec, class: usize) -> Result<f64> {
    if samples.rows() == 0 {
        return Err(contract!("class_rate of an empty sample set"));
    }
    let hits = (0..samples.rows()).filter(|&i| spec.classify(samples.row(i)) == class).count();
    Ok(hits as f64 / samples.rows() as f64)
}

/// Metrics of one generation condition against its reference set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionMetrics {
    pub condition: usize,
    pub role: String,
    pub samples: usize,
    pub frechet: f64,
    pub kid: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub forget_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub override_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ssim: Option<f64>,
}

/// Per-condition metrics plus retain-set and forget-set summaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub seed: u64,
    pub feature_space: String,
    pub samples_per_condition: usize,
    pub forget_condition: usize,
    /// Mean Fréchet distance over retain conditions.
    pub retain_frechet: f64,
    /// Mean kernel MMD over retain conditions.
    pub retain_kid: f64,
    pub forget_frechet: f64,
    pub forget_rate: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub override_rate: Option<f64>,
    pub conditions: Vec<ConditionMetrics>,
}

impl MetricReport {
    /// Flattened `(key, value)` pairs in a fixed order for CSV output.
    pub fn flatten(&self) -> Vec<(String, f64)> {
        let mut out = vec![
            ("retain_frechet".to_string(), self.retain_frechet),
            ("retain_kid".to_string(), self.retain_kid),
            ("forget_frechet".to_string(), self.forget_frechet),
            ("forget_rate".to_string(), self.forget_rate),
        ];
        if let Some(r) = self.override_rate {
            out.push(("override_rate".to_string(), r));
        }
        for c in &self.conditions {
            out.push((format!("c{}_frechet", c.condition), c.frechet));
            out.push((format!("c{}_kid", c.condition), c.kid));
            if let Some(s) = c.ssim {
                out.push((format!("c{}_ssim", c.condition), s));
            }
        }
        out
    }
}

/// Builds a report from generated samples and reference samples per class.
/// The forget condition also gets the Bayes-oracle forget rate (and the rate
/// of samples classified as `override_class`, when given).
pub fn evaluate(
    generated: &[Tensor],
    reference: &[Tensor],
    spec: &GaussMixtureSpec,
    forget_class: usize,
    override_class: Option<usize>,
    seed: u64,
) -> Result<MetricReport> {
    if generated.len() != reference.len() || forget_class >= generated.len() {
        return Err(contract!("evaluate: one generated and one reference set per class"));
    }
    let mut conditions = Vec::new();
    let mut forget_rate_v = 0.0;
    let mut override_rate = None;
    for (c, (gset, rset)) in generated.iter().zip(reference).enumerate() {
        let forget = c == forget_class;
        let mut cm = ConditionMetrics {
            condition: c,
            role: if forget { "forget" } else { "retain" }.into(),
            samples: gset.rows(),
            frechet: frechet(gset, rset)?,
            kid: kid_mmd(gset, rset)?,
            forget_rate: None,
            override_rate: None,
            ssim: None,
        };
        if forget {
            forget_rate_v = forget_rate(gset, spec, c)?;
            cm.forget_rate = Some(forget_rate_v);
            if let Some(o) = override_class {
                let r = class_rate(gset, spec, o)?;
                cm.override_rate = Some(r);
                override_rate = Some(r);
            }
        }
        conditions.push(cm);
    }
    let retain: Vec<&ConditionMetrics> = conditions.iter().filter(|c| c.condition != forget_class).collect();
    let mean = |f: &dyn Fn(&ConditionMetrics) -> f64| retain.iter().map(|c| f(c)).sum::<f64>() / retain.len().max(1) as f64;
    Ok(MetricReport {
        seed,
        feature_space: "raw".into(),
        samples_per_condition: generated.iter().map(Tensor::rows).min().unwrap_or(0),
        forget_condition: forget_class,
        retain_frechet: mean(&|c| c.frechet),
        retain_kid: mean(&|c| c.kid),
        forget_frechet: conditions[forget_class].frechet,
        forget_rate: forget_rate_v,
        override_rate,
        conditions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{class_mean, gen_contam2d, MixtureComponent};
    use crate::rng::{normal_tensor, substream};

    #[test]
    fn frechet_identity_symmetry_and_one_d_case() {
        let mut rng = substream(0, "test");
        let a = normal_tensor(&mut rng, 200, 2);
        let b = normal_tensor(&mut rng, 150, 2).map(|v| 1.5 * v + 0.3);
        assert!(frechet(&a, &a).unwrap().abs() < 1e-8);
        assert!((frechet(&a, &b).unwrap() - frechet(&b, &a).unwrap()).abs() < 1e-8);

        let x = Tensor::column(vec![-1.0, 0.0, 1.0]);
        let y = Tensor::column(vec![0.0, 1.0, 2.0]);
        assert!((frechet(&x, &y).unwrap() - 1.0).abs() < 1e-12);
        assert!(frechet(&Tensor::column(vec![1.0]), &y).is_err());
    }

    #[test]
    fn general_dimension_path_agrees_with_closed_form() {
        let mut rng = substream(1, "test");
        let a = normal_tensor(&mut rng, 300, 2);
        let b = normal_tensor(&mut rng, 300, 2).map(|v| 0.7 * v);
        let (fa, fb) = (GaussianFit::fit(&a).unwrap(), GaussianFit::fit(&b).unwrap());
        let closed = trace_sqrt_product(&fa.cov, &fb.cov);
        let ra = sym_sqrt(&fa.cov);
        let s = &ra * &fb.cov * &ra;
        let general: f64 = SymmetricEigen::new((&s + s.transpose()) * 0.5)
            .eigenvalues
            .iter()
            .map(|v| v.sqrt())
            .sum();
        assert!((closed - general).abs() < 1e-10);
    }

    #[test]
    fn frechet_is_rotation_invariant() {
        let mut rng = substream(2, "test");
        let a = normal_tensor(&mut rng, 100, 3).map(|v| v * 2.0);
        let b = normal_tensor(&mut rng, 100, 3);
        let th: f64 = 0.7;
        let rot = |t: &Tensor| {
            let rows: Vec<Vec<f64>> = t
                .to_rows()
                .into_iter()
                .map(|r| vec![th.cos() * r[0] - th.sin() * r[1], th.sin() * r[0] + th.cos() * r[1], r[2]])
                .collect();
            Tensor::from_rows(&rows).unwrap()
        };
        let d0 = frechet(&a, &b).unwrap();
        let d1 = frechet(&rot(&a), &rot(&b)).unwrap();
        assert!((d0 - d1).abs() < 1e-6);
    }

    #[test]
    fn kid_cases() {
        let z = Tensor::column(vec![0.0, 0.0]);
        assert_eq!(kid_mmd(&z, &z).unwrap(), 0.0);
        let mut rng = substream(3, "test");
        let a = normal_tensor(&mut rng, 400, 2);
        let v = kid_mmd(&a, &a).unwrap();
        assert!(v.abs() < 2.0 / (400f64).sqrt(), "v = {v}");
        let far = a.map(|x| x + 5.0);
        assert!(kid_mmd(&a, &far).unwrap() > 0.0);
    }

    #[test]
    fn kid_is_unbiased_over_resamples() {
        let mut rng = substream(4, "test");
        let vals: Vec<f64> = (0..200)
            .map(|_| {
                let a = normal_tensor(&mut rng, 30, 2);
                let b = normal_tensor(&mut rng, 30, 2);
                kid_mmd(&a, &b).unwrap()
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / 200.0;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 199.0).sqrt();
        assert!(mean.abs() < 2.0 * sd / (200f64).sqrt(), "mean {mean} sd {sd}");
    }

    #[test]
    fn forget_rate_cases() {
        let (_, spec) = gen_contam2d(0, 100, 1.0 / 11.0).unwrap();
        let m = class_mean(1);
        let at = |p: [f64; 2]| Tensor::from_rows(&vec![p.to_vec(); 10]).unwrap();
        assert_eq!(forget_rate(&at([-m[0], -m[1]]), &spec, 1).unwrap(), 1.0);
        assert_eq!(forget_rate(&at(m), &spec, 1).unwrap(), 0.0);
        assert!(forget_rate(&at(m), &spec, 0).is_err());

        let sym = GaussMixtureSpec {
            classes: vec![vec![
                MixtureComponent {
                    mean: vec![-1.0, 0.0],
                    std: 0.5,
                    weight: 0.5,
                    contaminant: false,
                },
                MixtureComponent {
                    mean: vec![1.0, 0.0],
                    std: 0.5,
                    weight: 0.5,
                    contaminant: true,
                },
            ]],
        };
        let mut rows = Vec::new();
        for i in 0..50 {
            let y = i as f64 * 0.1;
            rows.push(vec![1e-9, y]);
            rows.push(vec![-1e-9, y]);
        }
        let s = Tensor::from_rows(&rows).unwrap();
        assert_eq!(forget_rate(&s, &sym, 0).unwrap(), 0.5);
        let rev = s.gather_rows(&(0..100).rev().collect::<Vec<_>>());
        assert_eq!(forget_rate(&rev, &sym, 0).unwrap(), 0.5);
    }
}
