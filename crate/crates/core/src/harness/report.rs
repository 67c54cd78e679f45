//! Cross-run comparison tables and SVG plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::Method;
use super::run::{RunManifest, LAMBDA_FILE, METRICS_FILE, SAMPLES_FILE};
use crate::error::{Error, Result};
use crate::metrics::MetricReport;

/// One evaluated run as seen by the report.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub method: Method,
    pub seed: u64,
    pub metrics: Vec<(String, f64)>,
}

impl RunSummary {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = RunManifest::load(dir)?;
        let path = dir.join(METRICS_FILE);
        if !path.exists() {
            return Err(Error::MissingPrerequisite(path));
        }
        let report: MetricReport = serde_json::from_str(&fs::read_to_string(path)?)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            method: manifest.method,
            seed: manifest.seed,
            metrics: report.flatten(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricStat {
    pub metric: String,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodSummary {
    pub method: Method,
    pub seeds: Vec<u64>,
    pub metrics: Vec<MetricStat>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub methods: Vec<MethodSummary>,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-method mean ± std over runs. Every run of a method must report the
/// same metric keys.
pub fn summarize(runs: &[RunSummary]) -> Result<Report> {
    if runs.is_empty() {
        return Err(Error::Report("no completed runs".into()));
    }
    let mut groups: BTreeMap<Method, Vec<&RunSummary>> = BTreeMap::new();
    for r in runs {
        groups.entry(r.method).or_default().push(r);
    }
    let mut methods = Vec::new();
    for (method, mut group) in groups {
        group.sort_by_key(|r| r.seed);
        let keys: Vec<&str> = group[0].metrics.iter().map(|(k, _)| k.as_str()).collect();
        let offenders: Vec<String> = group
            .iter()
            .filter(|r| !r.metrics.iter().map(|(k, _)| k.as_str()).eq(keys.iter().copied()))
            .map(|r| r.dir.display().to_string())
            .collect();
        if !offenders.is_empty() {
            return Err(Error::Report(format!(
                "metric keys differ from {} in: {}",
                group[0].dir.display(),
                offenders.join(", ")
            )));
        }
        let metrics = keys
            .iter()
            .enumerate()
            .map(|(i, k)| {
                let values: Vec<f64> = group.iter().map(|r| r.metrics[i].1).collect();
                let (mean, std) = mean_std(&values);
                MetricStat {
                    metric: k.to_string(),
                    mean,
                    std,
                }
            })
            .collect();
        methods.push(MethodSummary {
            method,
            seeds: group.iter().map(|r| r.seed).collect(),
            metrics,
        });
    }
    Ok(Report { methods })
}

/// Subdirectories of `root` holding an evaluated run, sorted by name.
pub fn discover_runs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.join(METRICS_FILE).exists())
        .collect();
    dirs.sort();
    Ok(dirs)
}

/// Writes `report.csv`, `report.json`, one `scatter_<method>.svg` per method
/// and `lambda.svg` into `out`; returns the file names.
pub fn write_report(runs: &[PathBuf], out: &Path) -> Result<Vec<String>> {
    let summaries: Vec<RunSummary> = runs.iter().map(|d| RunSummary::load(d)).collect::<Result<_>>()?;
    let report = summarize(&summaries)?;
    fs::create_dir_all(out)?;

    let mut csv = String::from("method,metric,mean,std,runs\n");
    for m in &report.methods {
        for s in &m.metrics {
            writeln!(csv, "{},{},{},{},{}", m.method, s.metric, s.mean, s.std, m.seeds.len()).expect("string write");
        }
    }
    fs::write(out.join("report.csv"), csv)?;
    fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    let mut files = vec!["report.csv".to_string(), "report.json".to_string()];

    for m in &report.methods {
        let first = summaries
            .iter()
            .filter(|r| r.method == m.method)
            .min_by_key(|r| r.seed)
            .expect("method group is non-empty");
        let path = first.dir.join(SAMPLES_FILE);
        if path.exists() {
            let points = read_samples(&path)?;
            let name = format!("scatter_{}.svg", m.method);
            fs::write(out.join(&name), scatter_svg(&format!("{} samples (seed {})", m.method, first.seed), &points))?;
            files.push(name);
        }
    }

    let mut lines = Vec::new();
    for r in &summaries {
        let path = r.dir.join(LAMBDA_FILE);
        if path.exists() {
            let label = format!("{} seed {}", r.method, r.seed);
            lines.push((label, read_column(&path, "lambda")?));
        }
    }
    if !lines.is_empty() {
        fs::write(out.join("lambda.svg"), line_svg("λ trajectories", &lines))?;
        files.push("lambda.svg".into());
    }
    Ok(files)
}

/// `(class, x, y)` rows of a samples file; only the first two coordinates.
pub fn read_samples(path: &Path) -> Result<Vec<(usize, f64, f64)>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let bad = || Error::Report(format!("{}: malformed row {}", path.display(), i + 1));
        let mut f = line.split(',');
        let c = f.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let x = f.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let y = f.next().map_or(Some(0.0), |v| v.parse().ok()).ok_or_else(bad)?;
        out.push((c, x, y));
    }
    Ok(out)
}

/// Values of the named column of a CSV file with a header row.
pub fn read_column(path: &Path, column: &str) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let idx = header
        .split(',')
        .position(|h| h == column)
        .ok_or_else(|| Error::Report(format!("{} has no column {column}", path.display())))?;
    lines
        .map(|l| {
            l.split(',')
                .nth(idx)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Report(format!("{}: bad {column} value in {l:?}", path.display())))
        })
        .collect()
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"];
const SIZE: f64 = 480.0;
const PAD: f64 = 40.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn svg_open(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE}\" height=\"{SIZE}\" viewBox=\"0 0 {SIZE} {SIZE}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">{}</text>\n",
        SIZE / 2.0,
        escape(title)
    )
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    (lo, hi)
}

fn project(v: f64, (lo, hi): (f64, f64), flip: bool) -> f64 {
    let u = (v - lo) / (hi - lo);
    let u = if flip { 1.0 - u } else { u };
    PAD + u * (SIZE - 2.0 * PAD)
}

/// Scatter plot of 2-D points coloured by class.
pub fn scatter_svg(title: &str, points: &[(usize, f64, f64)]) -> String {
    let bx = bounds(points.iter().map(|p| p.1));
    let by = bounds(points.iter().map(|p| p.2));
    let mut s = svg_open(title);
    for &(c, x, y) in points.iter().filter(|p| p.1.is_finite() && p.2.is_finite()) {
        writeln!(
            s,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"1.5\" fill=\"{}\" fill-opacity=\"0.6\"/>",
            project(x, bx, false),
            project(y, by, true),
            PALETTE[c % PALETTE.len()]
        )
        .expect("string write");
    }
    s.push_str("</svg>\n");
    s
}

/// One polyline per series on a shared `[0, 1]` value axis. Each polyline
/// carries its label in `data-label` and has one point per value.
pub fn line_svg(title: &str, series: &[(String, Vec<f64>)]) -> String {
    let longest = series.iter().map(|(_, v)| v.len()).max().unwrap_or(1).max(2);
    let bx = (0.0, (longest - 1) as f64);
    let mut s = svg_open(title);
    for (k, (label, values)) in series.iter().enumerate() {
        let pts: Vec<String> = values
            .iter()
            .enumerate()
            .map(|(i, v)| format!("{:.2},{:.2}", project(i as f64, bx, false), project(v.clamp(0.0, 1.0), (0.0, 1.0), true)))
            .collect();
        writeln!(
            s,
            "<polyline data-label=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1\" points=\"{}\"/>",
            escape(label),
            PALETTE[k % PALETTE.len()],
            pts.join(" ")
        )
        .expect("string write");
    }
    s.push_str("</svg>\n");
    s
}
