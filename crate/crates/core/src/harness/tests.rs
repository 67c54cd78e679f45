use std::fs;
use std::path::Path;

use super::*;
use crate::data::split_forget_retain;
use crate::error::Error;
use crate::rng::substream;
use crate::siss::{run_static, STEP_CSV_HEADER};

fn tiny(method: Method, out: &Path) -> RunConfig {
    let mut cfg = RunConfig {
        method,
        seed: 5,
        out: out.to_path_buf(),
        ..RunConfig::default()
    };
    cfg.dataset.count = 40;
    cfg.base.steps = 20;
    cfg.base.batch_size = 32;
    cfg.siss.steps = 4;
    cfg.siss.batch_size = 8;
    cfg.eval.samples = 100;
    cfg.rl.horizon = 3;
    cfg.rl.episodes = 2;
    cfg.rl.iterations = 1;
    cfg.rl.epochs = 1;
    cfg.rl.minibatch = 4;
    cfg.rl.total_steps = 4;
    cfg.rl.update_every = 2;
    cfg.rl.window = 4;
    cfg.rl.sac_batch = 2;
    cfg.sfd.rounds = 3;
    cfg.sfd.batch_size = 8;
    cfg.sfd.fake_warmup = 2;
    cfg
}

fn full_run(cfg: &RunConfig) {
    run_command(Verb::TrainBase, cfg).unwrap();
    if cfg.method != Method::Base {
        run_command(Verb::Unlearn, cfg).unwrap();
    }
    run_command(Verb::Eval, cfg).unwrap();
}

fn artifacts(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != MANIFEST_FILE)
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn every_method_runs_and_lists_its_files() {
    let root = tempfile::tempdir().unwrap();
    for m in Method::ALL {
        let dir = root.path().join(m.name());
        let cfg = tiny(m, &dir);
        full_run(&cfg);
        let manifest = RunManifest::load(&dir).unwrap();
        assert_eq!(manifest.method, m);
        assert_eq!(manifest.config, cfg);
        let verbs: Vec<Verb> = manifest.commands.iter().map(|c| c.verb).collect();
        assert_eq!(verbs.last(), Some(&Verb::Eval));
        let names: Vec<&str> = manifest.files.iter().map(|f| f.path.as_str()).collect();
        for f in &manifest.files {
            assert_eq!(fs::metadata(dir.join(&f.path)).unwrap().len(), f.bytes);
        }
        assert!(names.contains(&METRICS_FILE) && names.contains(&"base.uftc"), "{m}: {names:?}");
        let model = if m.is_sfd() {
            Some(GENERATOR_FILE)
        } else if m == Method::Base {
            None
        } else {
            Some(MODEL_FILE)
        };
        if let Some(model) = model {
            assert!(names.contains(&model), "{m}: {names:?}");
        }
        let report: crate::metrics::MetricReport =
            serde_json::from_str(&fs::read_to_string(dir.join(METRICS_FILE)).unwrap()).unwrap();
        assert_eq!(report.samples_per_condition, 100);
        assert_eq!(report.override_rate.is_some(), m.is_sfd());
    }
}

#[test]
fn identical_config_gives_identical_artifacts() {
    let root = tempfile::tempdir().unwrap();
    for m in [Method::Adaptive, Method::RlPpoOpt1, Method::SfdMulticlass] {
        let a = tiny(m, &root.path().join(format!("{m}-a")));
        let b = tiny(m, &root.path().join(format!("{m}-b")));
        full_run(&a);
        full_run(&b);
        let (fa, fb) = (artifacts(&a.out), artifacts(&b.out));
        assert!(fa.iter().any(|(n, _)| n.ends_with(".csv")) && fa.iter().any(|(n, _)| n.ends_with(".uftc")));
        assert_eq!(fa, fb, "{m}");
        let (ma, mb) = (RunManifest::load(&a.out).unwrap(), RunManifest::load(&b.out).unwrap());
        assert_eq!(ma.files, mb.files);
    }
}

#[test]
fn unlearn_without_base_is_missing_prerequisite() {
    let root = tempfile::tempdir().unwrap();
    let cfg = tiny(Method::Static, root.path());
    let res = run_command(Verb::Unlearn, &cfg);
    assert!(matches!(res, Err(Error::MissingPrerequisite(ref p)) if p.ends_with("base.uftc")), "{res:?}");
    assert_eq!(exit_code(&res), 2);
    let res = run_command(Verb::Eval, &cfg);
    assert_eq!(exit_code(&res), 2);
}

#[test]
fn divergence_reports_step_and_exit_code() {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = tiny(Method::Base, root.path());
    cfg.base.lr = 1e300;
    cfg.base.cosine_decay = false;
    let res = run_command(Verb::TrainBase, &cfg);
    match &res {
        Err(Error::Divergence { step, .. }) => assert!(*step >= 1 && *step < cfg.base.steps),
        other => panic!("expected divergence, got {other:?}"),
    }
    assert_eq!(exit_code(&res), 3);
    assert_eq!(exit_code(&Ok(())), 0);
    assert_eq!(exit_code(&Err(Error::Config("x".into()))), 1);
}

#[test]
fn static_step_log_matches_direct_loop() {
    let root = tempfile::tempdir().unwrap();
    let cfg = tiny(Method::Static, root.path());
    run_command(Verb::TrainBase, &cfg).unwrap();
    run_command(Verb::Unlearn, &cfg).unwrap();
    let (data, _) = dataset(&cfg).unwrap();
    let mut den = load_denoiser(&cfg, &data, &cfg.base_checkpoint_path()).unwrap();
    let split = split_forget_retain(&data).unwrap();
    let log = run_static(
        &mut den,
        &cfg.schedule.build().unwrap(),
        &data,
        &split,
        &cfg.siss,
        &mut substream(cfg.seed, "siss"),
    )
    .unwrap();
    let mut expected = format!("{STEP_CSV_HEADER}\n");
    for r in &log {
        expected.push_str(&r.csv_row());
        expected.push('\n');
    }
    assert_eq!(fs::read_to_string(root.path().join("steps.csv")).unwrap(), expected);
    assert_eq!(log.len(), cfg.siss.steps);
}

#[test]
fn eval_from_manifest_reproduces_report() {
    let root = tempfile::tempdir().unwrap();
    let cfg = tiny(Method::Base, root.path());
    full_run(&cfg);
    let before = fs::read(root.path().join(METRICS_FILE)).unwrap();
    let restored = manifest_config(root.path()).unwrap().unwrap();
    assert_eq!(restored, cfg);
    run_command(Verb::Eval, &restored).unwrap();
    assert_eq!(fs::read(root.path().join(METRICS_FILE)).unwrap(), before);
}

fn metric(dir: &Path, key: &str) -> f64 {
    let text = fs::read_to_string(dir.join("metrics.csv")).unwrap();
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key},")))
        .unwrap()
        .parse()
        .unwrap()
}

#[test]
fn report_aggregates_seeds_and_plots_lambda() {
    let root = tempfile::tempdir().unwrap();
    let mut dirs = Vec::new();
    for seed in [1, 2, 3] {
        let dir = root.path().join(format!("static-{seed}"));
        let cfg = RunConfig { seed, ..tiny(Method::Static, &dir) };
        full_run(&cfg);
        dirs.push(dir);
    }
    let opt1 = root.path().join("opt1");
    let cfg = tiny(Method::RlPpoOpt1, &opt1);
    full_run(&cfg);

    let report_dir = root.path().join("report");
    fs::create_dir_all(&report_dir).unwrap();
    let mut runs = dirs.clone();
    runs.push(opt1.clone());
    let files = write_report(&runs, &report_dir).unwrap();
    assert!(files.contains(&"scatter_static.svg".to_string()));
    assert!(files.contains(&"scatter_rl-ppo-opt1.svg".to_string()));

    let values: Vec<f64> = dirs.iter().map(|d| metric(d, "retain_frechet")).collect();
    let mean = values.iter().sum::<f64>() / 3.0;
    let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 2.0).sqrt();
    let csv = fs::read_to_string(report_dir.join("report.csv")).unwrap();
    let row: Vec<&str> = csv.lines().find(|l| l.starts_with("static,retain_frechet,")).unwrap().split(',').collect();
    assert!((row[2].parse::<f64>().unwrap() - mean).abs() < 1e-12);
    assert!((row[3].parse::<f64>().unwrap() - std).abs() < 1e-12);
    assert_eq!(row[4], "3");
    let single = csv.lines().find(|l| l.starts_with("rl-ppo-opt1,retain_frechet,")).unwrap();
    assert_eq!(single.split(',').nth(3), Some("0"));

    let svg = fs::read_to_string(report_dir.join("lambda.svg")).unwrap();
    let line = svg.lines().find(|l| l.contains("data-label=\"rl-ppo-opt1")).unwrap();
    let pts = line.split("points=\"").nth(1).unwrap().trim_end_matches("\"/>");
    assert_eq!(pts.split(' ').count(), cfg.rl.horizon);
}

#[test]
fn report_rejects_inconsistent_keys() {
    let mk = |dir: &str, keys: &[&str]| RunSummary {
        dir: dir.into(),
        method: Method::Sfd,
        seed: 0,
        metrics: keys.iter().map(|k| (k.to_string(), 1.0)).collect(),
    };
    let runs = [mk("a", &["x", "y"]), mk("b", &["x", "y"]), mk("c", &["x"])];
    match summarize(&runs) {
        Err(Error::Report(msg)) => assert!(msg.contains('c') && !msg.contains("b,"), "{msg}"),
        other => panic!("{other:?}"),
    }
    assert!(matches!(summarize(&[]), Err(Error::Report(_))));
}

#[test]
fn mean_std_hand_values() {
    assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
    let (m, s) = mean_std(&[1.0, 2.0, 4.0]);
    assert!((m - 7.0 / 3.0).abs() < 1e-15);
    assert!((s - (7.0f64 / 3.0).sqrt()).abs() < 1e-12);
}

#[test]
fn unlearn_rejects_base_method() {
    let root = tempfile::tempdir().unwrap();
    let cfg = tiny(Method::Base, root.path());
    run_command(Verb::TrainBase, &cfg).unwrap();
    assert!(matches!(run_command(Verb::Unlearn, &cfg), Err(Error::Config(_))));
}
