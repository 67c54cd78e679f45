use super::*;
use crate::data::gen_contam2d;

fn schedule() -> NoiseSchedule {
    NoiseSchedule::linear(100, 1e-3, 0.2).unwrap()
}

fn teacher() -> Denoiser {
    Denoiser::new(2, 4, &mut substream(0, "teacher"))
}

fn small_cfg() -> SfdConfig {
    SfdConfig {
        rounds: 3,
        batch_size: 16,
        fake_warmup: 2,
        ..Default::default()
    }
}

#[test]
fn generator_is_deterministic_given_noise() {
    let gen = Generator::new(2, 4, &mut substream(1, "g"));
    let n = normal_tensor(&mut substream(1, "n"), 5, 2);
    let a = gen.generate(&n, &[0, 1, 2, 3, 0]).unwrap();
    assert_eq!(a, gen.generate(&n, &[0, 1, 2, 3, 0]).unwrap());
    assert_eq!(a.dims2().unwrap(), (5, 2));
}

#[test]
fn hat_loss_examples() {
    assert!((sfd_hat_value(&[1.0], &[0.5], &[0.0], 1.0, 1.2) - 0.2).abs() < 1e-12);
    assert_eq!(sfd_hat_value(&[0.3, -1.0], &[0.3, -1.0], &[2.0, 1.0], 1.7, 1.2), 0.0);
    let a1 = sfd_hat_value(&[1.0, 2.0], &[0.5, -1.0], &[0.1, 0.2], 0.8, 1.0);
    let inner = 0.5 * (0.5 - 0.1) + 3.0 * (-1.0 - 0.2);
    assert!((a1 - 0.8 * inner).abs() < 1e-12);
}

#[test]
fn graph_loss_matches_scalar_form_and_gradient_flows_through_x_only() {
    let s = schedule();
    let x_val = Tensor::from_rows(&[vec![0.2, -0.4], vec![1.0, 0.5]]).unwrap();
    let x_phi = Tensor::from_rows(&[vec![0.7, 0.1], vec![0.9, -0.2]]).unwrap();
    let x_psi = Tensor::from_rows(&[vec![0.1, 0.3], vec![1.4, 0.0]]).unwrap();
    let ts = [10, 60];
    let om = omega(&x_phi, &x_val, &ts, &s, 0.25);
    for alpha in [1.0, 1.2] {
        let mut g = Graph::new();
        let x = g.param(x_val.clone());
        let loss = sfd_hat_loss(&mut g, x, &x_phi, &x_psi, &ts, &s, alpha, &om).unwrap();
        let mut expect = 0.0;
        for i in 0..2 {
            let k = om[i] * s.gamma(ts[i]).powi(2) * s.sigma(ts[i]).powi(4);
            expect += sfd_hat_value(x_phi.row(i), x_psi.row(i), x_val.row(i), k, alpha);
        }
        assert!((g.scalar(loss) - expect).abs() < 1e-14);
        let grad = g.backward(loss).unwrap().get(x);
        for i in 0..2 {
            let k = om[i] * s.gamma(ts[i]).powi(2) * s.sigma(ts[i]).powi(4);
            for j in 0..2 {
                let expect = -k * (x_phi.row(i)[j] - x_psi.row(i)[j]);
                assert!((grad.row(i)[j] - expect).abs() < 1e-15);
            }
        }
    }
}

#[test]
fn omega_is_nonnegative_and_frozen() {
    let s = schedule();
    let x = Tensor::from_rows(&[vec![0.2, -0.4]]).unwrap();
    let x_phi = Tensor::from_rows(&[vec![0.7, 0.1]]).unwrap();
    let x_psi = Tensor::from_rows(&[vec![0.1, 0.3]]).unwrap();
    let om = omega(&x_phi, &x, &[40], &s, 0.5);
    assert!(om[0] >= 0.0);
    let (a, b) = (s.gamma(40), s.sigma(40));
    assert!((om[0] - b.powi(4) * a * a * 0.5 * 1.0).abs() < 1e-15);
    let grad_with = |w: &[f64]| {
        let mut g = Graph::new();
        let xn = g.param(x.clone());
        let l = sfd_hat_loss(&mut g, xn, &x_phi, &x_psi, &[40], &s, 1.0, w).unwrap();
        (g.scalar(l), g.backward(l).unwrap().get(xn))
    };
    let perturbed = omega(&Tensor::from_rows(&[vec![0.9, 0.1]]).unwrap(), &x, &[40], &s, 0.5);
    let (l0, g0) = grad_with(&om);
    let (l1, g1) = grad_with(&perturbed);
    assert_ne!(l0, l1);
    let ratio = perturbed[0] / om[0];
    for (a, b) in g0.data().iter().zip(g1.data()) {
        assert!((b - ratio * a).abs() < 1e-15);
    }
}

#[test]
fn fake_score_update_touches_only_psi_and_overfits_one_point() {
    let s = schedule();
    let gen = Generator::new(2, 4, &mut substream(2, "g"));
    let mut fake = FakeScoreNet::new(2, 4, &mut substream(2, "f"));
    let mut opt = Adam::new(AdamConfig::with_lr(1e-2)).unwrap();
    let before = gen.params().fingerprint();
    fake_score_update(&mut fake, &mut opt, &gen, &s, &[0, 1, 2, 3], &mut substream(2, "r")).unwrap();
    assert_eq!(before, gen.params().fingerprint());

    let x = Tensor::from_rows(&[vec![1.5, -0.7]]).unwrap();
    let noised = NoisedSample {
        z: crate::diffusion::noised(&s, &x, &[30], &Tensor::from_rows(&[vec![0.3, -1.1]]).unwrap()).unwrap(),
        ts: vec![30],
        eps: Tensor::from_rows(&[vec![0.3, -1.1]]).unwrap(),
    };
    let mut opt = Adam::new(AdamConfig::with_lr(1e-2)).unwrap();
    for _ in 0..1500 {
        let mut g = Graph::new();
        let b = g.bind(fake.params(), true);
        let l = fake_score_loss(&mut g, &fake, &b, &x, &noised, &s, &[2]).unwrap();
        let grads = g.backward(l).unwrap().collect(b.ids());
        opt.apply(fake.params_mut(), &grads).unwrap();
    }
    let p = fake.predict(&noised.z, &noised.ts, &s, &[2]).unwrap();
    for (a, b) in p.data().iter().zip(x.data()) {
        assert!((a - b).abs() < 1e-3, "{a} vs {b}");
    }
}

#[test]
fn oracle_fake_net_has_zero_loss() {
    let x = Tensor::from_rows(&[vec![0.4, 0.1], vec![-2.0, 1.0]]).unwrap();
    let mut g = Graph::new();
    let pred = g.constant(x.clone());
    let target = g.constant(x.clone());
    let d = g.sub(pred, target).unwrap();
    let sq = g.square(d);
    assert_eq!(g.value(sq).sum(), 0.0);
}

#[test]
fn rounds_are_reproducible_and_lambda_zero_drops_forgetting() {
    let s = schedule();
    let t = teacher();
    let cfg = small_cfg();
    let a = run_sfd(&t, &s, None, &cfg, 3).unwrap();
    let b = run_sfd(&t, &s, None, &cfg, 3).unwrap();
    assert_eq!(a.records, b.records);
    assert_eq!(a.state.generator, b.state.generator);
    assert!(a.records.iter().all(|r| r.forget_loss != 0.0));
    let none = run_sfd(&t, &s, None, &SfdConfig { lambda_sfd: 0.0, ..cfg }, 3).unwrap();
    assert!(none.records.iter().all(|r| r.forget_loss == 0.0));
}

#[test]
fn invalid_class_setups_are_config_errors() {
    let s = schedule();
    let t = teacher();
    for cfg in [
        SfdConfig { override_class: 1, ..small_cfg() },
        SfdConfig { forget_class: 4, ..small_cfg() },
        SfdConfig { alpha: 1.1, ..small_cfg() },
    ] {
        assert!(matches!(run_sfd(&t, &s, None, &cfg, 0), Err(Error::Config(_))));
    }
    let uncond = Denoiser::new(2, 0, &mut substream(0, "u"));
    assert!(matches!(run_sfd(&uncond, &s, None, &small_cfg(), 0), Err(Error::Config(_))));
}

#[test]
fn responsibility_weights_are_a_distribution() {
    let w = responsibility_weights_at(0.3, &[vec![-1.0, 2.0], vec![-1.0, 2.0], vec![-1.0, 2.0]], &[0.5, -3.0]).unwrap();
    for c in &w {
        for v in c {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }
    let w = responsibility_weights_at(0.8, &[vec![-1.0, 4.0], vec![-5.0, 2.0]], &[0.5, -3.0]).unwrap();
    for i in 0..2 {
        assert!((w[0][i] + w[1][i] - 1.0).abs() < 1e-12);
    }
    assert!(w[0][0] > w[1][0]);
    let single = responsibility_weights_at(0.6, &[vec![-1.0, 4.0]], &[0.5, -3.0]).unwrap();
    assert_eq!(single, vec![vec![1.0, 1.0]]);
}

#[test]
fn single_retain_class_reduces_to_the_round_forgetting_term() {
    let s = schedule();
    let t = Denoiser::new(2, 2, &mut substream(0, "teacher2"));
    let (_, spec4) = gen_contam2d(0, 40, 0.2).unwrap();
    let spec = GaussMixtureSpec {
        classes: spec4.classes[..2].to_vec(),
    };
    let cfg = SfdConfig {
        batch_size: 8,
        ..small_cfg()
    };
    let state = SfdState::new(2, 2, &cfg, &mut substream(4, "init")).unwrap();
    let mut g = Graph::new();
    let bound = g.bind(state.generator.params(), true);
    let lam = g.constant(Tensor::scalar(0.4));
    let (nodes, _) =
        multiclass_adaptive_loss(&mut g, &bound, &state, &t, &s, &spec, &cfg, lam, &mut substream(4, "r")).unwrap();

    let mut h = Graph::new();
    let hb = h.bind(state.generator.params(), true);
    let mut rng = substream(4, "r");
    let rterm = generator_term(&mut h, &state.generator, &hb, vec![0; 4], &s, &mut rng).unwrap();
    let (rrows, _) = term_rows(&mut h, &rterm, &t, &state.fake, &s, &rterm.labels, cfg.alpha).unwrap();
    let distill = h.sum(rrows);
    let fterm = generator_term(&mut h, &state.generator, &hb, vec![1; 4], &s, &mut rng).unwrap();
    let (frows, _) = term_rows(&mut h, &fterm, &t, &state.fake, &s, &[0; 4], cfg.alpha).unwrap();
    let forget = h.sum(frows);
    assert!((g.scalar(nodes.distill) - h.scalar(distill)).abs() < 1e-15);
    assert!((g.scalar(nodes.forget) - h.scalar(forget)).abs() < 1e-14);
}

#[test]
fn multiclass_run_samples_lambda_and_is_reproducible() {
    let s = schedule();
    let t = teacher();
    let (_, spec) = gen_contam2d(0, 40, 0.2).unwrap();
    let cfg = small_cfg();
    let a = run_sfd(&t, &s, Some(&spec), &cfg, 5).unwrap();
    let b = run_sfd(&t, &s, Some(&spec), &cfg, 5).unwrap();
    assert_eq!(a.records, b.records);
    assert!(a.records.iter().all(|r| r.lambda.is_some_and(|l| l > 0.0 && l < 1.0)));
    assert!(a.inference.is_some());
}
