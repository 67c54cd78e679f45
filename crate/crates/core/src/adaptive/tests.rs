use super::*;
use crate::data::{gen_contam2d, split_forget_retain};
use crate::rng::substream;
use crate::siss::{static_step, ForgetWeightMode};
use crate::tensor::grad_check;
use crate::tensor::GradCheckOptions;

fn schedule() -> NoiseSchedule {
    NoiseSchedule::linear(100, 1e-3, 0.2).unwrap()
}

fn tiny_setup() -> (Denoiser, LabeledDataset, ForgetSplit) {
    let (data, _) = gen_contam2d(0, 40, 0.2).unwrap();
    let split = split_forget_retain(&data).unwrap();
    (Denoiser::new(2, 4, &mut substream(0, "init")), data, split)
}

#[test]
fn running_norm_matches_two_pass_statistics() {
    let xs: Vec<[f64; 2]> = (0..50).map(|i| [(i as f64 * 0.37).sin() * 3.0, i as f64 * 0.1]).collect();
    let mut norm = RunningNorm::new(2);
    for x in &xs {
        norm.update(x);
    }
    for j in 0..2 {
        let mean = xs.iter().map(|x| x[j]).sum::<f64>() / 50.0;
        let var = xs.iter().map(|x| (x[j] - mean).powi(2)).sum::<f64>() / 49.0;
        let probe = [1.5, 1.5];
        let z = norm.normalize(&probe)[j];
        assert!((z - (1.5 - mean) / var.sqrt()).abs() < 1e-10);
    }
}

#[test]
fn constant_context_normalizes_to_zero() {
    let mut norm = RunningNorm::new(4);
    for _ in 0..20 {
        let v = build_context([0.4, 0.2, 3.0, 1.0], &mut norm, true).unwrap();
        assert_eq!(v.normalized, [0.0; 4]);
    }
}

#[test]
fn non_finite_context_is_rejected_without_touching_statistics() {
    let mut norm = RunningNorm::new(4);
    build_context([0.4, 0.2, 3.0, 1.0], &mut norm, true).unwrap();
    let before = norm.clone();
    assert!(build_context([-2.0, 0.2, 3.0, 1.0], &mut norm, true).is_err());
    assert!(build_context([f64::INFINITY, 0.2, 3.0, 1.0], &mut norm, true).is_err());
    assert_eq!(norm, before);
}

#[test]
fn kl_matches_closed_form_and_vanishes_at_prior() {
    let p = |mu, sigma| LambdaPosterior { mu, sigma };
    assert_eq!(kl_prior(p(0.0, 1.0)), 0.0);
    assert!((kl_prior(p(1.0, 2.0)) - (0.5 * (4.0 + 1.0 - 1.0) - 2f64.ln())).abs() < 1e-15);
    let mut g = Graph::new();
    let mu = g.constant(Tensor::scalar(0.7));
    let sigma = g.constant(Tensor::scalar(0.4));
    let kl = kl_prior_node(&mut g, mu, sigma).unwrap();
    assert!((g.scalar(kl) - kl_prior(p(0.7, 0.4))).abs() < 1e-15);
}

#[test]
fn inference_net_gradients_match_finite_differences() {
    let net = InferenceNet::new(&mut substream(3, "adaptive.init"));
    let v = [0.3, -1.2, 0.5, 2.0];
    let xi = 0.8;
    let err = grad_check(
        &net.mlp.params,
        |g, bound| {
            let x = g.constant(Tensor::matrix(1, 4, v.to_vec())?);
            let (mu, sigma) = net.posterior_nodes(g, bound, x)?;
            let noise = g.scale(sigma, xi);
            let z = g.add(mu, noise)?;
            let lam = g.sigmoid(z);
            let kl = kl_prior_node(g, mu, sigma)?;
            let sum = g.add(lam, kl)?;
            Ok(sum)
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn elbo_phi_gradient_matches_hand_chain_rule() {
    let s = schedule();
    let (den, data, split) = tiny_setup();
    let w = SissWeights::from_split(&split, 0.1, ForgetWeightMode::Mixture).unwrap();
    let net = InferenceNet::new(&mut substream(4, "adaptive.init"));
    let (v, xi, beta) = ([0.2, -0.4, 1.1, 0.3], -0.6, 0.05);
    let eg = build_elbo(&den, &net, &s, &data, &split, &w, 16, &v, xi, beta, &mut substream(4, "siss")).unwrap();
    let g = &eg.graph;
    let auto = g.backward(eg.elbo).unwrap().collect(eg.phi.ids());
    let dmu = g.backward(eg.mu).unwrap().collect(eg.phi.ids());
    let dsigma = g.backward(eg.sigma).unwrap().collect(eg.phi.ids());

    let b = &eg.batch;
    let lam = b.lambda;
    let pr = den.predict_eval(&b.m, &b.ts, &s, Some(&b.c_r)).unwrap();
    let pf = den.predict_eval(&b.m, &b.ts, &s, Some(&b.c_f)).unwrap();
    let residual = |x: &Tensor, p: &Tensor, i: usize| {
        let t = b.ts[i];
        (0..2)
            .map(|j| ((b.m.row(i)[j] - s.gamma(t) * x.row(i)[j]) / s.sigma(t) - p.row(i)[j]).powi(2))
            .sum::<f64>()
    };
    let mut dl_dlambda = 0.0;
    for (i, ld) in b.log_densities(&s).iter().enumerate() {
        let r = (ld.log_qr - ld.log_q_lambda).exp();
        let f = (ld.log_qf - ld.log_q_lambda).exp();
        let dr = -r * (f - r);
        let df = -f * (f - r);
        dl_dlambda += w.retain / 16.0 * dr * residual(&b.x_r, &pr, i);
        dl_dlambda -= (1.0 + w.s) * w.forget / 16.0 * df * residual(&b.x_f, &pf, i);
    }
    let (mu, sigma) = (g.scalar(eg.mu), g.scalar(eg.sigma));
    let dz = dl_dlambda * lam * (1.0 - lam);
    for ((a, m), sg) in auto.iter().zip(&dmu).zip(&dsigma) {
        for ((&av, &mv), &sv) in a.data().iter().zip(m.data()).zip(sg.data()) {
            let hand = dz * (mv + xi * sv) + beta * (mu * mv + (sigma - 1.0 / sigma) * sv);
            assert!((av - hand).abs() <= 1e-8 * (1.0 + hand.abs()), "{av} vs {hand}");
        }
    }
}

#[test]
fn frozen_sharp_posterior_without_kl_reduces_to_static_siss() {
    let s = schedule();
    let (den0, data, split) = tiny_setup();
    let siss = SissConfig {
        batch_size: 16,
        lr: 1e-3,
        ..Default::default()
    };
    let cfg = AdaptiveConfig {
        beta: 0.0,
        ..Default::default()
    };
    let w = SissWeights::from_split(&split, siss.s, siss.forget_weight_mode).unwrap();
    let mut net = InferenceNet::new(&mut substream(5, "adaptive.init"));
    net.mlp.set_output_layer(&[0.3, -60.0]);

    let mut a = den0.clone();
    let mut state = AdaptiveState::new(net, &cfg).unwrap();
    state.train_phi = false;
    let mut opt = Adam::new(AdamConfig::with_lr(siss.lr)).unwrap();
    let (mut xi_rng, mut pair_rng) = (substream(5, "xi"), substream(5, "siss"));
    let mut lambdas = Vec::new();
    for step in 0..5 {
        let rec = elbo_step(
            &mut a, &mut opt, &mut state, &s, &data, &split, &w, &siss, &cfg, step, &mut xi_rng, &mut pair_rng,
        )
        .unwrap();
        lambdas.push(rec.siss.lambda);
    }

    let mut b = den0.clone();
    let fixed = SissConfig {
        lambda: sigmoid(0.3),
        ..siss
    };
    let mut opt = Adam::new(AdamConfig::with_lr(siss.lr)).unwrap();
    let mut rng = substream(5, "siss");
    for step in 0..5 {
        static_step(&mut b, &s, &data, &split, &w, &fixed, &mut opt, step, &mut rng).unwrap();
    }
    assert!(lambdas.iter().all(|&l| l == sigmoid(0.3)));
    for (pa, pb) in a.params().tensors().iter().zip(b.params().tensors()) {
        for (x, y) in pa.data().iter().zip(pb.data()) {
            assert!((x - y).abs() <= 1e-9 * (1.0 + y.abs()), "{x} vs {y}");
        }
    }
}

#[test]
fn dominant_kl_pulls_posterior_to_prior() {
    let s = schedule();
    let (mut den, data, split) = tiny_setup();
    let siss = SissConfig {
        batch_size: 8,
        lr: 1e-6,
        ..Default::default()
    };
    let cfg = AdaptiveConfig {
        beta: 1e3,
        lr_phi: 1e-2,
        ..Default::default()
    };
    let w = SissWeights::from_split(&split, siss.s, siss.forget_weight_mode).unwrap();
    let mut net = InferenceNet::new(&mut substream(6, "adaptive.init"));
    net.mlp.set_output_layer(&[2.0, 2.0]);
    let mut state = AdaptiveState::new(net, &cfg).unwrap();
    let mut opt = Adam::new(AdamConfig::with_lr(siss.lr)).unwrap();
    let (mut xi_rng, mut pair_rng) = (substream(6, "xi"), substream(6, "siss"));
    let mut log = Vec::new();
    for step in 0..500 {
        log.push(
            elbo_step(
                &mut den, &mut opt, &mut state, &s, &data, &split, &w, &siss, &cfg, step, &mut xi_rng, &mut pair_rng,
            )
            .unwrap(),
        );
    }
    assert!((log[0].mu - 2.0).abs() < 1e-9);
    for r in &log[480..] {
        assert!(r.mu.abs() < 0.1 && (r.sigma - 1.0).abs() < 0.1, "{} {}", r.mu, r.sigma);
    }
}

#[test]
fn invalid_context_skips_the_step() {
    let s = schedule();
    let (mut den, data, split) = tiny_setup();
    let siss = SissConfig {
        batch_size: 8,
        ..Default::default()
    };
    let cfg = AdaptiveConfig::default();
    let w = SissWeights::from_split(&split, siss.s, siss.forget_weight_mode).unwrap();
    let mut state = AdaptiveState::new(InferenceNet::new(&mut substream(7, "adaptive.init")), &cfg).unwrap();
    state.prev = [-3.0, 0.1, 0.1, 0.1];
    let before = den.clone();
    let mut opt = Adam::new(AdamConfig::with_lr(siss.lr)).unwrap();
    let rec = elbo_step(
        &mut den, &mut opt, &mut state, &s, &data, &split, &w, &siss, &cfg, 0, &mut substream(7, "xi"),
        &mut substream(7, "siss"),
    )
    .unwrap();
    assert!(rec.skipped);
    assert_eq!(den, before);
    assert_eq!(state.norm.count(), 0);
}

#[test]
fn adaptive_run_is_deterministic_and_logs_every_step() {
    let s = schedule();
    let (den0, data, split) = tiny_setup();
    let siss = SissConfig {
        batch_size: 8,
        steps: 4,
        ..Default::default()
    };
    let run = || {
        let mut d = den0.clone();
        let (log, net) = run_adaptive(&mut d, &s, &data, &split, &siss, &AdaptiveConfig::default(), 11).unwrap();
        (log, d.params().fingerprint(), net.mlp.params.fingerprint())
    };
    let (log, fa, fb) = run();
    assert_eq!(log.len(), 4);
    assert!(log.iter().all(|r| r.siss.lambda > 0.0 && r.siss.lambda < 1.0));
    assert_eq!(AdaptiveRecord::csv_header().split(',').count(), log[0].csv_row().split(',').count());
    assert_eq!((log, fa, fb), run());
}
