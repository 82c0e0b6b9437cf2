mod common;

use proptest::prelude::*;
use reportgen::error::Error;
use reportgen::numerics::{gradcheck, Tape, Tensor};
use reportgen::ppo::{
    collect_rollouts, finalize, gae, normalize_rewards, ppo_log_csv, ppo_loss, run_ppo,
    shaped_rewards, train_iteration, value_loss, PpoConfig, PpoState, RewardNorm,
};
use reportgen::synthdata::StudyRecord;

fn small_cfg() -> PpoConfig {
    PpoConfig {
        group: 2,
        batch_studies: 1,
        grad_accum: 2,
        val_studies: 4,
        lr_start: 1e-3,
        lr_end: 1e-3,
        ..PpoConfig::default()
    }
}

fn objective(new: f64, old: f64, adv: f64, eps: f64) -> (f64, f64) {
    let mut tape = Tape::new();
    let n = tape.param(Tensor::vector(&[new]));
    let l = ppo_loss(&mut tape, n, &[old], &[adv], eps, 1.0).unwrap();
    tape.backward(l).unwrap();
    (-tape.data(l)[0], -tape.grad(n).map_or(0.0, |g| g[0]))
}

#[test]
fn shaped_rewards_without_kl_are_terminal_only() {
    let r = shaped_rewards(
        &[-1.0, -2.0, -0.5, -0.1],
        &[-3.0, -0.2, -0.5, -4.0],
        0.0,
        1.0,
    );
    assert_eq!(r, vec![0.0, 0.0, 0.0, 1.0]);
    let r = shaped_rewards(&[-1.0, -2.0], &[-1.5, -2.0], 0.1, 0.0);
    assert!((r[0] + 0.05).abs() < 1e-15 && r[1] == 0.0);
}

#[test]
fn normalization_examples() {
    assert_eq!(
        normalize_rewards(&[1.0; 4], 4, RewardNorm::Group),
        vec![0.0; 4]
    );
    let raw = [1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
    let s = 0.5;
    let n = normalize_rewards(&raw, 4, RewardNorm::Group);
    for (got, want) in n.iter().zip([0.75, -0.25, -0.25, -0.25]) {
        assert!((got - want / s).abs() < 1e-12);
    }
    let z = normalize_rewards(&raw, 4, RewardNorm::Batch);
    assert!((z[0] - 1.0).abs() < 1e-12 && (z[1] + 1.0).abs() < 1e-12);
}

#[test]
fn gae_examples() {
    let (lam, r) = (0.95, 0.7);
    let (a, ret) = gae(&[0.0, 0.0, 0.0, r], &[0.0; 4], 1.0, lam);
    for t in 0..4 {
        assert!((a[t] - lam.powi(3 - t as i32) * r).abs() < 1e-15);
    }
    assert_eq!(a, ret);

    let rewards = [0.1, -0.2, 0.5];
    let values = [0.3, 0.4, -0.1];
    let (a, _) = gae(&rewards, &values, 1.0, 0.0);
    let deltas = [0.1 + 0.4 - 0.3, -0.2 - 0.1 - 0.4, 0.5 + 0.1];
    for (x, d) in a.iter().zip(deltas) {
        assert!((x - d).abs() < 1e-15);
    }

    let truth = [0.4, 0.3, 0.5];
    let (a, ret) = gae(&rewards, &truth, 1.0, 0.95);
    assert!(a.iter().all(|x| x.abs() < 1e-15), "{a:?}");
    assert_eq!(ret, truth);
}

#[test]
fn surrogate_examples() {
    let (obj, grad) = objective(-1.3, -1.3, 2.0, 0.2);
    assert_eq!(obj, 2.0);
    assert_eq!(grad, 2.0);
    let (obj, grad) = objective(-1.0 + 1.5f64.ln(), -1.0, 1.0, 0.2);
    assert!((obj - 1.2).abs() < 1e-12);
    assert_eq!(grad, 0.0);
}

#[test]
fn value_loss_examples() {
    let mut tape = Tape::new();
    let v = tape.param(Tensor::vector(&[0.5, -1.0, 2.0]));
    let l = value_loss(&mut tape, v, &[0.5, -1.0, 2.0], 3.0).unwrap();
    assert_eq!(tape.data(l)[0], 0.0);
    let z = tape.param(Tensor::vector(&[0.0; 5]));
    let l = value_loss(&mut tape, z, &[1.0; 5], 5.0).unwrap();
    assert_eq!(tape.data(l)[0], 1.0);
}

#[test]
fn surrogate_gradient_on_toy_model() {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let w = Tensor::randn(&[4, 6], 0.5, &mut rng);
    let picks = [(0usize, 2usize), (1, 5), (2, 0)];
    let old = [-1.9, -1.5, -2.1];
    let adv = [1.0, -0.7, 0.4];
    let blocked = vec![vec![1], vec![], vec![3, 4]];
    let res = gradcheck::check(
        |tape, v| {
            let logits = tape.matmul(v[0], v[1])?;
            let lp = tape.token_log_probs(logits, &picks, &blocked)?;
            ppo_loss(tape, lp, &old, &adv, 0.2, 3.0)
        },
        &[x.clone(), w.clone()],
        gradcheck::DEFAULT_STEP,
        1,
    )
    .unwrap();
    assert!(res.max_rel_err < 1e-3, "{res:?}");

    let res = gradcheck::check(
        |tape, v| {
            let h = tape.matmul(v[0], v[1])?;
            let col = tape.gather_rows(h, &[Some(0), Some(2)], vec![2, 6])?;
            value_loss(tape, col, &[0.3; 12], 12.0)
        },
        &[x, w],
        gradcheck::DEFAULT_STEP,
        1,
    )
    .unwrap();
    assert!(res.max_rel_err < 1e-3, "{res:?}");
}

proptest! {
    #[test]
    fn clipping_is_inactive_inside_the_trust_region(
        rows in prop::collection::vec((-0.18f64..0.18, 0.0f64..3.0, -3.0f64..0.0), 1..20)
    ) {
        let eps = 0.2;
        let old: Vec<f64> = rows.iter().map(|r| r.2).collect();
        let new: Vec<f64> = rows.iter().map(|r| r.2 + (1.0 + r.0).ln()).collect();
        let adv: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let mut tape = Tape::new();
        let n = tape.leaf(Tensor::vector(&new));
        let l = ppo_loss(&mut tape, n, &old, &adv, eps, rows.len() as f64).unwrap();
        let unclipped: f64 = new.iter().zip(&old).zip(&adv).map(|((n, o), a)| (n - o).exp() * a).sum::<f64>();
        prop_assert!((tape.data(l)[0] + unclipped / rows.len() as f64).abs() < 1e-12);
    }

    #[test]
    fn objective_is_one_sided(log_ratio in -3.0f64..3.0, adv in -4.0f64..4.0) {
        let eps = 0.2;
        let (obj, _) = objective(log_ratio - 1.0, -1.0, adv, eps);
        if adv > 0.0 {
            prop_assert!(obj <= (1.0 + eps) * adv + 1e-12);
        } else {
            prop_assert!(obj <= (1.0 - eps) * adv + 1e-12);
        }
    }

    #[test]
    fn group_normalization_centres_and_keeps_argmax(raw in prop::collection::vec(0.0f64..1.0, 12)) {
        let n = normalize_rewards(&raw, 4, RewardNorm::Group);
        for (g, r) in n.chunks(4).zip(raw.chunks(4)) {
            prop_assert!(g.iter().sum::<f64>().abs() < 1e-9);
            let am = |x: &[f64]| (0..4).fold(0, |b, i| if x[i] > x[b] { i } else { b });
            prop_assert_eq!(am(g), am(r));
        }
    }
}

#[test]
fn identical_reference_has_zero_kl() {
    let t = common::tiny(1);
    let studies: Vec<&StudyRecord> = t.corpus.train.iter().take(3).collect();
    let cfg = PpoConfig {
        group: 4,
        ..small_cfg()
    };
    let mut b = collect_rollouts(&t.model, &t.model.clone(), &studies, &t.vocab, &cfg, 0).unwrap();
    assert_eq!(b.trajectories.len(), 12);
    for (i, tr) in b.trajectories.iter().enumerate() {
        assert_eq!(tr.study, i / 4);
        assert_eq!(tr.old_logp, tr.ref_logp);
        assert!(tr.old_logp.iter().all(|x| x.is_finite() && *x <= 0.0));
    }
    for g in b.trajectories.chunks(4) {
        assert!(
            g.iter().any(|x| x.tokens != g[0].tokens),
            "group members share randomness"
        );
    }
    finalize(&mut b, &cfg);
    for tr in &b.trajectories {
        let (last, body) = tr.rewards.split_last().unwrap();
        assert!(body.iter().all(|&r| r == 0.0));
        assert_eq!(*last, tr.norm_reward);
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_bit_identical() {
    let t = common::tiny(2);
    let cfg = PpoConfig {
        lr_start: 0.0,
        lr_end: 0.0,
        ..small_cfg()
    };
    let mut state = PpoState::new(t.model.clone(), t.corpus.train.len(), &cfg).unwrap();
    let before = state.model.store.clone();
    let m = train_iteration(&mut state, &t.corpus.train, &t.corpus.val, &t.vocab, &cfg).unwrap();
    assert_eq!(state.model.store, before);
    assert_eq!(m.clip_frac, 0.0);
    assert_eq!(m.mean_kl, 0.0);
}

#[test]
fn log_gains_one_row_per_iteration_and_reruns_match() {
    let t = common::tiny(3);
    let cfg = PpoConfig {
        iterations: 3,
        ..small_cfg()
    };
    let run = || {
        run_ppo(
            t.model.clone(),
            &t.corpus.train,
            &t.corpus.val,
            &t.vocab,
            &cfg,
            |_| {},
        )
        .unwrap()
    };
    let (m1, log1) = run();
    let (m2, log2) = run();
    assert_eq!(log1.len(), 3);
    let csv = ppo_log_csv(&log1);
    assert_eq!(csv.lines().count(), 4);
    assert!(csv
        .starts_with("iter,mean_reward,val_impression_f1,val_findings_f1,mean_kl,clip_frac,lr\n"));
    assert_eq!(csv, ppo_log_csv(&log2));
    assert_eq!(m1.store, m2.store);
    assert_ne!(m1.store, t.model.store);
}

#[test]
fn divergence_guard_aborts_before_the_update() {
    let t = common::tiny(4);
    let cfg = PpoConfig {
        divergence_limit: -1.0,
        ..small_cfg()
    };
    let mut state = PpoState::new(t.model.clone(), t.corpus.train.len(), &cfg).unwrap();
    let before = state.model.store.clone();
    let err =
        train_iteration(&mut state, &t.corpus.train, &t.corpus.val, &t.vocab, &cfg).unwrap_err();
    assert!(matches!(err, Error::Divergence { iter: 0, .. }));
    assert_eq!(state.model.store, before);
}

#[test]
fn config_checks() {
    assert!(PpoConfig::default().validate().is_ok());
    assert!(PpoConfig::full_scale().validate().is_ok());
    assert!(PpoConfig {
        clip: 1.0,
        ..PpoConfig::default()
    }
    .validate()
    .is_err());
    assert!(PpoConfig {
        group: 1,
        ..PpoConfig::default()
    }
    .validate()
    .is_err());
    let c = PpoConfig::full_scale();
    assert_eq!(c.lr(0), 1e-6);
    assert!((c.lr(150) - 5.5e-6).abs() < 1e-18);
    assert_eq!(c.lr(300), 1e-5);
    assert_eq!(c.lr(1000), 1e-5);
}
