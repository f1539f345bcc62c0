use std::collections::BTreeMap;

use nsmc::made::{HeadKind, HeadParams, MaskedNetwork, NetworkShape};
use nsmc::models::*;
use nsmc::rng::stream_seed;
use nsmc::train::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn toy() -> Example {
    build_example("conjugate-toy", &BTreeMap::new()).unwrap()
}

fn small_pump(n: usize) -> Example {
    let mut p = BTreeMap::new();
    p.insert("n".to_string(), n.to_string());
    p.insert("hidden".to_string(), "16,16".to_string());
    p.insert("components".to_string(), "2".to_string());
    build_example("pump", &p).unwrap()
}

fn key_of(ex: &Example, targets: usize) -> String {
    ex.plan.networks.iter().find(|n| n.shape.n_targets == targets).unwrap().key.clone()
}

#[test]
fn pump_dataset_rows_pool_over_the_plate() {
    let ex = small_pump(10);
    let data = synth_dataset(&ex.model, &ex.inverse, &ex.plan, 100, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(data[&key_of(&ex, 1)].rows(), 1000);
    assert_eq!(data[&key_of(&ex, 2)].rows(), 100);
}

#[test]
fn regression_single_sample_dataset() {
    let mut p = BTreeMap::new();
    p.insert("n".to_string(), "7".to_string());
    let ex = build_example("regression", &p).unwrap();
    let data = synth_dataset(&ex.model, &ex.inverse, &ex.plan, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let d = data.values().next().unwrap();
    assert_eq!(d.rows(), 1);
    assert_eq!(d.n_cond, 14);
    assert_eq!(d.n_targets, 3);
}

#[test]
fn datasets_are_seeded() {
    let ex = small_pump(4);
    let a = synth_dataset(&ex.model, &ex.inverse, &ex.plan, 50, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    let b = synth_dataset(&ex.model, &ex.inverse, &ex.plan, 50, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn fair_bernoulli_nll_is_d_log_2() {
    let d = 5;
    let shape = NetworkShape { n_targets: d, n_cond: 2, hidden_sizes: vec![4], head: HeadKind::Bernoulli };
    let net = MaskedNetwork::zeros(shape).unwrap();
    let mut data = FactorDataset::new("coins", 2, d);
    for r in 0..13 {
        data.cond.extend([r as f64, -1.0]);
        data.targets.extend((0..d).map(|i| ((r + i) % 2) as f64));
    }
    let nll = validation_nll(&net, &data).unwrap();
    assert!((nll - d as f64 * 2f64.ln()).abs() < 1e-12);
}

#[test]
fn validation_nll_matches_hand_sum() {
    let shape = NetworkShape { n_targets: 2, n_cond: 1, hidden_sizes: vec![5], head: HeadKind::Mixture { components: 2 } };
    let net = MaskedNetwork::new(shape, None, 4).unwrap();
    let rows = [([0.5], [1.0, -0.3]), ([-1.5], [0.2, 0.9]), ([2.0], [-2.0, 0.0])];
    let mut data = FactorDataset::new("three", 1, 2);
    for (c, t) in &rows {
        data.cond.extend(c);
        data.targets.extend(t);
    }
    let by_hand = -rows.iter().map(|(c, t)| net.log_prob(c, t).unwrap()).sum::<f64>() / 3.0;
    assert!((validation_nll(&net, &data).unwrap() - by_hand).abs() < 1e-12);
}

#[test]
fn zero_steps_leave_the_network_unchanged() {
    let ex = toy();
    let cfg = TrainConfig { max_steps_per_epoch: 0, ..TrainConfig::default() };
    let out = train_all(&ex.model, &ex.inverse, &ex.plan, &[cfg.clone()], BTreeMap::new()).unwrap();
    let init = MaskedNetwork::new(ex.plan.networks[0].shape.clone(), None, stream_seed(cfg.seed, 0, 2)).unwrap();
    assert_eq!(out.nets[0], init);
    assert!(out.trace.is_empty());
}

#[test]
fn factors_train_independently() {
    let ex = small_pump(3);
    let fast = TrainConfig { n_train: 300, n_validate: 100, minibatch: 20, max_steps_per_epoch: 10, n_epochs: 2, ..Default::default() };
    let frozen = TrainConfig { max_steps_per_epoch: 0, ..fast.clone() };
    let both = train_all(&ex.model, &ex.inverse, &ex.plan, &[fast.clone(), fast.clone()], BTreeMap::new()).unwrap();
    let only_first = train_all(&ex.model, &ex.inverse, &ex.plan, &[fast.clone(), frozen.clone()], BTreeMap::new()).unwrap();
    let only_second = train_all(&ex.model, &ex.inverse, &ex.plan, &[frozen, fast], BTreeMap::new()).unwrap();
    let json = |n: &MaskedNetwork| n.to_json();
    assert_eq!(json(&both.nets[0]), json(&only_first.nets[0]));
    assert_eq!(json(&both.nets[1]), json(&only_second.nets[1]));
    assert_ne!(json(&both.nets[1]), json(&only_first.nets[1]));
}

#[test]
fn training_is_value_deterministic() {
    let ex = small_pump(3);
    let cfg = TrainConfig { n_train: 300, n_validate: 100, minibatch: 20, max_steps_per_epoch: 10, n_epochs: 2, seed: 77, ..Default::default() };
    let a = train_all(&ex.model, &ex.inverse, &ex.plan, &[cfg.clone()], BTreeMap::new()).unwrap();
    let b = train_all(&ex.model, &ex.inverse, &ex.plan, &[cfg], BTreeMap::new()).unwrap();
    assert_eq!(a.artifact.to_json(), b.artifact.to_json());
    assert_eq!(a.trace, b.trace);
}

#[test]
fn conjugate_toy_training_amortizes() {
    let ex = toy();
    let out = train_all(&ex.model, &ex.inverse, &ex.plan, &[TrainConfig::default()], BTreeMap::new()).unwrap();
    let first = out.trace.first().unwrap().validation_nll;
    let last = out.trace.last().unwrap().validation_nll;
    assert!(last < first, "validation NLL {first} -> {last}");

    let net = &out.nets[0];
    let mean_at = |y: f64| match net.forward(&[y], &[0.0]).unwrap() {
        HeadParams::Mixture(m) => m.mean(0),
        HeadParams::Bernoulli(_) => unreachable!(),
    };
    let (a, b) = (mean_at(-1.5), mean_at(1.0));
    assert!((a - toy_posterior(-1.5).0).abs() < 0.05, "mean at -1.5: {a}");
    assert!((b - toy_posterior(1.0).0).abs() < 0.05, "mean at 1.0: {b}");
    assert!(a != b);

    // the cross-entropy bounds the true conditional entropy from above
    let fresh = synth_dataset(&ex.model, &ex.inverse, &ex.plan, 200_000, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
    let data = fresh.values().next().unwrap();
    let lps = net.log_prob_batch(data.cond_view(), data.target_view()).unwrap();
    let n = lps.len() as f64;
    let ce = -lps.iter().sum::<f64>() / n;
    let se = (lps.iter().map(|l| (-l - ce).powi(2)).sum::<f64>() / n).sqrt() / n.sqrt();
    let entropy = 0.5 * (std::f64::consts::PI * std::f64::consts::E).ln();
    assert!(ce > entropy - 3.0 * se, "cross-entropy {ce} below entropy {entropy}");
    assert!(ce - entropy < 0.02, "cross-entropy {ce} far from entropy {entropy}");
}

#[test]
fn validation_nll_improves_over_training_in_most_runs() {
    let ex = toy();
    let improved = (0..10)
        .filter(|&seed| {
            let cfg = TrainConfig { n_train: 2000, n_validate: 500, n_epochs: 10, seed, ..Default::default() };
            let out = train_all(&ex.model, &ex.inverse, &ex.plan, &[cfg], BTreeMap::new()).unwrap();
            out.trace.last().unwrap().validation_nll < out.trace.first().unwrap().validation_nll
        })
        .count();
    assert!(improved >= 9, "improved in {improved} of 10 runs");
}

#[test]
fn artifact_round_trip_and_version_check() {
    let ex = small_pump(3);
    let cfg = TrainConfig { n_train: 200, n_validate: 50, minibatch: 20, max_steps_per_epoch: 3, n_epochs: 1, ..Default::default() };
    let out = train_all(&ex.model, &ex.inverse, &ex.plan, &[cfg], ex.params.clone()).unwrap();
    let text = out.artifact.to_json();
    let back = TrainArtifact::from_json(&text).unwrap();
    assert_eq!(back, out.artifact);
    assert_eq!(back.networks().unwrap(), out.nets);
    back.check_compatible(&ex.model, &ex.inverse).unwrap();

    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["version"] = serde_json::json!(ARTIFACT_VERSION + 1);
    assert!(matches!(TrainArtifact::from_json(&v.to_string()), Err(TrainError::Artifact(_))));

    let other = small_pump(4);
    assert!(back.check_compatible(&other.model, &other.inverse).is_err());
}

#[test]
fn invalid_configs_are_rejected() {
    let ex = toy();
    for cfg in [
        TrainConfig { minibatch: 0, ..Default::default() },
        TrainConfig { n_validate: 0, ..Default::default() },
        TrainConfig { minibatch: 20_000, ..Default::default() },
        TrainConfig { adam: AdamConfig { step_size: 0.0, ..Default::default() }, ..Default::default() },
    ] {
        let r = train_all(&ex.model, &ex.inverse, &ex.plan, &[cfg], BTreeMap::new());
        assert!(matches!(r, Err(TrainError::InvalidConfig(_))), "{r:?}");
    }
    let two = [TrainConfig::default(), TrainConfig::default()];
    assert!(matches!(train_all(&ex.model, &ex.inverse, &ex.plan, &two, BTreeMap::new()), Err(TrainError::InvalidConfig(_))));
}
