mod common;

use common::*;
use nsmc::graph::*;
use nsmc::inverse::{assign_share_groups, build_default_inverse, group_joint_blocks};
use nsmc::made::MaskedNetwork;
use nsmc::models::*;
use nsmc::rng::stream;
use nsmc::smc::*;
use nsmc::train::{CondEncoding, NetworkSettings, ProposalPlan, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn standard_normal() -> GraphModel {
    GraphModel::builder("normal")
        .node("x", Role::Latent, vec![], DistributionSpec::fixed(Distribution::Gaussian { mean: 0.0, variance: 1.0 }))
        .node("u", Role::Latent, vec!["x".into()], DistributionSpec::new(Family::Gaussian, |v| Distribution::Gaussian { mean: v[0], variance: 2.0 }))
        .build()
        .unwrap()
}

#[test]
fn proposal_equal_to_target_gives_exact_weights() {
    let model = standard_normal();
    let obs = Assignment::empty(model.len());
    let prop = PriorProposal::single_block(&model);
    let target = ModelTarget::for_proposal(&model, &obs, &prop).unwrap();
    for seed in 0..5 {
        let ps = importance_sample(&target, &prop, 64, seed).unwrap();
        assert!(ps.log_weights.iter().all(|w| *w == 0.0));
        assert!(ps.normalized_weights().iter().all(|w| (w - 1.0 / 64.0).abs() < 1e-15));
        assert!(ps.log_marginal_likelihood().abs() < 1e-14);
        assert!((ps.estimate(|_| 1.0) - 1.0).abs() < 1e-12);
    }
}

#[test]
fn no_resampling_when_ess_stays_full() {
    let model = standard_normal();
    let obs = Assignment::empty(model.len());
    let prop = PriorProposal::per_node(&model);
    let target = ModelTarget::for_proposal(&model, &obs, &prop).unwrap();
    let ps = run_smc(&target, &prop, 32, &ResamplingScheme::default(), 3).unwrap();
    assert_eq!(ps.steps(), 2);
    for row in &ps.ancestry {
        assert_eq!(row, &(0..32).collect::<Vec<_>>());
    }
    assert!(ps.diagnostics.iter().all(|d| !d.resampled && d.unique_ancestries == 32 && d.ess == 32.0));
}

#[test]
fn support_mismatch_is_degenerate() {
    let model = GraphModel::builder("gamma")
        .node("x", Role::Latent, vec![], DistributionSpec::fixed(Distribution::Gamma { shape: 2.0, rate: 1.0 }))
        .build()
        .unwrap();
    let obs = Assignment::empty(1);
    let prop = CustomProposal::new(vec![vec![0]], |_, s, _| {
        s[0] = -1.0;
        0.0
    });
    let target = ModelTarget::for_proposal(&model, &obs, &prop).unwrap();
    let r = importance_sample(&target, &prop, 10, 0);
    assert!(matches!(r, Err(SmcError::DegenerateWeights { step: 1, particles: 10 })), "{r:?}");
}

#[test]
fn single_particle_estimates_its_own_trajectory() {
    let model = standard_normal();
    let obs = Assignment::empty(model.len());
    let prop = PriorProposal::per_node(&model);
    let target = ModelTarget::for_proposal(&model, &obs, &prop).unwrap();
    let ps = run_smc(&target, &prop, 1, &ResamplingScheme::always(ResamplingKind::Multinomial), 0).unwrap();
    let x = ps.particles[0][0];
    assert_eq!(ps.estimate(|p| f64::from(p[0] == x)), 1.0);
}

#[test]
fn bootstrap_increment_is_the_emission_density() {
    let c = FhmmConfig { hidden: vec![8], ..FhmmConfig::with_devices(3, 4, 30.0, 90.0) };
    let ex = fhmm_example(&c);
    let ep = generate_episode(&c, 5).unwrap();
    let obs = fhmm_observed(&ex, &c, &ep.y);
    let blocks: Vec<Vec<usize>> = ex.inverse.factors.iter().map(|f| f.targets.clone()).collect();
    let prop = PriorProposal::with_blocks(&ex.model, blocks).unwrap();
    let target = ModelTarget::for_proposal(&ex.model, &obs, &prop).unwrap();
    let mut states = vec![target.initial_values(); 6];
    let mut rngs: Vec<ChaCha8Rng> = (0..6).map(|i| stream(1, i, 0)).collect();
    let mut log_q = vec![0.0; 6];
    for t in 0..c.t {
        prop.propose(t, &mut states, &mut rngs, &mut log_q).unwrap();
        for (s, lq) in states.iter().zip(&log_q) {
            let w = target.log_increment(t, s) - lq;
            let g = joint_log_emit(&c, ep.y[t], joint_state(&c, s, t));
            assert!((w - g).abs() < 1e-9, "step {t}: weight {w}, emission {g}");
        }
    }
}

#[test]
fn resampling_counts_match_weights() {
    let w = [0.1, 0.25, 0.05, 0.4, 0.2];
    let k = 5;
    let reps = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut multi = [0usize; 5];
    for _ in 0..reps {
        for a in resample(&w, k, ResamplingKind::Multinomial, &mut rng) {
            multi[a] += 1;
        }
        let mut sys = [0usize; 5];
        for a in resample(&w, k, ResamplingKind::Systematic, &mut rng) {
            sys[a] += 1;
        }
        for (c, p) in sys.iter().zip(&w) {
            let e = k as f64 * p;
            assert!(*c as f64 >= e.floor() && *c as f64 <= e.ceil(), "systematic count {c} for expected {e}");
        }
    }
    for (c, p) in multi.iter().zip(&w) {
        let mean = *c as f64 / reps as f64;
        let se = (k as f64 * p * (1.0 - p) / reps as f64).sqrt();
        assert!((mean - k as f64 * p).abs() < 3.0 * se, "multinomial mean count {mean} vs {}", k as f64 * p);
    }
}

#[test]
fn ancestry_is_monotone_under_constant_resampling() {
    let c = FhmmConfig { hidden: vec![8], ..FhmmConfig::with_devices(2, 12, 30.0, 60.0) };
    let ex = fhmm_example(&c);
    let ep = generate_episode(&c, 2).unwrap();
    let obs = fhmm_observed(&ex, &c, &ep.y);
    let blocks: Vec<Vec<usize>> = ex.inverse.factors.iter().map(|f| f.targets.clone()).collect();
    let prop = PriorProposal::with_blocks(&ex.model, blocks).unwrap();
    let target = ModelTarget::for_proposal(&ex.model, &obs, &prop).unwrap();
    for kind in [ResamplingKind::Multinomial, ResamplingKind::Systematic] {
        let ps = run_smc(&target, &prop, 50, &ResamplingScheme::always(kind), 8).unwrap();
        let counts: Vec<usize> = (1..=ps.steps()).map(|t| ps.unique_ancestries(t)).collect();
        assert!(counts.windows(2).all(|w| w[1] <= w[0]), "{counts:?}");
        for t in 1..=ps.steps() {
            assert_eq!(ps.unique_ancestries(t), unique_ancestries_from_table(&ps.ancestry, t));
        }
        let total: f64 = ps.normalized_weights().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(ps.log_marginal_likelihood().is_finite());
    }
}

#[test]
fn final_state_posterior_matches_forward_backward() {
    let c = FhmmConfig { hidden: vec![8], ..FhmmConfig::with_devices(2, 5, 30.0, 70.0) };
    let ex = fhmm_example(&c);
    let ep = generate_episode(&c, 12).unwrap();
    let obs = fhmm_observed(&ex, &c, &ep.y);
    let exact = FhmmOracle::new(&c, &ep.y).unwrap().smoothing_marginals();
    let blocks: Vec<Vec<usize>> = ex.inverse.factors.iter().map(|f| f.targets.clone()).collect();
    let prop = PriorProposal::with_blocks(&ex.model, blocks).unwrap();
    let target = ModelTarget::for_proposal(&ex.model, &obs, &prop).unwrap();
    let last = c.t - 1;
    let runs: Vec<Vec<f64>> = (0..20)
        .map(|s| {
            let ps = run_smc(&target, &prop, 5000, &ResamplingScheme::default(), s).unwrap();
            (0..c.d).map(|i| ps.estimate(|p| p[c.x_index(last, i)])).collect()
        })
        .collect();
    for i in 0..c.d {
        let (m, se) = mean_se(&runs.iter().map(|r| r[i]).collect::<Vec<_>>());
        assert!((m - exact[last][i]).abs() < 3.0 * se.max(1e-4), "device {i}: {m} ± {se} vs {}", exact[last][i]);
    }
}

fn evidence_ratio_mean(
    target: &dyn TargetSequence,
    prop: &dyn Proposal,
    k: usize,
    scheme: ResamplingScheme,
    exact: f64,
    reps: u64,
) -> (f64, f64) {
    let ratios: Vec<f64> = (0..reps)
        .map(|s| (run_smc(target, prop, k, &scheme, s).unwrap().log_marginal_likelihood() - exact).exp())
        .collect();
    mean_se(&ratios)
}

#[test]
fn evidence_is_unbiased_on_a_small_hmm() {
    let c = FhmmConfig { hidden: vec![16], ..FhmmConfig::with_devices(1, 4, 40.0, 40.0) };
    let ex = fhmm_example(&c);
    let ep = generate_episode(&c, 21).unwrap();
    let obs = fhmm_observed(&ex, &c, &ep.y);
    let exact = FhmmOracle::new(&c, &ep.y).unwrap().log_evidence;
    let nets = train(&ex, TrainConfig { n_train: 2000, n_validate: 400, n_epochs: 5, ..Default::default() });
    let learned = learned(&ex, &nets);
    let blocks: Vec<Vec<usize>> = ex.inverse.factors.iter().map(|f| f.targets.clone()).collect();
    let prior = PriorProposal::with_blocks(&ex.model, blocks).unwrap();
    let target = ModelTarget::for_proposal(&ex.model, &obs, &prior).unwrap();
    let mut estimates = Vec::new();
    for prop in [&prior as &dyn Proposal, &learned] {
        for kind in [ResamplingKind::Multinomial, ResamplingKind::Systematic] {
            let (m, se) = evidence_ratio_mean(&target, prop, 20, ResamplingScheme::always(kind), exact, 1000);
            assert!((m - 1.0).abs() < 3.0 * se, "{} {kind:?}: ratio {m} ± {se}", prop.name());
            estimates.push((m, se));
        }
    }
    // the two proposals target the same quantity
    let (a, sa) = estimates[0];
    let (b, sb) = estimates[2];
    assert!((a - b).abs() < 3.0 * (sa * sa + sb * sb).sqrt());
}

/// a ~ Bernoulli(0.5), x[n] | a ~ Bernoulli(0.8 or 0.3), y[n] | x[n] ~ N(x[n], 1).
fn mixture_of_coins(n: usize) -> GraphModel {
    let mut b = GraphModelBuilder::new("coins");
    b.add_node("a", Role::Latent, vec![], DistributionSpec::fixed(Distribution::Bernoulli { probability: 0.5 }));
    for i in 0..n {
        b.add_node(
            VariableId::indexed("x", i),
            Role::Latent,
            vec!["a".into()],
            DistributionSpec::new(Family::Bernoulli, |v| Distribution::Bernoulli { probability: if v[0] > 0.5 { 0.8 } else { 0.3 } }),
        );
        b.add_node(
            VariableId::indexed("y", i),
            Role::Observed,
            vec![VariableId::indexed("x", i)],
            DistributionSpec::new(Family::Gaussian, |v| Distribution::Gaussian { mean: v[0], variance: 1.0 }),
        );
    }
    b.add_plate("items", &["x", "y"], n);
    b.build().unwrap()
}

fn normal_pdf(y: f64, m: f64) -> f64 {
    (-(y - m) * (y - m) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

#[test]
fn divide_and_conquer_with_exact_local_proposals() {
    let ys = [0.3, 1.7, -0.4, 0.9];
    let model = mixture_of_coins(ys.len());
    let inv = assign_share_groups(&group_joint_blocks(&build_default_inverse(&model).unwrap()), &model);
    let plan = ProposalPlan::new(&model, &inv, |_, _| NetworkSettings {
        hidden_sizes: vec![2],
        components: 1,
        encoding: CondEncoding::Concat,
    })
    .unwrap();
    assert_eq!(plan.networks.len(), 2);
    let mut nets = Vec::new();
    for np in &plan.networks {
        let mut net = MaskedNetwork::zeros(np.shape.clone()).unwrap();
        if np.key.contains('#') {
            // logit q(x=1 | y) = relu(y) - relu(-y) - 0.5 = log p(y|1) - log p(y|0)
            net.set_weight(0, 0, 0, 1.0);
            net.set_weight(0, 0, 1, -1.0);
            net.set_weight(1, 0, 0, 1.0);
            net.set_weight(1, 1, 0, -1.0);
            net.bias_mut(1)[0] = -0.5;
        }
        nets.push(net);
    }
    let prop = LearnedProposal::new(&inv, plan, nets).unwrap();
    let mut obs = Assignment::empty(model.len());
    for (i, y) in ys.iter().enumerate() {
        obs.set(model.index_of(&VariableId::indexed("y", i)).unwrap(), *y);
    }
    let leaf_z: f64 = ys.iter().map(|&y| (normal_pdf(y, 0.0) + normal_pdf(y, 1.0)).ln()).sum();
    let exact: f64 = [0.3, 0.8]
        .iter()
        .map(|&p| 0.5 * ys.iter().map(|&y| (1.0 - p) * normal_pdf(y, 0.0) + p * normal_pdf(y, 1.0)).product::<f64>())
        .sum::<f64>()
        .ln();
    let mut ratios = Vec::new();
    for seed in 0..400 {
        let ps = dc_smc(&model, &obs, &prop, 50, ResamplingKind::Systematic, seed).unwrap();
        // uniform local weights make each leaf's evidence exact
        assert!((ps.log_evidence_base - leaf_z).abs() < 1e-10);
        ratios.push((ps.log_marginal_likelihood() - exact).exp());
    }
    let (m, se) = mean_se(&ratios);
    assert!((m - 1.0).abs() < 3.0 * se, "ratio {m} ± {se}");
}

#[test]
fn divide_and_conquer_agrees_with_smc_on_one_pump() {
    let ex = build_example("pump", &params(&[("n", "1"), ("hidden", "32,32"), ("components", "3")])).unwrap();
    let nets = train(&ex, TrainConfig { n_train: 3000, n_validate: 500, n_epochs: 10, ..Default::default() });
    let prop = learned(&ex, &nets);
    let obs = load_observations(&ex, Some("80 3\n"), 0).unwrap();
    let target = ModelTarget::for_proposal(&ex.model, &obs, &prop).unwrap();
    let mut dc = Vec::new();
    let mut smc = Vec::new();
    for seed in 0..30 {
        dc.push(dc_smc(&ex.model, &obs, &prop, 2000, ResamplingKind::Systematic, seed).unwrap().log_marginal_likelihood());
        smc.push(run_smc(&target, &prop, 2000, &ResamplingScheme::default(), seed).unwrap().log_marginal_likelihood());
    }
    let (a, sa) = mean_se(&dc);
    let (b, sb) = mean_se(&smc);
    assert!((a - b).abs() < 3.0 * (sa * sa + sb * sb).sqrt().max(1e-3), "D&C {a} ± {sa}, SMC {b} ± {sb}");
}

#[test]
fn engines_reject_bad_configurations() {
    let model = standard_normal();
    let obs = Assignment::empty(model.len());
    let prop = PriorProposal::per_node(&model);
    let target = ModelTarget::for_proposal(&model, &obs, &prop).unwrap();
    assert!(matches!(run_smc(&target, &prop, 0, &ResamplingScheme::default(), 0), Err(SmcError::InvalidConfig(_))));
    assert!(matches!(importance_sample(&target, &prop, 5, 0), Err(SmcError::InvalidConfig(_))));
    let bad = ResamplingScheme { kind: ResamplingKind::Systematic, trigger: ResamplingTrigger::EssBelow(1.5) };
    assert!(run_smc(&target, &prop, 5, &bad, 0).is_err());
    let single = PriorProposal::single_block(&model);
    assert!(matches!(run_smc(&target, &single, 5, &ResamplingScheme::default(), 0), Err(SmcError::Mismatch(_))));
    assert!(PriorProposal::with_blocks(&model, vec![vec![1], vec![0]]).is_err());
}
