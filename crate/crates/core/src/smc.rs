//! Importance sampling, sequential Monte Carlo and two-level
//! divide-and-conquer SMC over model-defined target sequences.
//!
//! Step indices passed to [`TargetSequence`] and [`Proposal`] are 0-based.
//! Diagnostics and [`ParticleSystem::unique_ancestries`] number steps from 1.

use std::collections::BTreeSet;

use ndarray::ArrayView2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Assignment, GraphError, GraphModel};
use crate::inverse::InverseModel;
use crate::made::{MadeError, MaskedNetwork};
use crate::rng::stream;
use crate::train::{ProposalPlan, TrainArtifact, TrainError};

/// Stream index reserved for resampling draws.
const RESAMPLE_STREAM: u64 = u64::MAX;

#[derive(Debug, thiserror::Error)]
pub enum SmcError {
    #[error("degenerate weights at step {step}: all {particles} particles have zero weight")]
    DegenerateWeights { step: usize, particles: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("proposal and target disagree: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Network(#[from] MadeError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Sequence of unnormalized targets over growing blocks of latents.
pub trait TargetSequence {
    fn n_steps(&self) -> usize;
    /// Latent node indices introduced at `step`.
    fn block(&self, step: usize) -> &[usize];
    /// Full-length value vector with observed nodes set and latents unset.
    fn initial_values(&self) -> Vec<f64>;
    /// log γ_step − log γ_{step−1} evaluated on a state whose blocks up to `step` are filled.
    fn log_increment(&self, step: usize, values: &[f64]) -> f64;
}

/// Draws the block of one step for every particle.
pub trait Proposal {
    fn blocks(&self) -> Vec<Vec<usize>>;
    /// Fills the block of `step` in every state and writes each draw's log density to `log_q`.
    fn propose(
        &self,
        step: usize,
        states: &mut [Vec<f64>],
        rngs: &mut [ChaCha8Rng],
        log_q: &mut [f64],
    ) -> Result<(), SmcError>;
    fn name(&self) -> &str;
}

/// Model factors added as soon as every variable they touch is assigned.
/// Factors of nodes that depend only on observed values enter at step 0.
pub struct ModelTarget<'a> {
    model: &'a GraphModel,
    initial: Vec<f64>,
    blocks: Vec<Vec<usize>>,
    step_nodes: Vec<Vec<usize>>,
}

impl<'a> ModelTarget<'a> {
    pub fn new(model: &'a GraphModel, observed: &Assignment, blocks: Vec<Vec<usize>>) -> Result<Self, SmcError> {
        if observed.len() != model.len() {
            return Err(SmcError::Mismatch(format!(
                "assignment has {} entries, model has {}",
                observed.len(),
                model.len()
            )));
        }
        if blocks.is_empty() {
            return Err(SmcError::InvalidConfig("target needs at least one step".into()));
        }
        let mut available_at = vec![usize::MAX; model.len()];
        let mut initial = vec![f64::NAN; model.len()];
        for o in model.observed() {
            if !observed.is_set(o) {
                return Err(SmcError::Graph(GraphError::MissingVariable(model.id(o).to_string())));
            }
            initial[o] = observed.values()[o];
            available_at[o] = 0;
        }
        for (s, b) in blocks.iter().enumerate() {
            for &v in b {
                if v >= model.len() || !model.node(v).is_latent() {
                    return Err(SmcError::Mismatch(format!("block {s} contains a non-latent index {v}")));
                }
                if available_at[v] != usize::MAX {
                    return Err(SmcError::Mismatch(format!("{} appears in two blocks", model.id(v))));
                }
                available_at[v] = s;
            }
        }
        if let Some(v) = model.latents().into_iter().find(|&v| available_at[v] == usize::MAX) {
            return Err(SmcError::Mismatch(format!("latent {} is never proposed", model.id(v))));
        }
        let mut step_nodes = vec![Vec::new(); blocks.len()];
        for v in 0..model.len() {
            let s = model.node(v).parents.iter().map(|&p| available_at[p]).fold(available_at[v], usize::max);
            step_nodes[s].push(v);
        }
        Ok(Self { model, initial, blocks, step_nodes })
    }

    /// Blocks taken from a proposal.
    pub fn for_proposal(model: &'a GraphModel, observed: &Assignment, proposal: &dyn Proposal) -> Result<Self, SmcError> {
        Self::new(model, observed, proposal.blocks())
    }

    pub fn step_nodes(&self, step: usize) -> &[usize] {
        &self.step_nodes[step]
    }
}

impl TargetSequence for ModelTarget<'_> {
    fn n_steps(&self) -> usize {
        self.blocks.len()
    }

    fn block(&self, step: usize) -> &[usize] {
        &self.blocks[step]
    }

    fn initial_values(&self) -> Vec<f64> {
        self.initial.clone()
    }

    fn log_increment(&self, step: usize, values: &[f64]) -> f64 {
        self.step_nodes[step]
            .iter()
            .map(|&v| self.model.log_factor(v, values).unwrap_or(f64::NEG_INFINITY))
            .sum()
    }
}

/// Proposes each block from the model's own conditionals (bootstrap proposal).
pub struct PriorProposal<'a> {
    model: &'a GraphModel,
    blocks: Vec<Vec<usize>>,
}

impl<'a> PriorProposal<'a> {
    /// Blocks must list each node after its latent parents.
    pub fn with_blocks(model: &'a GraphModel, blocks: Vec<Vec<usize>>) -> Result<Self, SmcError> {
        let mut done: BTreeSet<usize> = model.observed().into_iter().collect();
        for b in &blocks {
            for &v in b {
                if let Some(&p) = model.node(v).parents.iter().find(|p| !done.contains(p)) {
                    return Err(SmcError::InvalidConfig(format!(
                        "prior proposal cannot draw {} before its parent {}",
                        model.id(v),
                        model.id(p)
                    )));
                }
                done.insert(v);
            }
        }
        Ok(Self { model, blocks })
    }

    /// One step per latent in topological order.
    pub fn per_node(model: &'a GraphModel) -> Self {
        let blocks = model.latents().into_iter().map(|v| vec![v]).collect();
        Self { model, blocks }
    }

    /// All latents in a single step (likelihood-weighted importance sampling).
    pub fn single_block(model: &'a GraphModel) -> Self {
        Self { model, blocks: vec![model.latents()] }
    }
}

impl Proposal for PriorProposal<'_> {
    fn blocks(&self) -> Vec<Vec<usize>> {
        self.blocks.clone()
    }

    fn propose(
        &self,
        step: usize,
        states: &mut [Vec<f64>],
        rngs: &mut [ChaCha8Rng],
        log_q: &mut [f64],
    ) -> Result<(), SmcError> {
        for ((state, rng), lq) in states.iter_mut().zip(rngs.iter_mut()).zip(log_q.iter_mut()) {
            *lq = 0.0;
            for &v in &self.blocks[step] {
                let d = self.model.conditional(v, state)?;
                let x = d.sample(rng);
                *lq += d.log_density(x);
                state[v] = x;
            }
        }
        Ok(())
    }

    fn name(&self) -> &str {
        "prior"
    }
}

/// Proposes each inverse factor's block from its trained network.
pub struct LearnedProposal<'a> {
    inv: &'a InverseModel,
    plan: ProposalPlan,
    nets: Vec<MaskedNetwork>,
    factor_network: Vec<usize>,
}

impl<'a> LearnedProposal<'a> {
    pub fn new(inv: &'a InverseModel, plan: ProposalPlan, nets: Vec<MaskedNetwork>) -> Result<Self, SmcError> {
        if plan.networks.len() != nets.len() {
            return Err(SmcError::Mismatch(format!("{} plans for {} networks", plan.networks.len(), nets.len())));
        }
        for (p, n) in plan.networks.iter().zip(&nets) {
            if &p.shape != n.shape() {
                return Err(SmcError::Mismatch(format!("network {} does not match its plan", p.key)));
            }
        }
        let factor_network = plan.network_of_factor(inv.factors.len());
        if factor_network.contains(&usize::MAX) {
            return Err(SmcError::Mismatch("some inverse factor has no network".into()));
        }
        Ok(Self { inv, plan, nets, factor_network })
    }

    pub fn from_artifact(model: &GraphModel, inv: &'a InverseModel, artifact: &TrainArtifact) -> Result<Self, SmcError> {
        artifact.check_compatible(model, inv)?;
        Self::new(inv, artifact.plan(), artifact.networks()?)
    }

    pub fn inverse(&self) -> &InverseModel {
        self.inv
    }

    /// Draws the targets of inverse factor `factor` for every state.
    pub fn propose_factor(
        &self,
        factor: usize,
        states: &mut [Vec<f64>],
        rngs: &mut [ChaCha8Rng],
        log_q: &mut [f64],
    ) -> Result<(), SmcError> {
        let np = &self.plan.networks[self.factor_network[factor]];
        let net = &self.nets[self.factor_network[factor]];
        let n_cond = np.shape.n_cond;
        let mut cond = Vec::with_capacity(states.len() * n_cond);
        for s in states.iter() {
            np.encode_cond(self.inv, factor, s, &mut cond);
        }
        let view = ArrayView2::from_shape((states.len(), n_cond), &cond).expect("row-major conditioners");
        let mut rng_refs: Vec<&mut ChaCha8Rng> = rngs.iter_mut().collect();
        let (z, lps) = net.sample_batch(view, &mut rng_refs)?;
        let targets = &self.inv.factors[factor].targets;
        for (r, state) in states.iter_mut().enumerate() {
            let mut lq = lps[r];
            for (j, (&v, t)) in targets.iter().zip(&np.target_transforms).enumerate() {
                let x = t.inverse(z[[r, j]]);
                lq += t.log_jacobian(x);
                state[v] = x;
            }
            log_q[r] = lq;
        }
        Ok(())
    }
}

impl Proposal for LearnedProposal<'_> {
    fn blocks(&self) -> Vec<Vec<usize>> {
        self.inv.factors.iter().map(|f| f.targets.clone()).collect()
    }

    fn propose(
        &self,
        step: usize,
        states: &mut [Vec<f64>],
        rngs: &mut [ChaCha8Rng],
        log_q: &mut [f64],
    ) -> Result<(), SmcError> {
        self.propose_factor(step, states, rngs, log_q)
    }

    fn name(&self) -> &str {
        "learned"
    }
}

type CustomSampler = dyn Fn(usize, &mut [f64], &mut ChaCha8Rng) -> f64 + Send + Sync;

/// Proposal defined by a per-particle sampling closure returning log q.
pub struct CustomProposal {
    blocks: Vec<Vec<usize>>,
    sampler: Box<CustomSampler>,
}

impl CustomProposal {
    pub fn new(
        blocks: Vec<Vec<usize>>,
        sampler: impl Fn(usize, &mut [f64], &mut ChaCha8Rng) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self { blocks, sampler: Box::new(sampler) }
    }
}

impl Proposal for CustomProposal {
    fn blocks(&self) -> Vec<Vec<usize>> {
        self.blocks.clone()
    }

    fn propose(
        &self,
        step: usize,
        states: &mut [Vec<f64>],
        rngs: &mut [ChaCha8Rng],
        log_q: &mut [f64],
    ) -> Result<(), SmcError> {
        for ((s, r), lq) in states.iter_mut().zip(rngs.iter_mut()).zip(log_q.iter_mut()) {
            *lq = (self.sampler)(step, s, r);
        }
        Ok(())
    }

    fn name(&self) -> &str {
        "custom"
    }
}

/// Runs every step of an inner proposal as a single step.
pub struct Collapsed<P>(pub P);

impl<P: Proposal> Proposal for Collapsed<P> {
    fn blocks(&self) -> Vec<Vec<usize>> {
        vec![self.0.blocks().concat()]
    }

    fn propose(
        &self,
        _step: usize,
        states: &mut [Vec<f64>],
        rngs: &mut [ChaCha8Rng],
        log_q: &mut [f64],
    ) -> Result<(), SmcError> {
        let mut part = vec![0.0; log_q.len()];
        log_q.fill(0.0);
        for s in 0..self.0.blocks().len() {
            self.0.propose(s, states, rngs, &mut part)?;
            for (a, b) in log_q.iter_mut().zip(&part) {
                *a += b;
            }
        }
        Ok(())
    }

    fn name(&self) -> &str {
        self.0.name()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResamplingKind {
    Multinomial,
    Systematic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResamplingTrigger {
    Always,
    EssBelow(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResamplingScheme {
    pub kind: ResamplingKind,
    pub trigger: ResamplingTrigger,
}

impl Default for ResamplingScheme {
    fn default() -> Self {
        Self { kind: ResamplingKind::Systematic, trigger: ResamplingTrigger::EssBelow(0.5) }
    }
}

impl ResamplingScheme {
    pub fn always(kind: ResamplingKind) -> Self {
        Self { kind, trigger: ResamplingTrigger::Always }
    }

    pub fn validate(&self) -> Result<(), SmcError> {
        match self.trigger {
            ResamplingTrigger::EssBelow(f) if !(f > 0.0 && f <= 1.0) => {
                Err(SmcError::InvalidConfig(format!("ESS threshold {f} outside (0, 1]")))
            }
            _ => Ok(()),
        }
    }
}

/// Draws `k` ancestor indices from normalized `weights`.
pub fn resample<R: Rng + ?Sized>(weights: &[f64], k: usize, kind: ResamplingKind, rng: &mut R) -> Vec<usize> {
    let mut cdf = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for w in weights {
        acc += w;
        cdf.push(acc);
    }
    let total = acc;
    let last = weights.iter().rposition(|&w| w > 0.0).unwrap_or(weights.len() - 1);
    let locate = |u: f64| cdf.partition_point(|&c| c <= u).min(last);
    match kind {
        ResamplingKind::Multinomial => (0..k).map(|_| locate(rng.random::<f64>() * total)).collect(),
        ResamplingKind::Systematic => {
            let u0: f64 = rng.random();
            (0..k).map(|i| locate((i as f64 + u0) / k as f64 * total)).collect()
        }
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn log_mean_exp(v: &[f64]) -> f64 {
    log_sum_exp(v) - (v.len() as f64).ln()
}

fn normalize(log_w: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(log_w);
    log_w.iter().map(|l| (l - lse).exp()).collect()
}

/// Distinct step-1 roots among the lineages of the particles alive at step `t`.
/// `ancestry[n][k]` is the index at step `n − 1` of particle `k`'s parent
/// (row 0 is ignored).
pub fn unique_ancestries_from_table(ancestry: &[Vec<usize>], t: usize) -> usize {
    assert!(t >= 1 && t <= ancestry.len(), "step {t} outside 1..={}", ancestry.len());
    let k = ancestry[t - 1].len();
    let mut idx: Vec<usize> = (0..k).collect();
    for n in (1..t).rev() {
        for i in idx.iter_mut() {
            *i = ancestry[n][*i];
        }
    }
    idx.sort_unstable();
    idx.dedup();
    idx.len()
}

/// Per-step diagnostic record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub ess: f64,
    pub unique_ancestries: usize,
    pub log_evidence: f64,
    pub resampled: bool,
}

/// K weighted trajectories plus their ancestry and evidence bookkeeping.
#[derive(Debug, Clone)]
pub struct ParticleSystem {
    pub particles: Vec<Vec<f64>>,
    /// Unnormalized log weights accumulated since the last resampling.
    pub log_weights: Vec<f64>,
    /// Parent indices per completed step; row 0 is the identity.
    pub ancestry: Vec<Vec<usize>>,
    /// Evidence accumulated over finished resampling epochs.
    pub log_evidence_base: f64,
    pub seed: u64,
    pub diagnostics: Vec<StepRecord>,
    roots: Vec<Vec<usize>>,
}

impl ParticleSystem {
    pub fn new(initial: Vec<f64>, k: usize, seed: u64) -> Self {
        Self {
            particles: vec![initial; k],
            log_weights: vec![0.0; k],
            ancestry: Vec::new(),
            log_evidence_base: 0.0,
            seed,
            diagnostics: Vec::new(),
            roots: Vec::new(),
        }
    }

    pub fn k(&self) -> usize {
        self.particles.len()
    }

    /// Number of completed steps.
    pub fn steps(&self) -> usize {
        self.ancestry.len()
    }

    pub fn normalized_weights(&self) -> Vec<f64> {
        normalize(&self.log_weights)
    }

    pub fn ess(&self) -> f64 {
        1.0 / self.normalized_weights().iter().map(|w| w * w).sum::<f64>()
    }

    /// Distinct step-1 lineages among the particles at step `t` (1-based).
    pub fn unique_ancestries(&self, t: usize) -> usize {
        let mut r = self.roots[t - 1].clone();
        r.sort_unstable();
        r.dedup();
        r.len()
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        self.log_evidence_base + log_mean_exp(&self.log_weights)
    }

    /// Weighted average of `h` over the particles.
    pub fn estimate(&self, h: impl Fn(&[f64]) -> f64) -> f64 {
        self.normalized_weights().iter().zip(&self.particles).filter(|(w, _)| **w > 0.0).map(|(w, p)| w * h(p)).sum()
    }

    /// Weighted mean and standard deviation of each listed node.
    pub fn posterior_summary(&self, nodes: &[usize]) -> Vec<(f64, f64)> {
        let w = self.normalized_weights();
        nodes
            .iter()
            .map(|&v| {
                let mean: f64 = w.iter().zip(&self.particles).filter(|(w, _)| **w > 0.0).map(|(w, p)| w * p[v]).sum();
                let var: f64 = w
                    .iter()
                    .zip(&self.particles)
                    .filter(|(w, _)| **w > 0.0)
                    .map(|(w, p)| w * (p[v] - mean).powi(2))
                    .sum();
                (mean, var.max(0.0).sqrt())
            })
            .collect()
    }

    fn resample_now(&mut self, kind: ResamplingKind, step: usize) -> Vec<usize> {
        let w = self.normalized_weights();
        let k = self.k();
        let mut rng = stream(self.seed, RESAMPLE_STREAM, step as u64);
        let a = resample(&w, k, kind, &mut rng);
        self.log_evidence_base += log_mean_exp(&self.log_weights);
        self.particles = a.iter().map(|&i| self.particles[i].clone()).collect();
        self.log_weights = vec![0.0; k];
        a
    }
}

/// Advances the system by one step: optional resampling, extension from the
/// proposal, then the incremental weight update.
pub fn smc_step(
    ps: &mut ParticleSystem,
    target: &dyn TargetSequence,
    proposal: &dyn Proposal,
    scheme: &ResamplingScheme,
) -> Result<(), SmcError> {
    let n = ps.steps();
    if n >= target.n_steps() {
        return Err(SmcError::InvalidConfig(format!("all {} steps already taken", target.n_steps())));
    }
    let k = ps.k();
    let triggered = n > 0
        && match scheme.trigger {
            ResamplingTrigger::Always => true,
            ResamplingTrigger::EssBelow(f) => ps.ess() < f * k as f64,
        };
    let parents: Vec<usize> = if triggered { ps.resample_now(scheme.kind, n) } else { (0..k).collect() };
    let roots = match ps.roots.last() {
        Some(prev) => parents.iter().map(|&a| prev[a]).collect(),
        None => (0..k).collect(),
    };
    ps.roots.push(roots);
    ps.ancestry.push(parents);

    let mut rngs: Vec<ChaCha8Rng> = (0..k).map(|i| stream(ps.seed, i as u64, n as u64)).collect();
    let mut log_q = vec![0.0; k];
    proposal.propose(n, &mut ps.particles, &mut rngs, &mut log_q)?;
    for i in 0..k {
        let inc = target.log_increment(n, &ps.particles[i]) - log_q[i];
        ps.log_weights[i] += if inc.is_nan() { f64::NEG_INFINITY } else { inc };
    }
    if ps.log_weights.iter().all(|w| *w == f64::NEG_INFINITY) {
        return Err(SmcError::DegenerateWeights { step: n + 1, particles: k });
    }
    ps.diagnostics.push(StepRecord {
        step: n + 1,
        ess: ps.ess(),
        unique_ancestries: ps.unique_ancestries(n + 1),
        log_evidence: ps.log_marginal_likelihood(),
        resampled: triggered,
    });
    Ok(())
}

fn check_blocks(target: &dyn TargetSequence, proposal: &dyn Proposal) -> Result<(), SmcError> {
    let blocks = proposal.blocks();
    if blocks.len() != target.n_steps() || blocks.iter().enumerate().any(|(s, b)| b.as_slice() != target.block(s)) {
        return Err(SmcError::Mismatch(format!("{} proposal blocks do not match the target's steps", proposal.name())));
    }
    Ok(())
}

/// Runs SMC through every step of the target.
pub fn run_smc(
    target: &dyn TargetSequence,
    proposal: &dyn Proposal,
    k: usize,
    scheme: &ResamplingScheme,
    seed: u64,
) -> Result<ParticleSystem, SmcError> {
    if k == 0 {
        return Err(SmcError::InvalidConfig("at least one particle required".into()));
    }
    scheme.validate()?;
    check_blocks(target, proposal)?;
    let mut ps = ParticleSystem::new(target.initial_values(), k, seed);
    for _ in 0..target.n_steps() {
        smc_step(&mut ps, target, proposal, scheme)?;
    }
    Ok(ps)
}

/// Single-step importance sampling.
pub fn importance_sample(
    target: &dyn TargetSequence,
    proposal: &dyn Proposal,
    k: usize,
    seed: u64,
) -> Result<ParticleSystem, SmcError> {
    if target.n_steps() != 1 {
        return Err(SmcError::InvalidConfig(format!(
            "importance sampling needs a one-step target, got {} steps",
            target.n_steps()
        )));
    }
    run_smc(target, proposal, k, &ResamplingScheme::default(), seed)
}

/// Two-level divide-and-conquer SMC. Every plate-replicated inverse factor
/// runs its own particle population weighted by the model factors that
/// involve only its targets and observed values, and is resampled locally.
/// The remaining factors are proposed after merging populations by particle
/// index and weighted by every model factor not used at the leaves.
pub fn dc_smc(
    model: &GraphModel,
    observed: &Assignment,
    proposal: &LearnedProposal,
    k: usize,
    kind: ResamplingKind,
    seed: u64,
) -> Result<ParticleSystem, SmcError> {
    if k == 0 {
        return Err(SmcError::InvalidConfig("at least one particle required".into()));
    }
    let inv = proposal.inverse();
    let (leaves, roots): (Vec<usize>, Vec<usize>) =
        (0..inv.factors.len()).partition(|&f| inv.factors[f].share_group.is_some());
    if leaves.is_empty() {
        return Err(SmcError::InvalidConfig("no plate-replicated factors to divide over".into()));
    }
    let target = ModelTarget::new(model, observed, vec![model.latents()])?;
    let base = target.initial_values();
    let observed_set: BTreeSet<usize> = model.observed().into_iter().collect();
    let mut used = vec![false; model.len()];

    let mut log_z = 0.0;
    let mut leaf_values: Vec<Vec<Vec<f64>>> = Vec::with_capacity(leaves.len());
    for (n, &f) in leaves.iter().enumerate() {
        let targets = &inv.factors[f].targets;
        for &c in &inv.factors[f].conditioners {
            if !observed_set.contains(&c) {
                return Err(SmcError::InvalidConfig(format!(
                    "leaf factor {f} conditions on latent {}",
                    model.id(c)
                )));
            }
        }
        let local: Vec<usize> = (0..model.len())
            .filter(|&v| {
                let touches = |x: usize| targets.contains(&x);
                let known = |x: usize| touches(x) || observed_set.contains(&x);
                (touches(v) || model.node(v).parents.iter().any(|&p| touches(p)))
                    && known(v)
                    && model.node(v).parents.iter().all(|&p| known(p))
            })
            .collect();
        for &v in &local {
            used[v] = true;
        }
        let mut states = vec![base.clone(); k];
        let mut rngs: Vec<ChaCha8Rng> = (0..k).map(|i| stream(seed, i as u64, n as u64)).collect();
        let mut log_q = vec![0.0; k];
        proposal.propose_factor(f, &mut states, &mut rngs, &mut log_q)?;
        let log_w: Vec<f64> = states
            .iter()
            .zip(&log_q)
            .map(|(s, lq)| {
                let lp: f64 = local.iter().map(|&v| model.log_factor(v, s).unwrap_or(f64::NEG_INFINITY)).sum();
                let w = lp - lq;
                if w.is_nan() {
                    f64::NEG_INFINITY
                } else {
                    w
                }
            })
            .collect();
        if log_w.iter().all(|w| *w == f64::NEG_INFINITY) {
            return Err(SmcError::DegenerateWeights { step: n + 1, particles: k });
        }
        log_z += log_mean_exp(&log_w);
        let mut rng = stream(seed, RESAMPLE_STREAM, n as u64);
        let a = resample(&normalize(&log_w), k, kind, &mut rng);
        leaf_values.push(a.iter().map(|&i| targets.iter().map(|&v| states[i][v]).collect()).collect());
    }

    let mut ps = ParticleSystem::new(base, k, seed);
    for (n, &f) in leaves.iter().enumerate() {
        for (i, p) in ps.particles.iter_mut().enumerate() {
            for (&v, &x) in inv.factors[f].targets.iter().zip(&leaf_values[n][i]) {
                p[v] = x;
            }
        }
    }
    let merge_step = leaves.len() as u64;
    let mut rngs: Vec<ChaCha8Rng> = (0..k).map(|i| stream(seed, i as u64, merge_step)).collect();
    let mut total_q = vec![0.0; k];
    let mut log_q = vec![0.0; k];
    for &f in &roots {
        proposal.propose_factor(f, &mut ps.particles, &mut rngs, &mut log_q)?;
        for (t, l) in total_q.iter_mut().zip(&log_q) {
            *t += l;
        }
    }
    let rest: Vec<usize> = (0..model.len()).filter(|&v| !used[v]).collect();
    for (i, p) in ps.particles.iter().enumerate() {
        let lp: f64 = rest.iter().map(|&v| model.log_factor(v, p).unwrap_or(f64::NEG_INFINITY)).sum();
        let w = lp - total_q[i];
        ps.log_weights[i] = if w.is_nan() { f64::NEG_INFINITY } else { w };
    }
    if ps.log_weights.iter().all(|w| *w == f64::NEG_INFINITY) {
        return Err(SmcError::DegenerateWeights { step: leaves.len() + 1, particles: k });
    }
    ps.log_evidence_base = log_z;
    ps.ancestry.push((0..k).collect());
    ps.roots.push((0..k).collect());
    ps.diagnostics.push(StepRecord {
        step: 1,
        ess: ps.ess(),
        unique_ancestries: k,
        log_evidence: ps.log_marginal_likelihood(),
        resampled: false,
    });
    Ok(ps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn ess_closed_forms() {
        let mut ps = ParticleSystem::new(vec![0.0], 4, 0);
        assert!((ps.ess() - 4.0).abs() < 1e-12);
        ps.log_weights = vec![0.0, 0.0, f64::NEG_INFINITY, f64::NEG_INFINITY];
        assert!((ps.ess() - 2.0).abs() < 1e-12);
        ps.log_weights = vec![3.0, f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
        assert!((ps.ess() - 1.0).abs() < 1e-12);
        assert!((ps.estimate(|_| 1.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn systematic_uniform_is_a_permutation_free_spread() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = resample(&[0.25; 4], 4, ResamplingKind::Systematic, &mut rng);
        assert_eq!(a, vec![0, 1, 2, 3]);
    }

    #[test]
    fn point_mass_resampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for kind in [ResamplingKind::Multinomial, ResamplingKind::Systematic] {
            assert_eq!(resample(&[1.0, 0.0, 0.0], 3, kind, &mut rng), vec![0, 0, 0]);
            assert_eq!(resample(&[0.0, 0.0, 1.0], 3, kind, &mut rng), vec![2, 2, 2]);
        }
    }

    #[test]
    fn hand_traced_ancestry() {
        let table = vec![vec![0, 1, 2, 3], vec![0, 0, 2, 2], vec![1, 1, 3, 2]];
        assert_eq!(unique_ancestries_from_table(&table, 1), 4);
        assert_eq!(unique_ancestries_from_table(&table, 2), 2);
        // step 3 parents (1,1,3,2) map to step-2 roots (0,0,2,2)
        assert_eq!(unique_ancestries_from_table(&table, 3), 2);
        let collapse = vec![vec![0, 1, 2, 3], vec![0, 0, 0, 0], vec![0, 0, 0, 0]];
        assert_eq!(unique_ancestries_from_table(&collapse, 3), 1);
    }

    #[test]
    fn threshold_validation() {
        let bad = ResamplingScheme { kind: ResamplingKind::Systematic, trigger: ResamplingTrigger::EssBelow(0.0) };
        assert!(bad.validate().is_err());
        assert!(ResamplingScheme::default().validate().is_ok());
    }
}
