//! Offline training of inverse-factor networks on synthetic joint samples.
//!
//! Each epoch draws a fresh synthetic training set and validation set, then
//! takes Adam minibatch steps until the validation loss rises above the best
//! value seen in the epoch or the step budget runs out.

use std::collections::BTreeMap;

use ndarray::ArrayView2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Family, GraphError, GraphModel, VariableId};
use crate::inverse::InverseModel;
use crate::made::{Affine, HeadKind, MadeError, MaskedNetwork, NetworkFile, NetworkShape};
use crate::rng::stream_seed;

pub const ARTIFACT_FORMAT: &str = "nsmc-artifact";
pub const ARTIFACT_VERSION: u32 = 1;

/// Validation must exceed the epoch's best by more than this to stop the epoch.
pub const VALIDATION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid network plan: {0}")]
    InvalidPlan(String),
    #[error("malformed artifact: {0}")]
    Artifact(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Network(#[from] MadeError),
}

/// Elementwise transform applied to a variable before it enters a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueTransform {
    Identity,
    Log,
    Log1p,
}

impl ValueTransform {
    #[inline]
    pub fn forward(self, x: f64) -> f64 {
        match self {
            ValueTransform::Identity => x,
            ValueTransform::Log => x.ln(),
            ValueTransform::Log1p => x.ln_1p(),
        }
    }

    #[inline]
    pub fn inverse(self, z: f64) -> f64 {
        match self {
            ValueTransform::Identity => z,
            ValueTransform::Log => z.exp(),
            ValueTransform::Log1p => z.exp_m1(),
        }
    }

    /// log |d forward / dx| at x.
    #[inline]
    pub fn log_jacobian(self, x: f64) -> f64 {
        match self {
            ValueTransform::Identity => 0.0,
            ValueTransform::Log => -x.ln(),
            ValueTransform::Log1p => -x.ln_1p(),
        }
    }

    /// Count data and positive reals are log-compressed when used as inputs.
    pub fn for_conditioner(family: Family) -> Self {
        if family == Family::Poisson || family.is_positive() {
            ValueTransform::Log1p
        } else {
            ValueTransform::Identity
        }
    }

    /// Positive targets are modeled in log space.
    pub fn for_target(family: Family) -> Self {
        if family.is_positive() {
            ValueTransform::Log
        } else {
            ValueTransform::Identity
        }
    }
}

/// How a factor's conditioners become the network's conditioning vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CondEncoding {
    /// Transformed conditioner values in conditioner order.
    Concat,
    /// Fixed-size summary of positive conditioners: mean, mean log, sd of log, count.
    PositiveSummary,
}

/// Settings chosen per network group by a model builder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSettings {
    pub hidden_sizes: Vec<usize>,
    pub components: usize,
    pub encoding: CondEncoding,
}

/// One network: the factors it serves and how their values are encoded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkPlan {
    pub key: String,
    pub factors: Vec<usize>,
    pub encoding: CondEncoding,
    pub cond_transforms: Vec<ValueTransform>,
    pub target_transforms: Vec<ValueTransform>,
    pub shape: NetworkShape,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProposalPlan {
    pub networks: Vec<NetworkPlan>,
}

impl ProposalPlan {
    /// One network per share group or ungrouped factor, configured by `settings`.
    pub fn new(
        model: &GraphModel,
        inv: &InverseModel,
        settings: impl Fn(&str, &[usize]) -> NetworkSettings,
    ) -> Result<Self, TrainError> {
        let mut networks = Vec::new();
        for (key, factors) in inv.network_groups() {
            let s = settings(&key, &factors);
            let first = &inv.factors[factors[0]];
            let cond_transforms: Vec<ValueTransform> = first
                .conditioners
                .iter()
                .map(|&c| ValueTransform::for_conditioner(model.node(c).dist.family()))
                .collect();
            let target_transforms: Vec<ValueTransform> = first
                .targets
                .iter()
                .map(|&t| ValueTransform::for_target(model.node(t).dist.family()))
                .collect();
            let all_binary = first.targets.iter().all(|&t| model.node(t).dist.family() == Family::Bernoulli);
            for &k in &factors[1..] {
                let f = &inv.factors[k];
                if f.targets.len() != first.targets.len() || f.conditioners.len() != first.conditioners.len() {
                    return Err(TrainError::InvalidPlan(format!("factors of group {key} differ in size")));
                }
            }
            let n_cond = match s.encoding {
                CondEncoding::Concat => first.conditioners.len(),
                CondEncoding::PositiveSummary => {
                    if let Some(&c) =
                        first.conditioners.iter().find(|&&c| !model.node(c).dist.family().is_positive())
                    {
                        return Err(TrainError::InvalidPlan(format!(
                            "summary encoding needs positive conditioners, {} is not",
                            model.id(c)
                        )));
                    }
                    4
                }
            };
            let head = if all_binary {
                HeadKind::Bernoulli
            } else {
                HeadKind::Mixture { components: s.components }
            };
            let shape = NetworkShape { n_targets: first.targets.len(), n_cond, hidden_sizes: s.hidden_sizes, head };
            shape.validate()?;
            networks.push(NetworkPlan { key, factors, encoding: s.encoding, cond_transforms, target_transforms, shape });
        }
        Ok(Self { networks })
    }

    /// Index of the network serving each factor.
    pub fn network_of_factor(&self, n_factors: usize) -> Vec<usize> {
        let mut out = vec![usize::MAX; n_factors];
        for (n, plan) in self.networks.iter().enumerate() {
            for &f in &plan.factors {
                out[f] = n;
            }
        }
        out
    }
}

impl NetworkPlan {
    /// Appends the encoded conditioning vector of `factor` to `out`.
    pub fn encode_cond(&self, inv: &InverseModel, factor: usize, values: &[f64], out: &mut Vec<f64>) {
        let conds = &inv.factors[factor].conditioners;
        match self.encoding {
            CondEncoding::Concat => {
                out.extend(conds.iter().zip(&self.cond_transforms).map(|(&c, t)| t.forward(values[c])));
            }
            CondEncoding::PositiveSummary => {
                let n = conds.len() as f64;
                let mean = conds.iter().map(|&c| values[c]).sum::<f64>() / n;
                let logs: Vec<f64> = conds.iter().map(|&c| values[c].ln()).collect();
                let mean_log = logs.iter().sum::<f64>() / n;
                let var_log = logs.iter().map(|l| (l - mean_log).powi(2)).sum::<f64>() / n;
                out.extend_from_slice(&[mean.ln_1p(), mean_log, var_log.sqrt(), n]);
            }
        }
    }

    /// Appends the transformed targets of `factor` to `out`.
    pub fn encode_targets(&self, inv: &InverseModel, factor: usize, values: &[f64], out: &mut Vec<f64>) {
        let targets = &inv.factors[factor].targets;
        out.extend(targets.iter().zip(&self.target_transforms).map(|(&t, tr)| tr.forward(values[t])));
    }
}

/// Rows of (conditioning vector, target vector) for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorDataset {
    pub key: String,
    pub n_cond: usize,
    pub n_targets: usize,
    pub cond: Vec<f64>,
    pub targets: Vec<f64>,
}

impl FactorDataset {
    pub fn new(key: impl Into<String>, n_cond: usize, n_targets: usize) -> Self {
        Self { key: key.into(), n_cond, n_targets, cond: Vec::new(), targets: Vec::new() }
    }

    pub fn rows(&self) -> usize {
        if self.n_targets == 0 {
            0
        } else {
            self.targets.len() / self.n_targets
        }
    }

    pub fn is_empty(&self) -> bool {
        self.rows() == 0
    }

    pub fn cond_view(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.rows(), self.n_cond), &self.cond).expect("row-major conditioners")
    }

    pub fn target_view(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.rows(), self.n_targets), &self.targets).expect("row-major targets")
    }

    fn push_rows_from(&mut self, other: &FactorDataset, rows: &[usize]) {
        for &r in rows {
            self.cond.extend_from_slice(&other.cond[r * other.n_cond..(r + 1) * other.n_cond]);
            self.targets.extend_from_slice(&other.targets[r * other.n_targets..(r + 1) * other.n_targets]);
        }
    }
}

/// Projects `n` ancestral samples onto the rows of each selected network.
/// Factors sharing a network contribute one row each per sample.
pub fn synth_dataset_for<R: Rng + ?Sized>(
    model: &GraphModel,
    inv: &InverseModel,
    plan: &ProposalPlan,
    networks: &[usize],
    n: usize,
    rng: &mut R,
) -> Result<Vec<FactorDataset>, TrainError> {
    let mut out: Vec<FactorDataset> = networks
        .iter()
        .map(|&k| {
            let p = &plan.networks[k];
            FactorDataset::new(p.key.clone(), p.shape.n_cond, p.shape.n_targets)
        })
        .collect();
    let mut drawn = 0;
    while drawn < n {
        let a = model.ancestral_sample(rng)?;
        let marks: Vec<(usize, usize)> = out.iter().map(|d| (d.cond.len(), d.targets.len())).collect();
        for (ds, &k) in out.iter_mut().zip(networks) {
            let p = &plan.networks[k];
            for &f in &p.factors {
                p.encode_cond(inv, f, a.values(), &mut ds.cond);
                p.encode_targets(inv, f, a.values(), &mut ds.targets);
            }
        }
        // Draws whose encoding overflows (extreme tails of heavy-tailed priors) are redrawn.
        let finite = out.iter().zip(&marks).all(|(d, &(c, t))| {
            d.cond[c..].iter().chain(&d.targets[t..]).all(|x| x.is_finite())
        });
        if finite {
            drawn += 1;
        } else {
            for (d, &(c, t)) in out.iter_mut().zip(&marks) {
                d.cond.truncate(c);
                d.targets.truncate(t);
            }
        }
    }
    Ok(out)
}

/// Datasets for every network of the plan, keyed by network.
pub fn synth_dataset<R: Rng + ?Sized>(
    model: &GraphModel,
    inv: &InverseModel,
    plan: &ProposalPlan,
    n: usize,
    rng: &mut R,
) -> Result<BTreeMap<String, FactorDataset>, TrainError> {
    let all: Vec<usize> = (0..plan.networks.len()).collect();
    Ok(synth_dataset_for(model, inv, plan, &all, n, rng)?.into_iter().map(|d| (d.key.clone(), d)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { step_size: 0.001, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of every parameter tensor.
pub fn adam_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut AdamState,
    config: &AdamConfig,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(TrainError::ShapeMismatch(format!(
            "{} parameter tensors, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            state.first.len()
        )));
    }
    for (k, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.first[k].len() {
            return Err(TrainError::ShapeMismatch(format!("tensor {k}: {} vs {}", p.len(), g.len())));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.first[k];
        let v = &mut state.second[k];
        for j in 0..p.len() {
            let gj = g[j];
            m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * gj;
            v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * gj * gj;
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            p[j] -= config.step_size * mhat / (vhat.sqrt() + config.epsilon);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub n_train: usize,
    pub n_validate: usize,
    pub minibatch: usize,
    pub max_steps_per_epoch: usize,
    pub n_epochs: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_train: 10_000,
            n_validate: 1_000,
            minibatch: 100,
            max_steps_per_epoch: 500,
            n_epochs: 50,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.n_train == 0 || self.n_validate == 0 || self.minibatch == 0 || self.n_epochs == 0 {
            return Err(TrainError::InvalidConfig("sample counts, minibatch and epochs must be positive".into()));
        }
        if !(self.adam.step_size > 0.0 && self.adam.step_size.is_finite()) {
            return Err(TrainError::InvalidConfig(format!("step size {} must be positive", self.adam.step_size)));
        }
        if self.minibatch > self.n_train {
            return Err(TrainError::InvalidConfig(format!(
                "minibatch {} exceeds n_train {}",
                self.minibatch, self.n_train
            )));
        }
        Ok(())
    }

    /// Applies a `key=value` override; returns false for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool, String> {
        let int = |v: &str| v.parse::<usize>().map_err(|e| format!("{key}: {e}"));
        let float = |v: &str| v.parse::<f64>().map_err(|e| format!("{key}: {e}"));
        match key {
            "n_train" => self.n_train = int(value)?,
            "n_validate" => self.n_validate = int(value)?,
            "minibatch" => self.minibatch = int(value)?,
            "max_steps_per_epoch" => self.max_steps_per_epoch = int(value)?,
            "n_epochs" => self.n_epochs = int(value)?,
            "step_size" => self.adam.step_size = float(value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Mean negative log density of the dataset rows under `net`.
pub fn validation_nll(net: &MaskedNetwork, dataset: &FactorDataset) -> Result<f64, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let lps = net.log_prob_batch(dataset.cond_view(), dataset.target_view())?;
    Ok(-lps.iter().sum::<f64>() / lps.len() as f64)
}

/// One validation evaluation during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub network: String,
    pub epoch: usize,
    pub step: usize,
    pub validation_nll: f64,
}

/// Fits input normalization to a dataset; binary targets stay unnormalized.
pub fn fit_normalization(net: &mut MaskedNetwork, data: &FactorDataset) -> Result<(), TrainError> {
    let rows = data.rows();
    let cond = (0..data.n_cond).map(|j| Affine::fit((0..rows).map(|r| data.cond[r * data.n_cond + j]))).collect();
    let targets = match net.shape().head {
        HeadKind::Bernoulli => vec![Affine::IDENTITY; data.n_targets],
        HeadKind::Mixture { .. } => (0..data.n_targets)
            .map(|j| Affine::fit((0..rows).map(|r| data.targets[r * data.n_targets + j])))
            .collect(),
    };
    net.set_normalization(cond, targets)?;
    Ok(())
}

/// Trains network `network` of the plan with the hybrid epoch procedure.
pub fn train_factor(
    model: &GraphModel,
    inv: &InverseModel,
    plan: &ProposalPlan,
    network: usize,
    net: &mut MaskedNetwork,
    config: &TrainConfig,
) -> Result<Vec<TraceRow>, TrainError> {
    config.validate()?;
    let np = &plan.networks[network];
    if net.shape() != &np.shape {
        return Err(TrainError::ShapeMismatch(format!("network {} does not match its plan", np.key)));
    }
    let mut trace = Vec::new();
    if config.max_steps_per_epoch == 0 {
        return Ok(trace);
    }
    let mut data_rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, network as u64, 0));
    let mut batch_rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, network as u64, 1));
    let mut adam = AdamState::new(&net.param_sizes());
    let mut batch = FactorDataset::new(np.key.clone(), np.shape.n_cond, np.shape.n_targets);
    for epoch in 0..config.n_epochs {
        let train = synth_dataset_for(model, inv, plan, &[network], config.n_train, &mut data_rng)?.remove(0);
        let valid = synth_dataset_for(model, inv, plan, &[network], config.n_validate, &mut data_rng)?.remove(0);
        if epoch == 0 {
            fit_normalization(net, &train)?;
        }
        let mut best = validation_nll(net, &valid)?;
        trace.push(TraceRow { network: np.key.clone(), epoch, step: 0, validation_nll: best });
        let mut order: Vec<usize> = (0..train.rows()).collect();
        order.shuffle(&mut batch_rng);
        let mut cursor = 0;
        for step in 1..=config.max_steps_per_epoch {
            if cursor + config.minibatch > order.len() {
                order.shuffle(&mut batch_rng);
                cursor = 0;
            }
            batch.cond.clear();
            batch.targets.clear();
            batch.push_rows_from(&train, &order[cursor..cursor + config.minibatch]);
            cursor += config.minibatch;

            let grads = net.backward_batch(batch.cond_view(), batch.target_view())?;
            let grad_slices: Vec<&[f64]> = grads
                .weights
                .iter()
                .map(|w| w.as_slice().expect("standard layout"))
                .chain(grads.biases.iter().map(|b| b.as_slice().expect("standard layout")))
                .collect();
            adam_step(&mut net.param_slices_mut(), &grad_slices, &mut adam, &config.adam)?;

            let v = validation_nll(net, &valid)?;
            trace.push(TraceRow { network: np.key.clone(), epoch, step, validation_nll: v });
            if !(v <= best + VALIDATION_TOLERANCE) {
                break;
            }
            best = best.min(v);
        }
    }
    Ok(trace)
}

/// Provenance stored with trained networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub model: String,
    pub model_params: BTreeMap<String, String>,
    pub inverse: String,
    pub factor_targets: Vec<Vec<VariableId>>,
    pub config: TrainConfig,
    pub seed: u64,
    /// Seconds since the epoch, taken from `SOURCE_DATE_EPOCH` when set.
    pub build_timestamp: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedNetwork {
    pub plan: NetworkPlan,
    pub network: NetworkFile,
}

/// Every trained network of a model plus the manifest describing how it was made.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainArtifact {
    pub format: String,
    pub version: u32,
    pub manifest: Manifest,
    pub networks: Vec<TrainedNetwork>,
}

impl TrainArtifact {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("artifact serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, TrainError> {
        let v: serde_json::Value = serde_json::from_str(s).map_err(|e| TrainError::Artifact(e.to_string()))?;
        match (v.get("format").and_then(|f| f.as_str()), v.get("version").and_then(|f| f.as_u64())) {
            (Some(ARTIFACT_FORMAT), Some(ver)) if ver == ARTIFACT_VERSION as u64 => {}
            (Some(ARTIFACT_FORMAT), Some(ver)) => {
                return Err(TrainError::Artifact(format!(
                    "unsupported artifact version {ver} (supported: {ARTIFACT_VERSION})"
                )))
            }
            _ => return Err(TrainError::Artifact("not an nsmc artifact".into())),
        }
        let art: TrainArtifact = serde_json::from_value(v).map_err(|e| TrainError::Artifact(e.to_string()))?;
        for n in &art.networks {
            MaskedNetwork::from_file(n.network.clone())?;
        }
        Ok(art)
    }

    pub fn networks(&self) -> Result<Vec<MaskedNetwork>, TrainError> {
        self.networks.iter().map(|n| Ok(MaskedNetwork::from_file(n.network.clone())?)).collect()
    }

    pub fn plan(&self) -> ProposalPlan {
        ProposalPlan { networks: self.networks.iter().map(|n| n.plan.clone()).collect() }
    }

    /// Checks that the artifact was trained for this model's factorization.
    pub fn check_compatible(&self, model: &GraphModel, inv: &InverseModel) -> Result<(), TrainError> {
        let targets: Vec<Vec<VariableId>> =
            inv.factors.iter().map(|f| f.targets.iter().map(|&t| model.id(t).clone()).collect()).collect();
        if targets != self.manifest.factor_targets || inv.describe(model) != self.manifest.inverse {
            return Err(TrainError::Artifact(format!(
                "artifact was trained for a different factorization of {} ({})",
                self.manifest.model,
                describe_params(&self.manifest.model_params)
            )));
        }
        Ok(())
    }
}

fn describe_params(p: &BTreeMap<String, String>) -> String {
    if p.is_empty() {
        return "default parameters".into();
    }
    p.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(", ")
}

/// Reproducible-build timestamp, if one is configured.
pub fn build_timestamp() -> Option<u64> {
    std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|s| s.trim().parse().ok())
}

/// Output of [`train_all`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub artifact: TrainArtifact,
    pub nets: Vec<MaskedNetwork>,
    pub trace: Vec<TraceRow>,
}

/// Trains every network of the plan independently. `configs` holds either one
/// configuration shared by all networks or one per network.
pub fn train_all(
    model: &GraphModel,
    inv: &InverseModel,
    plan: &ProposalPlan,
    configs: &[TrainConfig],
    model_params: BTreeMap<String, String>,
) -> Result<TrainOutcome, TrainError> {
    if configs.len() != 1 && configs.len() != plan.networks.len() {
        return Err(TrainError::InvalidConfig(format!(
            "{} configs for {} networks",
            configs.len(),
            plan.networks.len()
        )));
    }
    let mut nets = Vec::with_capacity(plan.networks.len());
    let mut trace = Vec::new();
    for (k, np) in plan.networks.iter().enumerate() {
        let cfg = &configs[if configs.len() == 1 { 0 } else { k }];
        let mut net = MaskedNetwork::new(np.shape.clone(), None, stream_seed(cfg.seed, k as u64, 2))?;
        trace.extend(train_factor(model, inv, plan, k, &mut net, cfg)?);
        nets.push(net);
    }
    let artifact = TrainArtifact {
        format: ARTIFACT_FORMAT.to_string(),
        version: ARTIFACT_VERSION,
        manifest: Manifest {
            model: model.name().to_string(),
            model_params,
            inverse: inv.describe(model),
            factor_targets: inv
                .factors
                .iter()
                .map(|f| f.targets.iter().map(|&t| model.id(t).clone()).collect())
                .collect(),
            config: configs[0].clone(),
            seed: configs[0].seed,
            build_timestamp: build_timestamp(),
        },
        networks: plan
            .networks
            .iter()
            .zip(&nets)
            .map(|(p, n)| TrainedNetwork { plan: p.clone(), network: n.to_file() })
            .collect(),
    };
    Ok(TrainOutcome { artifact, nets, trace })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_adam_step_is_a_sign_step() {
        let mut p = vec![1.0, -2.0, 0.5];
        let g = vec![3.0, -0.2, 1e-3];
        let mut st = AdamState::new(&[3]);
        adam_step(&mut [&mut p[..]], &[&g[..]], &mut st, &AdamConfig::default()).unwrap();
        let expect = [1.0 - 0.001, -2.0 + 0.001, 0.5 - 0.001];
        for (a, b) in p.iter().zip(expect) {
            assert!((a - b).abs() < 1e-7, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![0.25, -4.0];
        let g = vec![0.0, 0.0];
        let mut st = AdamState::new(&[2]);
        for _ in 0..1000 {
            adam_step(&mut [&mut p[..]], &[&g[..]], &mut st, &AdamConfig::default()).unwrap();
        }
        assert_eq!(p, vec![0.25, -4.0]);
    }

    #[test]
    fn quadratic_bowl_converges() {
        // Scalar recursion written out independently of adam_step.
        let (b1, b2, lr, eps) = (0.9f64, 0.999f64, 1e-3, 1e-8);
        let (mut w_ref, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        let mut w = vec![1.0];
        let mut st = AdamState::new(&[1]);
        for t in 1..=2500 {
            let g = vec![w[0]];
            adam_step(&mut [&mut w[..]], &[&g[..]], &mut st, &AdamConfig::default()).unwrap();
            let gr = w_ref;
            m = b1 * m + (1.0 - b1) * gr;
            v = b2 * v + (1.0 - b2) * gr * gr;
            w_ref -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
            assert!((w[0] - w_ref).abs() < 1e-12, "step {t}: {} vs {w_ref}", w[0]);
            if t == 2000 {
                // Step size 0.001 leaves w near 0.02 here; the 0.01 band is reached later.
                assert!(w[0] > 0.01 && w[0] < 0.03, "w = {}", w[0]);
            }
        }
        assert!(w[0].abs() < 0.01, "w = {}", w[0]);
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut p = vec![0.0; 3];
        let g = vec![0.0; 2];
        let mut st = AdamState::new(&[3]);
        assert!(matches!(
            adam_step(&mut [&mut p[..]], &[&g[..]], &mut st, &AdamConfig::default()),
            Err(TrainError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.minibatch = c.n_train + 1;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        assert!(c.set("n_epochs", "3").unwrap());
        assert_eq!(c.n_epochs, 3);
        assert!(!c.set("bogus", "1").unwrap());
        assert!(c.set("n_train", "x").is_err());
    }

    #[test]
    fn transforms_invert() {
        for t in [ValueTransform::Identity, ValueTransform::Log, ValueTransform::Log1p] {
            let x = 3.7;
            assert!((t.inverse(t.forward(x)) - x).abs() < 1e-12);
        }
        assert_eq!(ValueTransform::for_conditioner(Family::Poisson), ValueTransform::Log1p);
        assert_eq!(ValueTransform::for_target(Family::Gamma), ValueTransform::Log);
        assert_eq!(ValueTransform::for_target(Family::Gaussian), ValueTransform::Identity);
    }
}
