//! Ready-made models: polynomial regression, the pump hierarchy, the factorial
//! HMM and a conjugate Gaussian toy, plus exact oracles for small cases.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{
    Assignment, Distribution, DistributionSpec, Family, GraphError, GraphModel, GraphModelBuilder, Role, VariableId,
};
use crate::inverse::{
    assign_share_groups, build_default_inverse, group_joint_blocks, InverseError, InverseFactor, InverseModel,
};
use crate::train::{CondEncoding, NetworkSettings, ProposalPlan, TrainError};

pub const MODEL_NAMES: [&str; 4] = ["regression", "pump", "fhmm", "conjugate-toy"];

/// The pump fixture: operating time (thousands of hours) and failure count per pump.
pub const PUMP_FIXTURE: &str = include_str!("../data/pumps.txt");

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("unknown model '{0}' (expected one of regression, pump, fhmm, conjugate-toy)")]
    UnknownModel(String),
    #[error("unknown parameter '{key}' for model {model}")]
    UnknownParameter { model: String, key: String },
    #[error("bad value for parameter '{key}': {reason}")]
    BadParameter { key: String, reason: String },
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Inverse(#[from] InverseError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

type Params = BTreeMap<String, String>;

fn take<T: FromStr>(p: &mut Params, key: &str, default: T) -> Result<T, ModelError>
where
    T::Err: std::fmt::Display,
{
    match p.remove(key) {
        None => Ok(default),
        Some(v) => v.trim().parse().map_err(|e: T::Err| ModelError::BadParameter { key: key.into(), reason: e.to_string() }),
    }
}

fn take_list(p: &mut Params, key: &str, default: Vec<f64>) -> Result<Vec<f64>, ModelError> {
    match p.remove(key) {
        None => Ok(default),
        Some(v) => v
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| ModelError::BadParameter { key: key.into(), reason: e.to_string() }),
    }
}

fn take_sizes(p: &mut Params, key: &str, default: Vec<usize>) -> Result<Vec<usize>, ModelError> {
    match p.remove(key) {
        None => Ok(default),
        Some(v) => v
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|e| ModelError::BadParameter { key: key.into(), reason: e.to_string() }),
    }
}

fn finish(model: &str, p: Params) -> Result<(), ModelError> {
    match p.into_keys().next() {
        Some(key) => Err(ModelError::UnknownParameter { model: model.into(), key }),
        None => Ok(()),
    }
}

fn bad(key: &str, reason: impl Into<String>) -> ModelError {
    ModelError::BadParameter { key: key.into(), reason: reason.into() }
}

/// A built model with its inverse factorization and network plan.
#[derive(Debug, Clone)]
pub struct Example {
    pub model: GraphModel,
    pub inverse: InverseModel,
    pub plan: ProposalPlan,
    /// Parameters the example was built from, recorded in artifacts.
    pub params: BTreeMap<String, String>,
}

impl Example {
    pub fn name(&self) -> &str {
        self.model.name()
    }

    /// Human-readable description of the model, its inverse and its networks.
    pub fn report(&self) -> String {
        let mut s = self.inverse.describe(&self.model);
        let _ = writeln!(s, "networks: {}", self.plan.networks.len());
        for n in &self.plan.networks {
            let head = match n.shape.head {
                crate::made::HeadKind::Mixture { components } => format!("mixture of {components} Gaussians"),
                crate::made::HeadKind::Bernoulli => "Bernoulli".to_string(),
            };
            let hidden: Vec<String> = n.shape.hidden_sizes.iter().map(|h| h.to_string()).collect();
            let _ = writeln!(
                s,
                "  {}: {} factor(s), {} targets, {} inputs ({:?}), hidden [{}], {} head",
                n.key,
                n.factors.len(),
                n.shape.n_targets,
                n.shape.n_cond,
                n.encoding,
                hidden.join(", "),
                head
            );
        }
        s
    }
}

/// Builds a named example from `key=value` parameters.
pub fn build_example(name: &str, params: &BTreeMap<String, String>) -> Result<Example, ModelError> {
    let mut p = params.clone();
    let ex = match name {
        "regression" => {
            let c = RegressionConfig::take(&mut p)?;
            finish(name, p)?;
            build_regression(&c)?
        }
        "pump" => {
            let c = PumpConfig::take(&mut p)?;
            finish(name, p)?;
            build_pump(&c)?
        }
        "fhmm" => {
            let c = FhmmConfig::take(&mut p)?;
            finish(name, p)?;
            build_fhmm(&c)?
        }
        "conjugate-toy" => {
            let c = ToyConfig::take(&mut p)?;
            finish(name, p)?;
            build_conjugate_toy(&c)?
        }
        other => return Err(ModelError::UnknownModel(other.into())),
    };
    Ok(Example { params: params.clone(), ..ex })
}

fn standard_inverse(model: &GraphModel) -> Result<InverseModel, ModelError> {
    let inv = group_joint_blocks(&build_default_inverse(model)?);
    Ok(assign_share_groups(&inv, model))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionConfig {
    pub n: usize,
    pub hidden: Vec<usize>,
    pub components: usize,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        Self { n: 50, hidden: vec![200, 200], components: 3 }
    }
}

impl RegressionConfig {
    fn take(p: &mut Params) -> Result<Self, ModelError> {
        let d = Self::default();
        Ok(Self {
            n: take(p, "n", d.n)?,
            hidden: take_sizes(p, "hidden", d.hidden)?,
            components: take(p, "components", d.components)?,
        })
    }
}

/// Quadratic regression with Laplace weight priors and Student-t noise.
pub fn regression_model(n: usize) -> Result<GraphModel, GraphError> {
    let mut b = GraphModelBuilder::new("regression");
    for d in 0..3 {
        let scale = 10f64.powi(1 - d);
        b.add_node(
            format!("w{d}").as_str(),
            Role::Latent,
            vec![],
            DistributionSpec::fixed(Distribution::Laplace { location: 0.0, scale }),
        );
    }
    for i in 0..n {
        b.add_node(
            VariableId::indexed("z", i),
            Role::Observed,
            vec![],
            DistributionSpec::fixed(Distribution::Uniform { low: -10.0, high: 10.0 }),
        );
        b.add_node(
            VariableId::indexed("t", i),
            Role::Observed,
            vec!["w0".into(), "w1".into(), "w2".into(), VariableId::indexed("z", i)],
            DistributionSpec::new(Family::StudentT, |v| Distribution::StudentT {
                dof: 4.0,
                location: v[0] + v[1] * v[3] + v[2] * v[3] * v[3],
                scale: 1.0,
            }),
        );
    }
    b.add_plate("data", &["z", "t"], n);
    b.build()
}

pub fn build_regression(c: &RegressionConfig) -> Result<Example, ModelError> {
    if c.n == 0 {
        return Err(bad("n", "at least one observation required"));
    }
    let model = regression_model(c.n)?;
    let inverse = standard_inverse(&model)?;
    let plan = ProposalPlan::new(&model, &inverse, |_, _| NetworkSettings {
        hidden_sizes: c.hidden.clone(),
        components: c.components,
        encoding: CondEncoding::Concat,
    })?;
    Ok(Example { model, inverse, plan, params: BTreeMap::new() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PumpConfig {
    pub n: usize,
    pub hidden: Vec<usize>,
    pub components: usize,
    /// Mean of the exponential law of operating times in synthetic data.
    pub time_mean: f64,
}

impl Default for PumpConfig {
    fn default() -> Self {
        Self { n: 10, hidden: vec![500, 500], components: 10, time_mean: 50.0 }
    }
}

impl PumpConfig {
    fn take(p: &mut Params) -> Result<Self, ModelError> {
        let d = Self::default();
        Ok(Self {
            n: take(p, "n", d.n)?,
            hidden: take_sizes(p, "hidden", d.hidden)?,
            components: take(p, "components", d.components)?,
            time_mean: take(p, "time_mean", d.time_mean)?,
        })
    }
}

/// Gamma-Poisson hierarchy over `n` pumps. β is declared before α so the
/// default latent order inverts to θ ← (t, y), then (α, β) ← θ.
pub fn pump_model(n: usize, time_mean: f64) -> Result<GraphModel, GraphError> {
    let mut b = GraphModelBuilder::new("pump");
    b.add_node("beta", Role::Latent, vec![], DistributionSpec::fixed(Distribution::Gamma { shape: 0.1, rate: 1.0 }));
    b.add_node("alpha", Role::Latent, vec![], DistributionSpec::fixed(Distribution::Exponential { rate: 1.0 }));
    for i in 0..n {
        b.add_node(
            VariableId::indexed("theta", i),
            Role::Latent,
            vec!["alpha".into(), "beta".into()],
            DistributionSpec::new(Family::Gamma, |v| Distribution::Gamma { shape: v[0], rate: v[1] }),
        );
        b.add_node(
            VariableId::indexed("t", i),
            Role::Observed,
            vec![],
            DistributionSpec::fixed(Distribution::Exponential { rate: 1.0 / time_mean }),
        );
        b.add_node(
            VariableId::indexed("y", i),
            Role::Observed,
            vec![VariableId::indexed("theta", i), VariableId::indexed("t", i)],
            DistributionSpec::new(Family::Poisson, |v| Distribution::Poisson { rate: v[0] * v[1] }),
        );
    }
    b.add_plate("pumps", &["theta", "t", "y"], n);
    b.build()
}

pub fn build_pump(c: &PumpConfig) -> Result<Example, ModelError> {
    if c.n == 0 {
        return Err(bad("n", "at least one pump required"));
    }
    if !(c.time_mean > 0.0) {
        return Err(bad("time_mean", "must be positive"));
    }
    let model = pump_model(c.n, c.time_mean)?;
    let inverse = standard_inverse(&model)?;
    let plan = ProposalPlan::new(&model, &inverse, |key, _| NetworkSettings {
        hidden_sizes: c.hidden.clone(),
        components: c.components,
        encoding: if key.contains('#') { CondEncoding::Concat } else { CondEncoding::PositiveSummary },
    })?;
    Ok(Example { model, inverse, plan, params: BTreeMap::new() })
}

/// Parses whitespace-separated numeric rows, skipping blank and `#` lines.
pub fn read_table(text: &str) -> Result<Vec<Vec<f64>>, ModelError> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .map(|(i, l)| {
            l.split(|c: char| c.is_whitespace() || c == ',')
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<f64>().map_err(|e| ModelError::Data(format!("line {}: {e}", i + 1))))
                .collect()
        })
        .collect()
}

/// The pump fixture as (times, counts).
pub fn pump_fixture() -> (Vec<f64>, Vec<f64>) {
    let rows = read_table(PUMP_FIXTURE).expect("fixture parses");
    rows.iter().map(|r| (r[0], r[1])).unzip()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FhmmConfig {
    pub d: usize,
    pub t: usize,
    pub mu: Vec<f64>,
    pub sigma: f64,
    pub p_init: f64,
    pub p_switch: f64,
    pub hidden: Vec<usize>,
}

impl Default for FhmmConfig {
    fn default() -> Self {
        Self::with_devices(20, 30, 30.0, 500.0)
    }
}

impl FhmmConfig {
    /// `d` devices with consumptions spaced linearly over `[low, high]`.
    pub fn with_devices(d: usize, t: usize, low: f64, high: f64) -> Self {
        let mu = if d == 1 { vec![low] } else { (0..d).map(|i| low + (high - low) * i as f64 / (d - 1) as f64).collect() };
        Self { d, t, mu, sigma: 10.0, p_init: 0.1, p_switch: 0.05, hidden: vec![300; 4] }
    }

    fn take(p: &mut Params) -> Result<Self, ModelError> {
        let base = Self::default();
        let d = take(p, "d", base.d)?;
        let t = take(p, "t", base.t)?;
        let low = take(p, "mu_low", 30.0)?;
        let high = take(p, "mu_high", 500.0)?;
        let mut c = Self::with_devices(d, t, low, high);
        c.mu = take_list(p, "mu", c.mu)?;
        c.sigma = take(p, "sigma", c.sigma)?;
        c.p_init = take(p, "p_init", c.p_init)?;
        c.p_switch = take(p, "p_switch", c.p_switch)?;
        c.hidden = take_sizes(p, "hidden", c.hidden)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d == 0 || self.t == 0 {
            return Err(bad("d", "device count and length must be positive"));
        }
        if self.mu.len() != self.d {
            return Err(bad("mu", format!("{} consumptions for {} devices", self.mu.len(), self.d)));
        }
        if self.mu.iter().any(|m| !(*m > 0.0)) {
            return Err(bad("mu", "consumptions must be positive"));
        }
        if !(self.sigma > 0.0) {
            return Err(bad("sigma", "must be positive"));
        }
        for (k, v) in [("p_init", self.p_init), ("p_switch", self.p_switch)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(bad(k, "must lie in (0, 1)"));
            }
        }
        Ok(())
    }

    /// Node index of device `i` at time `t` (both 0-based).
    pub fn x_index(&self, t: usize, i: usize) -> usize {
        t * (self.d + 1) + i
    }

    pub fn y_index(&self, t: usize) -> usize {
        t * (self.d + 1) + self.d
    }

    pub fn to_params(&self) -> BTreeMap<String, String> {
        let mut p = BTreeMap::new();
        let list = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        p.insert("d".into(), self.d.to_string());
        p.insert("t".into(), self.t.to_string());
        p.insert("mu".into(), list(&self.mu));
        p.insert("sigma".into(), self.sigma.to_string());
        p.insert("p_init".into(), self.p_init.to_string());
        p.insert("p_switch".into(), self.p_switch.to_string());
        p.insert("hidden".into(), self.hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(","));
        p
    }
}

/// `d` independent binary chains observed through their summed consumption.
pub fn fhmm_model(c: &FhmmConfig) -> Result<GraphModel, ModelError> {
    c.validate()?;
    let mut b = GraphModelBuilder::new("fhmm");
    let (p0, ps, var) = (c.p_init, c.p_switch, c.sigma * c.sigma);
    for t in 0..c.t {
        for i in 0..c.d {
            let name = format!("x{}", i + 1);
            if t == 0 {
                b.add_node(
                    VariableId::indexed(name, 0),
                    Role::Latent,
                    vec![],
                    DistributionSpec::fixed(Distribution::Bernoulli { probability: p0 }),
                );
            } else {
                b.add_node(
                    VariableId::indexed(name.clone(), t),
                    Role::Latent,
                    vec![VariableId::indexed(name, t - 1)],
                    DistributionSpec::new(Family::Bernoulli, move |v| Distribution::Bernoulli {
                        probability: if v[0] > 0.5 { 1.0 - ps } else { ps },
                    }),
                );
            }
        }
        let mu = c.mu.clone();
        b.add_node(
            VariableId::indexed("y", t),
            Role::Observed,
            (0..c.d).map(|i| VariableId::indexed(format!("x{}", i + 1), t)).collect(),
            DistributionSpec::new(Family::Gaussian, move |v| Distribution::Gaussian {
                mean: v.iter().zip(&mu).map(|(x, m)| x * m).sum(),
                variance: var,
            }),
        );
    }
    let mut members: Vec<String> = (0..c.d).map(|i| format!("x{}", i + 1)).collect();
    members.push("y".into());
    let members: Vec<&str> = members.iter().map(|s| s.as_str()).collect();
    b.add_plate("time", &members, c.t);
    Ok(b.build()?)
}

/// Per-step inverse: all states at `t` given the previous states and `y_t`;
/// the first step conditions on `y_1` alone.
pub fn fhmm_inverse(c: &FhmmConfig, model: &GraphModel) -> Result<InverseModel, ModelError> {
    let factors = (0..c.t)
        .map(|t| {
            let targets = (0..c.d).map(|i| c.x_index(t, i)).collect();
            let mut conditioners: Vec<usize> = if t == 0 { vec![] } else { (0..c.d).map(|i| c.x_index(t - 1, i)).collect() };
            conditioners.push(c.y_index(t));
            InverseFactor { targets, conditioners, share_group: None }
        })
        .collect();
    let inv = InverseModel::from_factors(model, factors, model.latents())?;
    Ok(assign_share_groups(&inv, model))
}

pub fn build_fhmm(c: &FhmmConfig) -> Result<Example, ModelError> {
    let model = fhmm_model(c)?;
    let inverse = fhmm_inverse(c, &model)?;
    let plan = ProposalPlan::new(&model, &inverse, |_, _| NetworkSettings {
        hidden_sizes: c.hidden.clone(),
        components: 1,
        encoding: CondEncoding::Concat,
    })?;
    Ok(Example { model, inverse, plan, params: BTreeMap::new() })
}

/// A simulated FHMM sequence with its hidden device states.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub y: Vec<f64>,
    pub states: Vec<Vec<u8>>,
}

pub fn generate_episode(c: &FhmmConfig, seed: u64) -> Result<Episode, ModelError> {
    let model = fhmm_model(c)?;
    let a = model.ancestral_sample(&mut ChaCha8Rng::seed_from_u64(seed))?;
    let v = a.values();
    Ok(Episode {
        y: (0..c.t).map(|t| v[c.y_index(t)]).collect(),
        states: (0..c.t).map(|t| (0..c.d).map(|i| v[c.x_index(t, i)] as u8).collect()).collect(),
    })
}

/// Episode file: a header of `key=value` parameters, then one observation per line.
pub fn episode_to_text(c: &FhmmConfig, y: &[f64]) -> String {
    let mut s = String::new();
    let p = c.to_params();
    let header: Vec<String> =
        p.iter().filter(|(k, _)| k.as_str() != "hidden").map(|(k, v)| format!("{k}={v}")).collect();
    let _ = writeln!(s, "# {}", header.join(" "));
    for v in y {
        let _ = writeln!(s, "{v}");
    }
    s
}

/// Parses an episode file into its header parameters and observations.
pub fn parse_episode(text: &str) -> Result<(BTreeMap<String, String>, Vec<f64>), ModelError> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| ModelError::Data("empty episode file".into()))?;
    let header = header.trim().trim_start_matches('#');
    let mut params = BTreeMap::new();
    for kv in header.split_whitespace() {
        let (k, v) = kv.split_once('=').ok_or_else(|| ModelError::Data(format!("bad header entry '{kv}'")))?;
        params.insert(k.to_string(), v.to_string());
    }
    let y = lines
        .map(|l| l.trim().parse::<f64>().map_err(|e| ModelError::Data(format!("observation '{l}': {e}"))))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((params, y))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    pub hidden: Vec<usize>,
    pub components: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self { hidden: vec![32, 32], components: 1 }
    }
}

impl ToyConfig {
    fn take(p: &mut Params) -> Result<Self, ModelError> {
        let d = Self::default();
        Ok(Self { hidden: take_sizes(p, "hidden", d.hidden)?, components: take(p, "components", d.components)? })
    }
}

/// x ~ N(0, 1), y | x ~ N(x, 1).
pub fn conjugate_toy_model() -> Result<GraphModel, GraphError> {
    GraphModel::builder("conjugate-toy")
        .node("x", Role::Latent, vec![], DistributionSpec::fixed(Distribution::Gaussian { mean: 0.0, variance: 1.0 }))
        .node(
            "y",
            Role::Observed,
            vec!["x".into()],
            DistributionSpec::new(Family::Gaussian, |v| Distribution::Gaussian { mean: v[0], variance: 1.0 }),
        )
        .build()
}

pub fn build_conjugate_toy(c: &ToyConfig) -> Result<Example, ModelError> {
    let model = conjugate_toy_model()?;
    let inverse = standard_inverse(&model)?;
    let plan = ProposalPlan::new(&model, &inverse, |_, _| NetworkSettings {
        hidden_sizes: c.hidden.clone(),
        components: c.components,
        encoding: CondEncoding::Concat,
    })?;
    Ok(Example { model, inverse, plan, params: BTreeMap::new() })
}

/// Exact posterior mean and standard deviation of x given y for the toy.
pub fn toy_posterior(y: f64) -> (f64, f64) {
    (y / 2.0, 0.5f64.sqrt())
}

/// Exact log p(y) for the toy: y ~ N(0, 2).
pub fn toy_log_evidence(y: f64) -> f64 {
    -0.5 * (2.0 * std::f64::consts::PI * 2.0).ln() - y * y / 4.0
}

/// Observed values for an example: from a data file if given, the pump
/// fixture for the pump model, otherwise a synthetic draw from the model.
pub fn load_observations(ex: &Example, text: Option<&str>, seed: u64) -> Result<Assignment, ModelError> {
    let model = &ex.model;
    let mut a = Assignment::empty(model.len());
    let set = |a: &mut Assignment, name: &str, i: Option<usize>, v: f64| -> Result<(), ModelError> {
        let id = match i {
            Some(i) => VariableId::indexed(name, i),
            None => VariableId::new(name),
        };
        a.set(model.index_of(&id)?, v);
        Ok(())
    };
    let text = match (text, ex.name()) {
        (Some(t), _) => t.to_string(),
        (None, "pump") => PUMP_FIXTURE.to_string(),
        (None, _) => {
            let full = model.ancestral_sample(&mut ChaCha8Rng::seed_from_u64(seed))?;
            for o in model.observed() {
                a.set(o, full.values()[o]);
            }
            return Ok(a);
        }
    };
    match ex.name() {
        "regression" | "pump" => {
            let rows = read_table(&text)?;
            let n = model.plates()[0].count;
            if rows.len() != n {
                return Err(ModelError::Data(format!(
                    "data has {} rows but the {} model was built for N={n}; rebuild with --set n={}",
                    rows.len(),
                    ex.name(),
                    rows.len()
                )));
            }
            let (a_name, b_name) = if ex.name() == "regression" { ("z", "t") } else { ("t", "y") };
            for (i, r) in rows.iter().enumerate() {
                if r.len() != 2 {
                    return Err(ModelError::Data(format!("row {} has {} columns, expected 2", i + 1, r.len())));
                }
                set(&mut a, a_name, Some(i), r[0])?;
                set(&mut a, b_name, Some(i), r[1])?;
            }
        }
        "fhmm" => {
            let (_, y) = parse_episode(&text)?;
            let n = model.plates()[0].count;
            if y.len() != n {
                return Err(ModelError::Data(format!("episode has {} steps but the model was built for T={n}", y.len())));
            }
            for (t, v) in y.iter().enumerate() {
                set(&mut a, "y", Some(t), *v)?;
            }
        }
        _ => {
            let rows = read_table(&text)?;
            let v = rows.first().and_then(|r| r.first()).ok_or_else(|| ModelError::Data("no observation".into()))?;
            set(&mut a, "y", None, *v)?;
        }
    }
    for o in model.observed() {
        let x = a.values()[o];
        let d = model.node(o).dist.family();
        if !a.is_set(o) || !x.is_finite() {
            return Err(ModelError::Data(format!("missing value for {}", model.id(o))));
        }
        if d == Family::Poisson && (x < 0.0 || x.fract() != 0.0) {
            return Err(ModelError::Data(format!("{} must be a nonnegative integer, got {x}", model.id(o))));
        }
        if d.is_positive() && x <= 0.0 {
            return Err(ModelError::Data(format!("{} must be positive, got {x}", model.id(o))));
        }
    }
    Ok(a)
}

/// Exact inference in a small FHMM over its 2^D joint states.
#[derive(Debug, Clone)]
pub struct FhmmOracle {
    pub config: FhmmConfig,
    pub y: Vec<f64>,
    /// log p(x_t = s, y_1..y_t).
    pub log_alpha: Vec<Vec<f64>>,
    /// log p(y_{t+1}..y_T | x_t = s).
    pub log_beta: Vec<Vec<f64>>,
    pub log_evidence: f64,
}

impl FhmmOracle {
    pub fn new(c: &FhmmConfig, y: &[f64]) -> Result<Self, ModelError> {
        c.validate()?;
        if y.len() != c.t {
            return Err(ModelError::Data(format!("{} observations for T={}", y.len(), c.t)));
        }
        if c.d > 16 {
            return Err(bad("d", "exact enumeration limited to 16 devices"));
        }
        let ns = 1usize << c.d;
        let mut log_alpha = vec![vec![0.0; ns]; c.t];
        for s in 0..ns {
            log_alpha[0][s] = joint_log_init(c, s) + joint_log_emit(c, y[0], s);
        }
        for t in 1..c.t {
            for s in 0..ns {
                let terms: Vec<f64> = (0..ns).map(|r| log_alpha[t - 1][r] + joint_log_trans(c, r, s)).collect();
                log_alpha[t][s] = lse(&terms) + joint_log_emit(c, y[t], s);
            }
        }
        let mut log_beta = vec![vec![0.0; ns]; c.t];
        for t in (0..c.t - 1).rev() {
            for r in 0..ns {
                let terms: Vec<f64> = (0..ns)
                    .map(|s| joint_log_trans(c, r, s) + joint_log_emit(c, y[t + 1], s) + log_beta[t + 1][s])
                    .collect();
                log_beta[t][r] = lse(&terms);
            }
        }
        let log_evidence = lse(&log_alpha[c.t - 1]);
        Ok(Self { config: c.clone(), y: y.to_vec(), log_alpha, log_beta, log_evidence })
    }

    pub fn n_states(&self) -> usize {
        1 << self.config.d
    }

    /// P(x_t^i = 1 | y_1..y_T) indexed `[t][i]`.
    pub fn smoothing_marginals(&self) -> Vec<Vec<f64>> {
        self.marginals(|t, s| self.log_alpha[t][s] + self.log_beta[t][s])
    }

    /// P(x_t^i = 1 | y_1..y_t) indexed `[t][i]`.
    pub fn filtering_marginals(&self) -> Vec<Vec<f64>> {
        self.marginals(|t, s| self.log_alpha[t][s])
    }

    fn marginals(&self, score: impl Fn(usize, usize) -> f64) -> Vec<Vec<f64>> {
        let c = &self.config;
        (0..c.t)
            .map(|t| {
                let lp: Vec<f64> = (0..self.n_states()).map(|s| score(t, s)).collect();
                let z = lse(&lp);
                (0..c.d)
                    .map(|i| (0..self.n_states()).filter(|s| s >> i & 1 == 1).map(|s| (lp[s] - z).exp()).sum())
                    .collect()
            })
            .collect()
    }
}

/// Joint state of the devices at time `t` read from a model value vector.
pub fn joint_state(c: &FhmmConfig, values: &[f64], t: usize) -> usize {
    (0..c.d).filter(|&i| values[c.x_index(t, i)] > 0.5).fold(0, |s, i| s | 1 << i)
}

pub fn joint_log_init(c: &FhmmConfig, s: usize) -> f64 {
    (0..c.d).map(|i| if s >> i & 1 == 1 { c.p_init.ln() } else { (1.0 - c.p_init).ln() }).sum()
}

pub fn joint_log_trans(c: &FhmmConfig, from: usize, to: usize) -> f64 {
    let flips = ((from ^ to) & ((1 << c.d) - 1)).count_ones() as f64;
    flips * c.p_switch.ln() + (c.d as f64 - flips) * (1.0 - c.p_switch).ln()
}

pub fn joint_log_emit(c: &FhmmConfig, y: f64, s: usize) -> f64 {
    let mean: f64 = (0..c.d).filter(|&i| s >> i & 1 == 1).map(|i| c.mu[i]).sum();
    let var = c.sigma * c.sigma;
    -0.5 * (2.0 * std::f64::consts::PI * var).ln() - (y - mean) * (y - mean) / (2.0 * var)
}

/// log p(y) by summing over all 2^(D·T) state trajectories.
pub fn brute_force_log_evidence(c: &FhmmConfig, y: &[f64]) -> f64 {
    let ns = 1usize << c.d;
    let total = ns.pow(c.t as u32);
    let mut terms = Vec::with_capacity(total);
    for code in 0..total {
        let mut rest = code;
        let mut prev = 0;
        let mut lp = 0.0;
        for (t, yt) in y.iter().enumerate().take(c.t) {
            let s = rest % ns;
            rest /= ns;
            lp += if t == 0 { joint_log_init(c, s) } else { joint_log_trans(c, prev, s) };
            lp += joint_log_emit(c, *yt, s);
            prev = s;
        }
        terms.push(lp);
    }
    lse(&terms)
}

fn lse(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// A random DAG over `n` binary nodes with logistic conditionals. Each node is
/// observed with probability `observed_prob`; at least one node is latent.
pub fn random_binary_dag(n: usize, edge_prob: f64, observed_prob: f64, seed: u64) -> Result<GraphModel, GraphError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut roles: Vec<Role> =
        (0..n).map(|_| if rng.random::<f64>() < observed_prob { Role::Observed } else { Role::Latent }).collect();
    if !roles.contains(&Role::Latent) {
        roles[0] = Role::Latent;
    }
    let mut b = GraphModelBuilder::new("random-dag");
    for (i, role) in roles.iter().enumerate() {
        let parents: Vec<usize> = (0..i).filter(|_| rng.random::<f64>() < edge_prob).collect();
        let bias = rng.random_range(-2.0..2.0);
        let w: Vec<f64> = parents.iter().map(|_| rng.random_range(-3.0..3.0)).collect();
        b.add_node(
            format!("v{i}").as_str(),
            *role,
            parents.iter().map(|p| VariableId::new(format!("v{p}"))).collect(),
            DistributionSpec::new(Family::Bernoulli, move |v| {
                let a = bias + v.iter().zip(&w).map(|(x, w)| x * w).sum::<f64>();
                Distribution::Bernoulli { probability: 1.0 / (1.0 + (-a).exp()) }
            }),
        );
    }
    b.build()
}
