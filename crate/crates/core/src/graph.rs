//! Directed graphical models: nodes with parametric conditional densities,
//! ancestral sampling, joint log-density and d-separation queries.

use std::collections::{BTreeSet, BinaryHeap, HashMap, VecDeque};
use std::cmp::Reverse;
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::Distribution as _;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Poisson draws above this rate use a moment-matched normal.
const POISSON_NORMAL_RATE: f64 = 1e15;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("graph contains a directed cycle through {0}")]
    CycleDetected(String),
    #[error("unknown variable {0}")]
    UnknownVariable(String),
    #[error("assignment is missing a value for {0}")]
    MissingVariable(String),
    #[error("duplicate variable {0}")]
    DuplicateVariable(String),
    #[error("invalid parameters for {node}: {reason}")]
    InvalidParameters { node: String, reason: String },
}

/// Name of a random variable, optionally indexed by its instance within a plate.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VariableId {
    pub name: String,
    pub plate_index: Option<usize>,
}

impl VariableId {
    pub fn new(name: impl Into<String>) -> Self {
        Self { name: name.into(), plate_index: None }
    }

    pub fn indexed(name: impl Into<String>, index: usize) -> Self {
        Self { name: name.into(), plate_index: Some(index) }
    }
}

impl fmt::Display for VariableId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.plate_index {
            Some(i) => write!(f, "{}[{}]", self.name, i),
            None => f.write_str(&self.name),
        }
    }
}

impl From<&str> for VariableId {
    fn from(s: &str) -> Self {
        VariableId::new(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Latent,
    Observed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Support {
    Discrete,
    Continuous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Family {
    Gaussian,
    Laplace,
    StudentT,
    Gamma,
    Exponential,
    Poisson,
    Bernoulli,
    Uniform,
}

impl Family {
    pub fn support(self) -> Support {
        match self {
            Family::Poisson | Family::Bernoulli => Support::Discrete,
            _ => Support::Continuous,
        }
    }

    /// True for families supported on the positive half-line.
    pub fn is_positive(self) -> bool {
        matches!(self, Family::Gamma | Family::Exponential)
    }
}

/// A fully parameterized univariate distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Distribution {
    Gaussian { mean: f64, variance: f64 },
    Laplace { location: f64, scale: f64 },
    /// `location + scale * T(dof)`.
    StudentT { dof: f64, location: f64, scale: f64 },
    Gamma { shape: f64, rate: f64 },
    Exponential { rate: f64 },
    Poisson { rate: f64 },
    Bernoulli { probability: f64 },
    Uniform { low: f64, high: f64 },
}

impl Distribution {
    pub fn family(&self) -> Family {
        match self {
            Distribution::Gaussian { .. } => Family::Gaussian,
            Distribution::Laplace { .. } => Family::Laplace,
            Distribution::StudentT { .. } => Family::StudentT,
            Distribution::Gamma { .. } => Family::Gamma,
            Distribution::Exponential { .. } => Family::Exponential,
            Distribution::Poisson { .. } => Family::Poisson,
            Distribution::Bernoulli { .. } => Family::Bernoulli,
            Distribution::Uniform { .. } => Family::Uniform,
        }
    }

    /// Checks the family constraints, returning a description of the first violation.
    pub fn check(&self) -> Result<(), String> {
        let pos = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(format!("{name} must be positive and finite, got {v}"))
            }
        };
        let fin = |name: &str, v: f64| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(format!("{name} must be finite, got {v}"))
            }
        };
        match *self {
            Distribution::Gaussian { mean, variance } => {
                fin("mean", mean)?;
                pos("variance", variance)
            }
            Distribution::Laplace { location, scale } => {
                fin("location", location)?;
                pos("scale", scale)
            }
            Distribution::StudentT { dof, location, scale } => {
                pos("dof", dof)?;
                fin("location", location)?;
                pos("scale", scale)
            }
            Distribution::Gamma { shape, rate } => {
                pos("shape", shape)?;
                pos("rate", rate)
            }
            Distribution::Exponential { rate } => pos("rate", rate),
            // rate 0 is the point mass at zero
            Distribution::Poisson { rate } => {
                if rate >= 0.0 && !rate.is_nan() {
                    Ok(())
                } else {
                    Err(format!("rate must be nonnegative, got {rate}"))
                }
            }
            Distribution::Bernoulli { probability } => {
                if (0.0..=1.0).contains(&probability) {
                    Ok(())
                } else {
                    Err(format!("probability must lie in [0, 1], got {probability}"))
                }
            }
            Distribution::Uniform { low, high } => {
                fin("low", low)?;
                fin("high", high)?;
                if low < high {
                    Ok(())
                } else {
                    Err(format!("need low < high, got [{low}, {high}]"))
                }
            }
        }
    }

    /// Natural-log density (or mass) at `x`; `-inf` outside the support.
    pub fn log_density(&self, x: f64) -> f64 {
        match *self {
            Distribution::Gaussian { mean, variance } => {
                let d = x - mean;
                -0.5 * (LN_2PI + variance.ln()) - 0.5 * d * d / variance
            }
            Distribution::Laplace { location, scale } => {
                -(2.0 * scale).ln() - (x - location).abs() / scale
            }
            Distribution::StudentT { dof, location, scale } => {
                let z = (x - location) / scale;
                ln_gamma(0.5 * (dof + 1.0))
                    - ln_gamma(0.5 * dof)
                    - 0.5 * (dof * std::f64::consts::PI).ln()
                    - scale.ln()
                    - 0.5 * (dof + 1.0) * (z * z / dof).ln_1p()
            }
            Distribution::Gamma { shape, rate } => {
                if x <= 0.0 {
                    return f64::NEG_INFINITY;
                }
                shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
            }
            Distribution::Exponential { rate } => {
                if x < 0.0 {
                    return f64::NEG_INFINITY;
                }
                rate.ln() - rate * x
            }
            Distribution::Poisson { rate } => {
                if x < 0.0 || x.fract() != 0.0 {
                    return f64::NEG_INFINITY;
                }
                if rate == 0.0 {
                    return if x == 0.0 { 0.0 } else { f64::NEG_INFINITY };
                }
                x * rate.ln() - rate - ln_gamma(x + 1.0)
            }
            Distribution::Bernoulli { probability } => {
                if x == 1.0 {
                    probability.ln()
                } else if x == 0.0 {
                    (-probability).ln_1p()
                } else {
                    f64::NEG_INFINITY
                }
            }
            Distribution::Uniform { low, high } => {
                if x < low || x > high {
                    f64::NEG_INFINITY
                } else {
                    -(high - low).ln()
                }
            }
        }
    }

    /// Draws one value. Parameters must already satisfy [`Distribution::check`].
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Distribution::Gaussian { mean, variance } => {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                mean + variance.sqrt() * z
            }
            Distribution::Laplace { location, scale } => {
                let u: f64 = rng.random::<f64>() - 0.5;
                location - scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
            }
            Distribution::StudentT { dof, location, scale } => {
                let t = rand_distr::StudentT::new(dof).expect("checked dof").sample(rng);
                location + scale * t
            }
            Distribution::Gamma { shape, rate } => {
                let g = rand_distr::Gamma::new(shape, 1.0 / rate).expect("checked gamma");
                // small shapes underflow to exactly zero, which lies outside the support
                g.sample(rng).max(f64::MIN_POSITIVE)
            }
            Distribution::Exponential { rate } => {
                rand_distr::Exp::new(rate).expect("checked rate").sample(rng)
            }
            Distribution::Poisson { rate } => {
                if rate == 0.0 {
                    0.0
                } else if rate > POISSON_NORMAL_RATE {
                    let z: f64 = rng.sample(rand_distr::StandardNormal);
                    (rate + rate.sqrt() * z).round().max(0.0)
                } else {
                    rand_distr::Poisson::new(rate).expect("checked rate").sample(rng)
                }
            }
            Distribution::Bernoulli { probability } => {
                if rng.random::<f64>() < probability {
                    1.0
                } else {
                    0.0
                }
            }
            Distribution::Uniform { low, high } => low + (high - low) * rng.random::<f64>(),
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            Distribution::Gaussian { mean, .. } => mean,
            Distribution::Laplace { location, .. } => location,
            Distribution::StudentT { location, .. } => location,
            Distribution::Gamma { shape, rate } => shape / rate,
            Distribution::Exponential { rate } => 1.0 / rate,
            Distribution::Poisson { rate } => rate,
            Distribution::Bernoulli { probability } => probability,
            Distribution::Uniform { low, high } => 0.5 * (low + high),
        }
    }
}

/// Maps parent values (in declared parent order) to a distribution.
pub type ParamFn = Arc<dyn Fn(&[f64]) -> Distribution + Send + Sync>;

/// A conditional density: a family plus the host function computing its parameters.
#[derive(Clone)]
pub struct DistributionSpec {
    family: Family,
    transform: ParamFn,
}

impl DistributionSpec {
    pub fn new(family: Family, transform: impl Fn(&[f64]) -> Distribution + Send + Sync + 'static) -> Self {
        Self { family, transform: Arc::new(transform) }
    }

    /// A parentless node with fixed parameters.
    pub fn fixed(dist: Distribution) -> Self {
        Self::new(dist.family(), move |_| dist)
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn evaluate(&self, parents: &[f64]) -> Result<Distribution, String> {
        let d = (self.transform)(parents);
        if d.family() != self.family {
            return Err(format!("transform returned {:?}, expected {:?}", d.family(), self.family));
        }
        d.check()?;
        Ok(d)
    }
}

impl fmt::Debug for DistributionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DistributionSpec").field("family", &self.family).finish_non_exhaustive()
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub id: VariableId,
    pub role: Role,
    pub parents: Vec<usize>,
    pub dist: DistributionSpec,
}

impl Node {
    pub fn support(&self) -> Support {
        self.dist.family().support()
    }

    pub fn is_latent(&self) -> bool {
        self.role == Role::Latent
    }
}

/// Replication metadata: `members` are the template names instantiated `count` times.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Plate {
    pub name: String,
    pub members: Vec<String>,
    pub count: usize,
}

/// Parent/child adjacency of a DAG over node indices.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dag {
    pub parents: Vec<Vec<usize>>,
    pub children: Vec<Vec<usize>>,
}

impl Dag {
    pub fn from_parents(parents: Vec<Vec<usize>>) -> Self {
        let mut children = vec![Vec::new(); parents.len()];
        for (v, ps) in parents.iter().enumerate() {
            for &p in ps {
                children[p].push(v);
            }
        }
        Self { parents, children }
    }

    pub fn len(&self) -> usize {
        self.parents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parents.is_empty()
    }

    /// Kahn's algorithm, always emitting the lowest-index ready node first.
    pub fn topological_order(&self) -> Result<Vec<usize>, usize> {
        let n = self.len();
        let mut indegree: Vec<usize> = self.parents.iter().map(Vec::len).collect();
        let mut ready: BinaryHeap<Reverse<usize>> =
            (0..n).filter(|&v| indegree[v] == 0).map(Reverse).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(Reverse(v)) = ready.pop() {
            order.push(v);
            for &c in &self.children[v] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    ready.push(Reverse(c));
                }
            }
        }
        if order.len() == n {
            Ok(order)
        } else {
            Err((0..n).find(|&v| indegree[v] > 0).unwrap_or(0))
        }
    }

    pub fn markov_blanket(&self, v: usize) -> BTreeSet<usize> {
        let mut mb: BTreeSet<usize> = self.parents[v].iter().copied().collect();
        for &c in &self.children[v] {
            mb.insert(c);
            mb.extend(self.parents[c].iter().copied());
        }
        mb.remove(&v);
        mb
    }

    /// Reachability ("Bayes ball") test: true iff every trail between `a` and `b`
    /// is blocked by `given`.
    pub fn d_separated(&self, a: &[usize], b: &[usize], given: &[usize]) -> bool {
        let n = self.len();
        let mut observed = vec![false; n];
        for &z in given {
            observed[z] = true;
        }
        // ancestors of the conditioning set, including itself
        let mut anc = vec![false; n];
        let mut stack: Vec<usize> = given.to_vec();
        while let Some(v) = stack.pop() {
            if !anc[v] {
                anc[v] = true;
                stack.extend(self.parents[v].iter().copied());
            }
        }
        let mut target = vec![false; n];
        for &v in b {
            target[v] = true;
        }
        // direction: 0 = arrived from a child (moving up), 1 = arrived from a parent
        let mut visited = vec![[false; 2]; n];
        let mut queue: VecDeque<(usize, usize)> = a.iter().map(|&v| (v, 0)).collect();
        while let Some((v, dir)) = queue.pop_front() {
            if visited[v][dir] {
                continue;
            }
            visited[v][dir] = true;
            if !observed[v] && target[v] {
                return false;
            }
            if dir == 0 {
                if !observed[v] {
                    queue.extend(self.parents[v].iter().map(|&p| (p, 0)));
                    queue.extend(self.children[v].iter().map(|&c| (c, 1)));
                }
            } else {
                if !observed[v] {
                    queue.extend(self.children[v].iter().map(|&c| (c, 1)));
                }
                if anc[v] {
                    queue.extend(self.parents[v].iter().map(|&p| (p, 0)));
                }
            }
        }
        true
    }
}

/// Values for (some of) a model's nodes, indexed by node position. Unset entries are NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    values: Vec<f64>,
}

impl Assignment {
    pub fn empty(len: usize) -> Self {
        Self { values: vec![f64::NAN; len] }
    }

    pub fn from_values(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn get(&self, idx: usize) -> Option<f64> {
        let v = self.values[idx];
        (!v.is_nan()).then_some(v)
    }

    pub fn set(&mut self, idx: usize, value: f64) {
        self.values[idx] = value;
    }

    pub fn is_set(&self, idx: usize) -> bool {
        !self.values[idx].is_nan()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Builder collecting nodes in declaration order; parents may be declared later.
#[derive(Default)]
pub struct GraphModelBuilder {
    name: String,
    nodes: Vec<(VariableId, Role, Vec<VariableId>, DistributionSpec)>,
    plates: Vec<Plate>,
}

impl GraphModelBuilder {
    pub fn new(name: impl Into<String>) -> Self {
        Self { name: name.into(), ..Default::default() }
    }

    pub fn node(
        mut self,
        id: impl Into<VariableId>,
        role: Role,
        parents: Vec<VariableId>,
        dist: DistributionSpec,
    ) -> Self {
        self.nodes.push((id.into(), role, parents, dist));
        self
    }

    pub fn add_node(
        &mut self,
        id: impl Into<VariableId>,
        role: Role,
        parents: Vec<VariableId>,
        dist: DistributionSpec,
    ) -> &mut Self {
        self.nodes.push((id.into(), role, parents, dist));
        self
    }

    pub fn plate(mut self, name: impl Into<String>, members: &[&str], count: usize) -> Self {
        self.add_plate(name, members, count);
        self
    }

    pub fn add_plate(&mut self, name: impl Into<String>, members: &[&str], count: usize) -> &mut Self {
        self.plates.push(Plate {
            name: name.into(),
            members: members.iter().map(|s| s.to_string()).collect(),
            count,
        });
        self
    }

    pub fn build(self) -> Result<GraphModel, GraphError> {
        let mut index = HashMap::with_capacity(self.nodes.len());
        for (i, (id, ..)) in self.nodes.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(GraphError::DuplicateVariable(id.to_string()));
            }
        }
        let mut nodes = Vec::with_capacity(self.nodes.len());
        for (id, role, parents, dist) in self.nodes {
            let parents = parents
                .iter()
                .map(|p| index.get(p).copied().ok_or_else(|| GraphError::UnknownVariable(p.to_string())))
                .collect::<Result<Vec<_>, _>>()?;
            nodes.push(Node { id, role, parents, dist });
        }
        let dag = Dag::from_parents(nodes.iter().map(|n| n.parents.clone()).collect());
        let order = dag
            .topological_order()
            .map_err(|v| GraphError::CycleDetected(nodes[v].id.to_string()))?;
        Ok(GraphModel { name: self.name, nodes, index, dag, order, plates: self.plates })
    }
}

/// An immutable directed acyclic graphical model.
#[derive(Debug, Clone)]
pub struct GraphModel {
    name: String,
    nodes: Vec<Node>,
    index: HashMap<VariableId, usize>,
    dag: Dag,
    order: Vec<usize>,
    plates: Vec<Plate>,
}

impl GraphModel {
    pub fn builder(name: impl Into<String>) -> GraphModelBuilder {
        GraphModelBuilder::new(name)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, idx: usize) -> &Node {
        &self.nodes[idx]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn plates(&self) -> &[Plate] {
        &self.plates
    }

    pub fn dag(&self) -> &Dag {
        &self.dag
    }

    pub fn index_of(&self, id: &VariableId) -> Result<usize, GraphError> {
        self.index.get(id).copied().ok_or_else(|| GraphError::UnknownVariable(id.to_string()))
    }

    pub fn id(&self, idx: usize) -> &VariableId {
        &self.nodes[idx].id
    }

    pub fn latents(&self) -> Vec<usize> {
        self.order.iter().copied().filter(|&i| self.nodes[i].is_latent()).collect()
    }

    pub fn observed(&self) -> Vec<usize> {
        self.order.iter().copied().filter(|&i| !self.nodes[i].is_latent()).collect()
    }

    pub fn children(&self, idx: usize) -> &[usize] {
        &self.dag.children[idx]
    }

    /// The plate a node belongs to, if its template is a member of a declared plate.
    pub fn plate_of(&self, idx: usize) -> Option<&Plate> {
        let id = &self.nodes[idx].id;
        id.plate_index?;
        self.plates.iter().find(|p| p.members.iter().any(|m| *m == id.name))
    }

    /// Topological order over node indices; ties broken by declaration order.
    pub fn topological_order(&self) -> &[usize] {
        &self.order
    }

    pub fn topological_sort(&self) -> Vec<VariableId> {
        self.order.iter().map(|&i| self.nodes[i].id.clone()).collect()
    }

    pub fn markov_blanket(&self, v: &VariableId) -> Result<BTreeSet<VariableId>, GraphError> {
        let i = self.index_of(v)?;
        Ok(self.dag.markov_blanket(i).into_iter().map(|j| self.nodes[j].id.clone()).collect())
    }

    pub fn d_separated(
        &self,
        a: &[VariableId],
        b: &[VariableId],
        given: &[VariableId],
    ) -> Result<bool, GraphError> {
        let resolve = |s: &[VariableId]| s.iter().map(|v| self.index_of(v)).collect::<Result<Vec<_>, _>>();
        Ok(self.dag.d_separated(&resolve(a)?, &resolve(b)?, &resolve(given)?))
    }

    /// The conditional distribution of node `idx` given the parent values in `values`.
    pub fn conditional(&self, idx: usize, values: &[f64]) -> Result<Distribution, GraphError> {
        let node = &self.nodes[idx];
        let mut pv = [0.0; 32];
        let parents: Vec<f64>;
        let pslice: &[f64] = if node.parents.len() <= pv.len() {
            for (slot, &p) in pv.iter_mut().zip(&node.parents) {
                *slot = values[p];
            }
            &pv[..node.parents.len()]
        } else {
            parents = node.parents.iter().map(|&p| values[p]).collect();
            &parents
        };
        if let Some(&p) = node.parents.iter().find(|&&p| values[p].is_nan()) {
            return Err(GraphError::MissingVariable(self.nodes[p].id.to_string()));
        }
        node.dist.evaluate(pslice).map_err(|reason| GraphError::InvalidParameters {
            node: node.id.to_string(),
            reason,
        })
    }

    /// Log density of a single node's factor at the values in `values`.
    pub fn log_factor(&self, idx: usize, values: &[f64]) -> Result<f64, GraphError> {
        let x = values[idx];
        if x.is_nan() {
            return Err(GraphError::MissingVariable(self.nodes[idx].id.to_string()));
        }
        Ok(self.conditional(idx, values)?.log_density(x))
    }

    pub fn log_joint(&self, a: &Assignment) -> Result<f64, GraphError> {
        let mut total = 0.0;
        for &i in &self.order {
            total += self.log_factor(i, a.values())?;
        }
        Ok(total)
    }

    pub fn ancestral_sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Assignment, GraphError> {
        let mut a = Assignment::empty(self.len());
        self.sample_into(&mut a, rng)?;
        Ok(a)
    }

    /// Fills every unset node of `a` by ancestral sampling, keeping values already set.
    pub fn sample_into<R: Rng + ?Sized>(&self, a: &mut Assignment, rng: &mut R) -> Result<(), GraphError> {
        for &i in &self.order {
            if !a.is_set(i) {
                let d = self.conditional(i, a.values())?;
                a.set(i, d.sample(rng));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn chain() -> GraphModel {
        let g = |_: &[f64]| Distribution::Gaussian { mean: 0.0, variance: 1.0 };
        let h = |p: &[f64]| Distribution::Gaussian { mean: p[0], variance: 1.0 };
        GraphModel::builder("chain")
            .node("a", Role::Latent, vec![], DistributionSpec::new(Family::Gaussian, g))
            .node("b", Role::Latent, vec!["a".into()], DistributionSpec::new(Family::Gaussian, h))
            .node("c", Role::Observed, vec!["b".into()], DistributionSpec::new(Family::Gaussian, h))
            .build()
            .unwrap()
    }

    fn bern(p: f64) -> DistributionSpec {
        DistributionSpec::fixed(Distribution::Bernoulli { probability: p })
    }

    #[test]
    fn chain_sorts_in_order() {
        let m = chain();
        let names: Vec<String> = m.topological_sort().iter().map(|v| v.to_string()).collect();
        assert_eq!(names, ["a", "b", "c"]);
    }

    #[test]
    fn declaration_order_breaks_ties_and_late_parents_resolve() {
        let spec = || DistributionSpec::fixed(Distribution::Gaussian { mean: 0.0, variance: 1.0 });
        let m = GraphModel::builder("late")
            .node("child", Role::Observed, vec!["p".into()], spec())
            .node("q", Role::Latent, vec![], spec())
            .node("p", Role::Latent, vec![], spec())
            .build()
            .unwrap();
        let names: Vec<String> = m.topological_sort().iter().map(|v| v.to_string()).collect();
        assert_eq!(names, ["q", "p", "child"]);
    }

    #[test]
    fn cycles_are_rejected() {
        let spec = || DistributionSpec::fixed(Distribution::Gaussian { mean: 0.0, variance: 1.0 });
        let err = GraphModel::builder("cyc")
            .node("a", Role::Latent, vec!["c".into()], spec())
            .node("b", Role::Latent, vec!["a".into()], spec())
            .node("c", Role::Latent, vec!["b".into()], spec())
            .build()
            .unwrap_err();
        assert!(matches!(err, GraphError::CycleDetected(_)));
        let err = GraphModel::builder("self")
            .node("a", Role::Latent, vec!["a".into()], spec())
            .build()
            .unwrap_err();
        assert!(matches!(err, GraphError::CycleDetected(_)));
    }

    #[test]
    fn unknown_parent_and_duplicates() {
        let spec = || DistributionSpec::fixed(Distribution::Gaussian { mean: 0.0, variance: 1.0 });
        let err = GraphModel::builder("x").node("a", Role::Latent, vec!["zz".into()], spec()).build();
        assert_eq!(err.unwrap_err(), GraphError::UnknownVariable("zz".into()));
        let err = GraphModel::builder("x")
            .node("a", Role::Latent, vec![], spec())
            .node("a", Role::Latent, vec![], spec())
            .build();
        assert!(matches!(err.unwrap_err(), GraphError::DuplicateVariable(_)));
    }

    #[test]
    fn isolated_node_has_empty_blanket() {
        let m = GraphModel::builder("one").node("a", Role::Latent, vec![], bern(0.5)).build().unwrap();
        assert!(m.markov_blanket(&"a".into()).unwrap().is_empty());
        assert!(matches!(m.markov_blanket(&"nope".into()), Err(GraphError::UnknownVariable(_))));
    }

    #[test]
    fn standard_gaussian_log_density_at_zero() {
        let m = GraphModel::builder("g")
            .node("x", Role::Latent, vec![], DistributionSpec::fixed(Distribution::Gaussian { mean: 0.0, variance: 1.0 }))
            .build()
            .unwrap();
        let lp = m.log_joint(&Assignment::from_values(vec![0.0])).unwrap();
        assert!((lp - (-0.918_938_533_204_672_7)).abs() < 1e-14);
    }

    #[test]
    fn bernoulli_chain_log_joint() {
        let m = GraphModel::builder("bc")
            .node("a", Role::Latent, vec![], bern(0.5))
            .node(
                "b",
                Role::Observed,
                vec!["a".into()],
                DistributionSpec::new(Family::Bernoulli, |p| Distribution::Bernoulli {
                    probability: p[0] * 0.9 + (1.0 - p[0]) * 0.1,
                }),
            )
            .build()
            .unwrap();
        let lp = m.log_joint(&Assignment::from_values(vec![1.0, 1.0])).unwrap();
        assert!((lp - 0.45f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn poisson_rate_zero_is_point_mass() {
        let d = Distribution::Poisson { rate: 0.0 };
        assert_eq!(d.log_density(1.0), f64::NEG_INFINITY);
        assert_eq!(d.log_density(0.0), 0.0);
    }

    #[test]
    fn partial_assignment_is_an_error() {
        let m = chain();
        let mut a = Assignment::empty(3);
        a.set(0, 0.0);
        a.set(1, 0.0);
        assert!(matches!(m.log_joint(&a), Err(GraphError::MissingVariable(v)) if v == "c"));
    }

    #[test]
    fn invalid_parameters_surface() {
        let m = GraphModel::builder("bad")
            .node("a", Role::Latent, vec![], DistributionSpec::fixed(Distribution::Gaussian { mean: 0.0, variance: -1.0 }))
            .build()
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(m.ancestral_sample(&mut rng), Err(GraphError::InvalidParameters { .. })));
    }

    #[test]
    fn degenerate_bernoulli_samples_one() {
        let m = GraphModel::builder("b").node("a", Role::Latent, vec![], bern(1.0)).build().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            assert_eq!(m.ancestral_sample(&mut rng).unwrap().get(0), Some(1.0));
        }
    }

    #[test]
    fn uniform_sample_mean() {
        let m = GraphModel::builder("u")
            .node("u", Role::Latent, vec![], DistributionSpec::fixed(Distribution::Uniform { low: -10.0, high: 10.0 }))
            .build()
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mean: f64 = (0..n).map(|_| m.ancestral_sample(&mut rng).unwrap().values()[0]).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.1, "mean {mean}");
    }

    #[test]
    fn same_seed_same_sample() {
        let m = chain();
        let a = m.ancestral_sample(&mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = m.ancestral_sample(&mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   b.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn chain_and_collider_separation() {
        let m = chain();
        let id = |s: &str| VariableId::new(s);
        assert!(m.d_separated(&[id("a")], &[id("c")], &[id("b")]).unwrap());
        assert!(!m.d_separated(&[id("a")], &[id("c")], &[]).unwrap());

        let spec = || bern(0.5);
        let col = GraphModel::builder("col")
            .node("a", Role::Latent, vec![], spec())
            .node("b", Role::Latent, vec![], spec())
            .node("c", Role::Observed, vec!["a".into(), "b".into()], spec())
            .node("d", Role::Observed, vec!["c".into()], spec())
            .build()
            .unwrap();
        assert!(col.d_separated(&[id("a")], &[id("b")], &[]).unwrap());
        assert!(!col.d_separated(&[id("a")], &[id("b")], &[id("c")]).unwrap());
        // conditioning on a descendant of the collider also opens it
        assert!(!col.d_separated(&[id("a")], &[id("b")], &[id("d")]).unwrap());
    }

    #[test]
    fn laplace_and_student_t_densities() {
        let l = Distribution::Laplace { location: 1.0, scale: 2.0 };
        assert!((l.log_density(3.0) - (-(4.0f64).ln() - 1.0)).abs() < 1e-14);
        // t with one degree of freedom is Cauchy
        let t = Distribution::StudentT { dof: 1.0, location: 0.0, scale: 1.0 };
        assert!((t.log_density(1.0) - (1.0 / (2.0 * std::f64::consts::PI)).ln()).abs() < 1e-12);
        let g = Distribution::Gamma { shape: 1.0, rate: 2.0 };
        let e = Distribution::Exponential { rate: 2.0 };
        assert!((g.log_density(0.7) - e.log_density(0.7)).abs() < 1e-12);
    }
}
