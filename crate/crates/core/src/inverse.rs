//! Inverse factorizations p̃(x | y): reversed parent sets from Markov-blanket
//! intersections, joint-block grouping and plate weight sharing.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Dag, Family, GraphModel, VariableId};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum InverseError {
    #[error("invalid latent order: {0}")]
    InvalidOrder(String),
    #[error("malformed inverse model: {0}")]
    Malformed(String),
}

/// One learned conditional: a block of latents given its inverse parents.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InverseFactor {
    pub targets: Vec<usize>,
    pub conditioners: Vec<usize>,
    pub share_group: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InverseModel {
    pub factors: Vec<InverseFactor>,
    /// Latent order x_1..x_N the inversion was computed from.
    pub source_order: Vec<usize>,
    /// Inverse parent sets of observed nodes. Only used for dependence checks.
    pub observed_parents: Vec<(usize, Vec<usize>)>,
}

fn latent_ancestors(model: &GraphModel, v: usize) -> BTreeSet<usize> {
    let mut seen = BTreeSet::new();
    let mut stack: Vec<usize> = model.node(v).parents.clone();
    while let Some(p) = stack.pop() {
        if seen.insert(p) {
            stack.extend(model.node(p).parents.iter().copied());
        }
    }
    seen.retain(|&a| model.node(a).is_latent());
    seen
}

/// Inverts the dependency graph: processing latents from last to first,
/// each receives the part of its Markov blanket that comes later in the
/// ordering or is observed.
pub fn build_inverse(model: &GraphModel, latent_order: &[usize]) -> Result<InverseModel, InverseError> {
    let latents = model.latents();
    let mut pos = vec![usize::MAX; model.len()];
    for (k, &v) in latent_order.iter().enumerate() {
        if v >= model.len() || !model.node(v).is_latent() {
            return Err(InverseError::InvalidOrder(format!("index {v} is not a latent variable")));
        }
        if pos[v] != usize::MAX {
            return Err(InverseError::InvalidOrder(format!("{} appears twice", model.id(v))));
        }
        pos[v] = k;
    }
    if latent_order.len() != latents.len() {
        return Err(InverseError::InvalidOrder(format!(
            "order lists {} latents, model has {}",
            latent_order.len(),
            latents.len()
        )));
    }
    for &v in latent_order {
        if let Some(a) = latent_ancestors(model, v).into_iter().find(|&a| pos[a] > pos[v]) {
            return Err(InverseError::InvalidOrder(format!(
                "{} is an ancestor of {} but comes after it",
                model.id(a),
                model.id(v)
            )));
        }
    }

    let observed = model.observed();
    let dag = model.dag();
    let mut factors = Vec::with_capacity(latent_order.len());
    for (k, &v) in latent_order.iter().enumerate().rev() {
        let mb = dag.markov_blanket(v);
        let mut conditioners: Vec<usize> =
            latent_order[k + 1..].iter().copied().filter(|u| mb.contains(u)).collect();
        conditioners.extend(observed.iter().copied().filter(|u| mb.contains(u)));
        factors.push(InverseFactor { targets: vec![v], conditioners, share_group: None });
    }

    let observed_parents = observed
        .iter()
        .enumerate()
        .map(|(j, &y)| {
            let mb = dag.markov_blanket(y);
            (y, observed[j + 1..].iter().copied().filter(|u| mb.contains(u)).collect())
        })
        .collect();

    Ok(InverseModel { factors, source_order: latent_order.to_vec(), observed_parents })
}

/// Inverts using the declaration-order topological sort of the latents.
pub fn build_default_inverse(model: &GraphModel) -> Result<InverseModel, InverseError> {
    build_inverse(model, &model.latents())
}

/// Merges runs of consecutive factors whose later targets condition on every
/// earlier block member and otherwise share exactly the same conditioners.
pub fn group_joint_blocks(inv: &InverseModel) -> InverseModel {
    let mut out: Vec<InverseFactor> = Vec::with_capacity(inv.factors.len());
    for f in &inv.factors {
        if let Some(block) = out.last_mut() {
            let conds: BTreeSet<usize> = f.conditioners.iter().copied().collect();
            let covers_block = block.targets.iter().all(|t| conds.contains(t));
            let residual: BTreeSet<usize> =
                conds.iter().copied().filter(|c| !block.targets.contains(c)).collect();
            let block_residual: BTreeSet<usize> = block.conditioners.iter().copied().collect();
            if covers_block && residual == block_residual && block.share_group == f.share_group {
                block.targets.extend(f.targets.iter().copied());
                continue;
            }
        }
        out.push(f.clone());
    }
    InverseModel { factors: out, ..inv.clone() }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum CondKey {
    Plate(String, Family, i64),
    Global(VariableId),
}

/// Tags factors made of plate instances with a group shared by every factor
/// of identical local structure. Non-plate factors are left untagged.
pub fn assign_share_groups(inv: &InverseModel, model: &GraphModel) -> InverseModel {
    type Signature = (String, Vec<(String, Family)>, Vec<CondKey>);
    let mut seen: BTreeMap<String, Vec<Signature>> = BTreeMap::new();
    let mut factors = inv.factors.clone();
    for f in &mut factors {
        f.share_group = None;
        let Some(plate) = f.targets.first().and_then(|&t| model.plate_of(t)) else { continue };
        let anchor = model.id(f.targets[0]).plate_index.unwrap_or(0) as i64;
        let same_plate = f.targets.iter().all(|&t| {
            model.plate_of(t).map(|p| p.name == plate.name).unwrap_or(false)
                && model.id(t).plate_index == Some(anchor as usize)
        });
        if !same_plate {
            continue;
        }
        let targets = f
            .targets
            .iter()
            .map(|&t| (model.id(t).name.clone(), model.node(t).dist.family()))
            .collect();
        let conds = f
            .conditioners
            .iter()
            .map(|&c| match (model.plate_of(c), model.id(c).plate_index) {
                (Some(p), Some(i)) if p.name == plate.name => {
                    CondKey::Plate(model.id(c).name.clone(), model.node(c).dist.family(), i as i64 - anchor)
                }
                _ => CondKey::Global(model.id(c).clone()),
            })
            .collect();
        let sig: Signature = (plate.name.clone(), targets, conds);
        let known = seen.entry(plate.name.clone()).or_default();
        let k = match known.iter().position(|s| *s == sig) {
            Some(k) => k,
            None => {
                known.push(sig);
                known.len() - 1
            }
        };
        f.share_group = Some(format!("{}#{}", plate.name, k));
    }
    InverseModel { factors, ..inv.clone() }
}

/// Result of comparing conditional independences between a model and its inverse.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DependenceReport {
    pub holds: bool,
    pub checked: usize,
    pub exhaustive: bool,
    /// A pair separated by the set in the inverse graph but not in the original.
    pub counterexample: Option<(VariableId, VariableId, Vec<VariableId>)>,
}

impl std::fmt::Display for DependenceReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.counterexample {
            None => write!(f, "dependence preserved ({} queries)", self.checked),
            Some((a, b, c)) => {
                let c: Vec<String> = c.iter().map(ToString::to_string).collect();
                write!(
                    f,
                    "{a} and {b} are separated by {{{}}} in the inverse graph but dependent in the original",
                    c.join(", ")
                )
            }
        }
    }
}

impl InverseModel {
    /// Assembles an inverse model from explicit factors, checking coverage and
    /// conditioner availability.
    pub fn from_factors(
        model: &GraphModel,
        factors: Vec<InverseFactor>,
        source_order: Vec<usize>,
    ) -> Result<Self, InverseError> {
        let inv = InverseModel { factors, source_order, observed_parents: Vec::new() };
        inv.validate(model)?;
        Ok(inv)
    }

    pub fn validate(&self, model: &GraphModel) -> Result<(), InverseError> {
        let mut covered = vec![false; model.len()];
        for (k, f) in self.factors.iter().enumerate() {
            if f.targets.is_empty() {
                return Err(InverseError::Malformed(format!("factor {k} has no targets")));
            }
            for &t in &f.targets {
                if !model.node(t).is_latent() {
                    return Err(InverseError::Malformed(format!("{} is observed but a target", model.id(t))));
                }
                if f.conditioners.contains(&t) {
                    return Err(InverseError::Malformed(format!("{} both target and conditioner", model.id(t))));
                }
            }
            for &c in &f.conditioners {
                if model.node(c).is_latent() && !covered[c] {
                    return Err(InverseError::Malformed(format!(
                        "conditioner {} of factor {k} is not sampled by an earlier factor",
                        model.id(c)
                    )));
                }
            }
            for &t in &f.targets {
                if covered[t] {
                    return Err(InverseError::Malformed(format!("{} appears in two factors", model.id(t))));
                }
                covered[t] = true;
            }
        }
        if let Some(v) = model.latents().into_iter().find(|&v| !covered[v]) {
            return Err(InverseError::Malformed(format!("latent {} is not covered", model.id(v))));
        }
        Ok(())
    }

    /// Index of the factor generating each latent.
    pub fn factor_of(&self, model_len: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; model_len];
        for (k, f) in self.factors.iter().enumerate() {
            for &t in &f.targets {
                out[t] = Some(k);
            }
        }
        out
    }

    /// The inverse graph over all model nodes. Targets inside a block depend
    /// autoregressively on the block members listed before them.
    pub fn graph(&self, model: &GraphModel) -> Dag {
        let mut parents = vec![Vec::new(); model.len()];
        for f in &self.factors {
            for (k, &t) in f.targets.iter().enumerate() {
                let mut ps = f.conditioners.clone();
                ps.extend_from_slice(&f.targets[..k]);
                parents[t] = ps;
            }
        }
        for (y, ps) in &self.observed_parents {
            parents[*y] = ps.clone();
        }
        Dag::from_parents(parents)
    }

    /// Network groups: one entry per share group (in first-appearance order)
    /// and one per ungrouped factor.
    pub fn network_groups(&self) -> Vec<(String, Vec<usize>)> {
        let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
        for (k, f) in self.factors.iter().enumerate() {
            match &f.share_group {
                Some(g) => match groups.iter_mut().find(|(name, _)| name == g) {
                    Some((_, members)) => members.push(k),
                    None => groups.push((g.clone(), vec![k])),
                },
                None => groups.push((format!("factor{k}"), vec![k])),
            }
        }
        groups
    }

    pub fn describe(&self, model: &GraphModel) -> String {
        let names = |ix: &[usize]| ix.iter().map(|&i| model.id(i).to_string()).collect::<Vec<_>>().join(", ");
        let mut s = String::new();
        let _ = writeln!(s, "model: {}", model.name());
        let _ = writeln!(s, "source order: {}", names(&self.source_order));
        let _ = writeln!(s, "factors: {}", self.factors.len());
        for (k, f) in self.factors.iter().enumerate() {
            let _ = writeln!(
                s,
                "  [{k}] targets ({}) | conditioners ({}) | share group {}",
                names(&f.targets),
                names(&f.conditioners),
                f.share_group.as_deref().unwrap_or("-")
            );
        }
        s
    }
}

/// Checks that every d-separation in the inverse graph also holds in the
/// original. Enumerates all pairs and conditioning sets for models with at
/// most `EXHAUSTIVE_LIMIT` nodes, otherwise samples `trials` random queries.
pub fn check_proposition_1(model: &GraphModel, inv: &InverseModel, trials: usize) -> DependenceReport {
    const EXHAUSTIVE_LIMIT: usize = 14;
    let original = model.dag();
    let inverse = inv.graph(model);
    let n = model.len();
    let mut checked = 0;
    let mut test = |a: usize, b: usize, c: &[usize]| -> Option<(VariableId, VariableId, Vec<VariableId>)> {
        checked += 1;
        if inverse.d_separated(&[a], &[b], c) && !original.d_separated(&[a], &[b], c) {
            Some((model.id(a).clone(), model.id(b).clone(), c.iter().map(|&v| model.id(v).clone()).collect()))
        } else {
            None
        }
    };
    let exhaustive = n <= EXHAUSTIVE_LIMIT;
    let mut counterexample = None;
    if exhaustive {
        // pairwise separation for every set suffices: sets are separated iff all member pairs are
        'outer: for a in 0..n {
            for b in a + 1..n {
                let rest: Vec<usize> = (0..n).filter(|&v| v != a && v != b).collect();
                for mask in 0u32..(1u32 << rest.len()) {
                    let c: Vec<usize> =
                        rest.iter().enumerate().filter(|(k, _)| mask >> k & 1 == 1).map(|(_, &v)| v).collect();
                    if let Some(ce) = test(a, b, &c) {
                        counterexample = Some(ce);
                        break 'outer;
                    }
                }
            }
        }
    } else if n >= 2 {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_1_2);
        for _ in 0..trials {
            let a = rng.random_range(0..n);
            let mut b = rng.random_range(0..n - 1);
            if b >= a {
                b += 1;
            }
            let c: Vec<usize> = (0..n).filter(|&v| v != a && v != b && rng.random_bool(0.3)).collect();
            if let Some(ce) = test(a, b, &c) {
                counterexample = Some(ce);
                break;
            }
        }
    }
    DependenceReport { holds: counterexample.is_none(), checked, exhaustive, counterexample }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Distribution, DistributionSpec, Role};

    fn gauss() -> DistributionSpec {
        DistributionSpec::fixed(Distribution::Gaussian { mean: 0.0, variance: 1.0 })
    }

    #[test]
    fn single_latent_single_child() {
        let m = GraphModel::builder("one")
            .node("x", Role::Latent, vec![], gauss())
            .node("y", Role::Observed, vec!["x".into()], gauss())
            .build()
            .unwrap();
        let inv = build_default_inverse(&m).unwrap();
        assert_eq!(inv.factors, vec![InverseFactor { targets: vec![0], conditioners: vec![1], share_group: None }]);
        assert!(check_proposition_1(&m, &inv, 0).holds);
    }

    #[test]
    fn order_must_respect_ancestry() {
        let m = GraphModel::builder("ab")
            .node("a", Role::Latent, vec![], gauss())
            .node("b", Role::Latent, vec!["a".into()], gauss())
            .build()
            .unwrap();
        assert!(matches!(build_inverse(&m, &[1, 0]), Err(InverseError::InvalidOrder(_))));
        assert!(matches!(build_inverse(&m, &[0]), Err(InverseError::InvalidOrder(_))));
        assert!(build_inverse(&m, &[0, 1]).is_ok());
    }

    #[test]
    fn independent_factors_are_not_merged() {
        let m = GraphModel::builder("ind")
            .node("a", Role::Latent, vec![], gauss())
            .node("b", Role::Latent, vec![], gauss())
            .node("ya", Role::Observed, vec!["a".into()], gauss())
            .node("yb", Role::Observed, vec!["b".into()], gauss())
            .build()
            .unwrap();
        let inv = build_default_inverse(&m).unwrap();
        assert_eq!(group_joint_blocks(&inv), inv);
        assert_eq!(assign_share_groups(&inv, &m).factors.iter().filter(|f| f.share_group.is_some()).count(), 0);
    }

    #[test]
    fn dropped_collider_edge_is_detected() {
        // a -> c <- b with c observed: a and b must stay dependent given c
        let m = GraphModel::builder("col")
            .node("a", Role::Latent, vec![], gauss())
            .node("b", Role::Latent, vec![], gauss())
            .node("c", Role::Observed, vec!["a".into(), "b".into()], gauss())
            .build()
            .unwrap();
        let inv = build_default_inverse(&m).unwrap();
        assert!(check_proposition_1(&m, &inv, 0).holds);
        let mut broken = inv.clone();
        let f = broken.factors.iter_mut().find(|f| f.targets == [0]).unwrap();
        f.conditioners.retain(|&c| c != 1);
        let report = check_proposition_1(&m, &broken, 0);
        assert!(!report.holds);
        let (x, y, _) = report.counterexample.unwrap();
        assert_eq!((x.name.as_str(), y.name.as_str()), ("a", "b"));
    }

    #[test]
    fn from_factors_rejects_unavailable_conditioner() {
        let m = GraphModel::builder("ab")
            .node("a", Role::Latent, vec![], gauss())
            .node("b", Role::Latent, vec!["a".into()], gauss())
            .build()
            .unwrap();
        let bad = vec![
            InverseFactor { targets: vec![0], conditioners: vec![1], share_group: None },
            InverseFactor { targets: vec![1], conditioners: vec![], share_group: None },
        ];
        assert!(InverseModel::from_factors(&m, bad, vec![0, 1]).is_err());
        let missing = vec![InverseFactor { targets: vec![1], conditioners: vec![], share_group: None }];
        assert!(InverseModel::from_factors(&m, missing, vec![0, 1]).is_err());
    }
}
