#![allow(dead_code)]

use std::collections::BTreeMap;

use nsmc::graph::Assignment;
use nsmc::made::MaskedNetwork;
use nsmc::models::*;
use nsmc::smc::LearnedProposal;
use nsmc::train::{train_all, TrainConfig};

pub fn fhmm_example(c: &FhmmConfig) -> Example {
    build_example("fhmm", &c.to_params()).unwrap()
}

pub fn fhmm_observed(ex: &Example, c: &FhmmConfig, y: &[f64]) -> Assignment {
    let mut a = Assignment::empty(ex.model.len());
    for (t, v) in y.iter().enumerate() {
        a.set(c.y_index(t), *v);
    }
    a
}

pub fn train(ex: &Example, cfg: TrainConfig) -> Vec<MaskedNetwork> {
    train_all(&ex.model, &ex.inverse, &ex.plan, &[cfg], BTreeMap::new()).unwrap().nets
}

pub fn learned<'a>(ex: &'a Example, nets: &[MaskedNetwork]) -> LearnedProposal<'a> {
    LearnedProposal::new(&ex.inverse, ex.plan.clone(), nets.to_vec()).unwrap()
}

/// Sample mean and standard error of the mean.
pub fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, (var / n).sqrt())
}

pub fn params(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}
