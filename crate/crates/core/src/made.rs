//! Conditional masked autoregressive density networks.
//!
//! Inputs are laid out as `[conditioners.., targets..]`. Every hidden unit
//! carries a label `m` in `0..N`; a unit labeled `m` sees all conditioners and
//! targets `1..=m`, and the head for target `i` (1-based) only sees units with
//! `m < i`. Head `i` therefore depends on the conditioners and `x_1..x_{i-1}`.
//! Continuous targets get a mixture-of-Gaussians head, binary targets a
//! Bernoulli head.
//!
//! Weights are stored already multiplied by their masks, so every masked
//! entry is exactly zero and stays zero under masked gradient updates.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const DEFAULT_SIGMA_FLOOR: f64 = 1e-3;
pub const FORMAT_NAME: &str = "nsmc-masked-network";
pub const FORMAT_VERSION: u32 = 1;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum MadeError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid network shape: {0}")]
    InvalidShape(String),
    #[error("malformed network file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum HeadKind {
    Mixture { components: usize },
    Bernoulli,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkShape {
    pub n_targets: usize,
    pub n_cond: usize,
    pub hidden_sizes: Vec<usize>,
    pub head: HeadKind,
}

impl NetworkShape {
    pub fn validate(&self) -> Result<(), MadeError> {
        if self.n_targets == 0 {
            return Err(MadeError::InvalidShape("need at least one target".into()));
        }
        if self.hidden_sizes.is_empty() || self.hidden_sizes.contains(&0) {
            return Err(MadeError::InvalidShape("hidden sizes must be nonempty and positive".into()));
        }
        if let HeadKind::Mixture { components: 0 } = self.head {
            return Err(MadeError::InvalidShape("mixture needs at least one component".into()));
        }
        Ok(())
    }

    pub fn outputs_per_target(&self) -> usize {
        match self.head {
            HeadKind::Mixture { components } => 3 * components,
            HeadKind::Bernoulli => 1,
        }
    }

    pub fn n_inputs(&self) -> usize {
        self.n_cond + self.n_targets
    }

    pub fn n_outputs(&self) -> usize {
        self.n_targets * self.outputs_per_target()
    }

    /// (fan_in, fan_out) of every weight layer, output layer last.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_sizes.len() + 1);
        let mut prev = self.n_inputs();
        for &h in &self.hidden_sizes {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.n_outputs()));
        dims
    }
}

/// Hidden-unit labels and the binary connectivity masks derived from them.
/// `masks[l]` has shape (fan_in, fan_out).
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    pub unit_labels: Vec<Vec<usize>>,
    pub masks: Vec<Array2<f64>>,
}

/// Labels hidden units round-robin `0, 1, .., N-1, 0, ..` per layer; with a
/// seed, each layer's labels are shuffled.
pub fn build_masks(shape: &NetworkShape, labeling_seed: Option<u64>) -> MaskSet {
    let n = shape.n_targets;
    let mut rng = labeling_seed.map(ChaCha8Rng::seed_from_u64);
    let unit_labels: Vec<Vec<usize>> = shape
        .hidden_sizes
        .iter()
        .map(|&h| {
            let mut labels: Vec<usize> = (0..h).map(|u| u % n).collect();
            if let Some(rng) = rng.as_mut() {
                labels.shuffle(rng);
            }
            labels
        })
        .collect();
    masks_from_labels(shape, unit_labels)
}

pub fn masks_from_labels(shape: &NetworkShape, unit_labels: Vec<Vec<usize>>) -> MaskSet {
    let mut masks = Vec::with_capacity(unit_labels.len() + 1);
    let first = &unit_labels[0];
    masks.push(Array2::from_shape_fn((shape.n_inputs(), first.len()), |(i, u)| {
        if i < shape.n_cond || i - shape.n_cond + 1 <= first[u] {
            1.0
        } else {
            0.0
        }
    }));
    for w in unit_labels.windows(2) {
        let (prev, next) = (&w[0], &w[1]);
        masks.push(Array2::from_shape_fn((prev.len(), next.len()), |(u, v)| {
            if prev[u] <= next[v] {
                1.0
            } else {
                0.0
            }
        }));
    }
    let last = unit_labels.last().expect("at least one hidden layer");
    let per = shape.outputs_per_target();
    masks.push(Array2::from_shape_fn((last.len(), shape.n_outputs()), |(u, o)| {
        if last[u] < o / per + 1 {
            1.0
        } else {
            0.0
        }
    }));
    MaskSet { unit_labels, masks }
}

/// `normalized = (raw - shift) / scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub shift: f64,
    pub scale: f64,
}

impl Affine {
    pub const IDENTITY: Affine = Affine { shift: 0.0, scale: 1.0 };

    pub fn fit(values: impl Iterator<Item = f64>) -> Affine {
        let (mut n, mut mean, mut m2) = (0.0f64, 0.0f64, 0.0f64);
        for x in values {
            n += 1.0;
            let d = x - mean;
            mean += d / n;
            m2 += d * (x - mean);
        }
        if n == 0.0 || !mean.is_finite() {
            return Affine::IDENTITY;
        }
        let sd = (m2 / n).sqrt();
        Affine { shift: mean, scale: if sd.is_finite() && sd > 1e-8 { sd } else { 1.0 } }
    }

    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        (x - self.shift) / self.scale
    }

    #[inline]
    pub fn invert(&self, z: f64) -> f64 {
        self.shift + self.scale * z
    }
}

/// Per-target mixture parameters in raw target units.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureParams {
    pub weights: Vec<Vec<f64>>,
    pub means: Vec<Vec<f64>>,
    pub stdevs: Vec<Vec<f64>>,
}

impl MixtureParams {
    pub fn mean(&self, i: usize) -> f64 {
        self.weights[i].iter().zip(&self.means[i]).map(|(a, m)| a * m).sum()
    }

    pub fn stdev(&self, i: usize) -> f64 {
        let mu = self.mean(i);
        let second: f64 = self.weights[i]
            .iter()
            .zip(&self.means[i])
            .zip(&self.stdevs[i])
            .map(|((a, m), s)| a * (s * s + m * m))
            .sum();
        (second - mu * mu).max(0.0).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum HeadParams {
    Mixture(MixtureParams),
    Bernoulli(Vec<f64>),
}

/// Gradients of the mean negative log density with respect to every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    /// Mean negative log density at which the gradients were taken.
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedNetwork {
    shape: NetworkShape,
    masks: MaskSet,
    pub(crate) weights: Vec<Array2<f64>>,
    pub(crate) biases: Vec<Array1<f64>>,
    cond_norm: Vec<Affine>,
    target_norm: Vec<Affine>,
    sigma_floor: f64,
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(sigmoid(x)), stable for large |x|.
#[inline]
fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

struct ForwardCache {
    /// activations[0] is the normalized input; activations[l+1] the output of hidden layer l
    activations: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl MaskedNetwork {
    /// Glorot-uniform weights (masked), zero biases, and mixture mean biases
    /// spread evenly over [-2, 2].
    pub fn new(shape: NetworkShape, labeling_seed: Option<u64>, init_seed: u64) -> Result<Self, MadeError> {
        shape.validate()?;
        let masks = build_masks(&shape, labeling_seed);
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (l, &(fan_in, fan_out)) in shape.layer_dims().iter().enumerate() {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-limit..limit));
            weights.push(w * &masks.masks[l]);
            biases.push(Array1::zeros(fan_out));
        }
        if let HeadKind::Mixture { components } = shape.head {
            let out = biases.last_mut().expect("output layer");
            for i in 0..shape.n_targets {
                for d in 0..components {
                    let spread = if components == 1 { 0.0 } else { -2.0 + 4.0 * d as f64 / (components - 1) as f64 };
                    out[i * 3 * components + components + d] = spread;
                }
            }
        }
        Ok(Self {
            cond_norm: vec![Affine::IDENTITY; shape.n_cond],
            target_norm: vec![Affine::IDENTITY; shape.n_targets],
            shape,
            masks,
            weights,
            biases,
            sigma_floor: DEFAULT_SIGMA_FLOOR,
        })
    }

    /// A network whose weights and biases are all zero.
    pub fn zeros(shape: NetworkShape) -> Result<Self, MadeError> {
        let mut net = Self::new(shape, None, 0)?;
        net.weights.iter_mut().for_each(|w| w.fill(0.0));
        net.biases.iter_mut().for_each(|b| b.fill(0.0));
        Ok(net)
    }

    pub fn shape(&self) -> &NetworkShape {
        &self.shape
    }

    pub fn masks(&self) -> &MaskSet {
        &self.masks
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    pub fn sigma_floor(&self) -> f64 {
        self.sigma_floor
    }

    pub fn set_sigma_floor(&mut self, floor: f64) {
        self.sigma_floor = floor;
    }

    pub fn cond_norm(&self) -> &[Affine] {
        &self.cond_norm
    }

    pub fn target_norm(&self) -> &[Affine] {
        &self.target_norm
    }

    pub fn set_normalization(&mut self, cond: Vec<Affine>, targets: Vec<Affine>) -> Result<(), MadeError> {
        if cond.len() != self.shape.n_cond || targets.len() != self.shape.n_targets {
            return Err(MadeError::DimensionMismatch("normalization length".into()));
        }
        self.cond_norm = cond;
        self.target_norm = targets;
        Ok(())
    }

    /// Sets a weight entry, keeping masked positions at zero.
    pub fn set_weight(&mut self, layer: usize, row: usize, col: usize, value: f64) {
        self.weights[layer][[row, col]] = value * self.masks.masks[layer][[row, col]];
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut Array1<f64> {
        &mut self.biases[layer]
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Flat mutable views over every parameter tensor: weights then biases.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for w in &mut self.weights {
            out.push(w.as_slice_mut().expect("standard layout"));
        }
        for b in &mut self.biases {
            out.push(b.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        self.weights.iter().map(|w| w.len()).chain(self.biases.iter().map(|b| b.len())).collect()
    }

    fn check_batch(&self, cond: ArrayView2<f64>, targets: ArrayView2<f64>) -> Result<(), MadeError> {
        if cond.ncols() != self.shape.n_cond {
            return Err(MadeError::DimensionMismatch(format!(
                "expected {} conditioning inputs, got {}",
                self.shape.n_cond,
                cond.ncols()
            )));
        }
        if targets.ncols() != self.shape.n_targets {
            return Err(MadeError::DimensionMismatch(format!(
                "expected {} targets, got {}",
                self.shape.n_targets,
                targets.ncols()
            )));
        }
        if cond.nrows() != targets.nrows() {
            return Err(MadeError::DimensionMismatch("conditioner and target row counts differ".into()));
        }
        Ok(())
    }

    fn normalized_inputs(&self, cond: ArrayView2<f64>, targets: ArrayView2<f64>) -> Array2<f64> {
        let nc = self.shape.n_cond;
        let mut x = Array2::zeros((cond.nrows(), self.shape.n_inputs()));
        for (r, mut row) in x.outer_iter_mut().enumerate() {
            for j in 0..nc {
                row[j] = self.cond_norm[j].apply(cond[[r, j]]);
            }
            for j in 0..self.shape.n_targets {
                row[nc + j] = self.target_norm[j].apply(targets[[r, j]]);
            }
        }
        x
    }

    fn run(&self, input: Array2<f64>) -> ForwardCache {
        let n_hidden = self.shape.hidden_sizes.len();
        let mut activations = Vec::with_capacity(n_hidden + 1);
        activations.push(input);
        for l in 0..n_hidden {
            let mut h = activations[l].dot(&self.weights[l]);
            h += &self.biases[l];
            h.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
            activations.push(h);
        }
        let mut output = activations[n_hidden].dot(&self.weights[n_hidden]);
        output += &self.biases[n_hidden];
        ForwardCache { activations, output }
    }

    /// Normalized-space mixture parameters of target `i` from one output row:
    /// (log weights, means, stdevs, d stdev / d raw).
    fn mixture_head(&self, out: &[f64], i: usize, d: usize, log_w: &mut [f64], mu: &mut [f64], sd: &mut [f64], dsd: &mut [f64]) {
        let base = i * 3 * d;
        let logits = &out[base..base + d];
        let lse = log_sum_exp(logits);
        for k in 0..d {
            log_w[k] = logits[k] - lse;
            mu[k] = out[base + d + k];
            let raw = out[base + 2 * d + k];
            let s = softplus(raw);
            if s > self.sigma_floor {
                sd[k] = s;
                dsd[k] = sigmoid(raw);
            } else {
                sd[k] = self.sigma_floor;
                dsd[k] = 0.0;
            }
        }
    }

    /// Log density of each row, and optionally d(-log q)/d(output) per row.
    fn head_log_probs(&self, cache: &ForwardCache, targets: ArrayView2<f64>, mut grad: Option<&mut Array2<f64>>) -> Vec<f64> {
        let n = self.shape.n_targets;
        let nc = self.shape.n_cond;
        let mut lps = Vec::with_capacity(targets.nrows());
        match self.shape.head {
            HeadKind::Mixture { components: d } => {
                let (mut lw, mut mu, mut sd, mut dsd, mut terms) =
                    (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
                for r in 0..targets.nrows() {
                    let out = cache.output.row(r);
                    let out = out.as_slice().expect("contiguous output row");
                    let mut total = 0.0;
                    for i in 0..n {
                        self.mixture_head(out, i, d, &mut lw, &mut mu, &mut sd, &mut dsd);
                        let z = cache.activations[0][[r, nc + i]];
                        for k in 0..d {
                            let u = (z - mu[k]) / sd[k];
                            terms[k] = lw[k] - 0.5 * LN_2PI - sd[k].ln() - 0.5 * u * u;
                        }
                        let lse = log_sum_exp(&terms);
                        total += lse - self.target_norm[i].scale.ln();
                        if let Some(g) = grad.as_deref_mut() {
                            let base = i * 3 * d;
                            for k in 0..d {
                                let resp = (terms[k] - lse).exp();
                                let u = (z - mu[k]) / sd[k];
                                g[[r, base + k]] = lw[k].exp() - resp;
                                g[[r, base + d + k]] = -resp * u / sd[k];
                                g[[r, base + 2 * d + k]] = resp * (1.0 - u * u) / sd[k] * dsd[k];
                            }
                        }
                    }
                    lps.push(total);
                }
            }
            HeadKind::Bernoulli => {
                for r in 0..targets.nrows() {
                    let mut total = 0.0;
                    for i in 0..n {
                        let logit = cache.output[[r, i]];
                        let x = targets[[r, i]];
                        total += if x == 1.0 {
                            log_sigmoid(logit)
                        } else if x == 0.0 {
                            log_sigmoid(-logit)
                        } else {
                            f64::NEG_INFINITY
                        };
                        if let Some(g) = grad.as_deref_mut() {
                            g[[r, i]] = sigmoid(logit) - x;
                        }
                    }
                    lps.push(total);
                }
            }
        }
        lps
    }

    fn head_params_row(&self, out: &[f64]) -> HeadParams {
        let n = self.shape.n_targets;
        match self.shape.head {
            HeadKind::Mixture { components: d } => {
                let (mut lw, mut mu, mut sd, mut dsd) = (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
                let mut p = MixtureParams { weights: Vec::new(), means: Vec::new(), stdevs: Vec::new() };
                for i in 0..n {
                    self.mixture_head(out, i, d, &mut lw, &mut mu, &mut sd, &mut dsd);
                    let norm = self.target_norm[i];
                    p.weights.push(lw.iter().map(|l| l.exp()).collect());
                    p.means.push(mu.iter().map(|&m| norm.invert(m)).collect());
                    p.stdevs.push(sd.iter().map(|&s| s * norm.scale).collect());
                }
                HeadParams::Mixture(p)
            }
            HeadKind::Bernoulli => HeadParams::Bernoulli(out[..n].iter().map(|&l| sigmoid(l)).collect()),
        }
    }

    /// Head parameters for one (conditioner, target) row, in raw target units.
    pub fn forward(&self, cond: &[f64], targets: &[f64]) -> Result<HeadParams, MadeError> {
        let c = ArrayView2::from_shape((1, cond.len()), cond).expect("row view");
        let t = ArrayView2::from_shape((1, targets.len()), targets).expect("row view");
        self.check_batch(c, t)?;
        let cache = self.run(self.normalized_inputs(c, t));
        let out = cache.output.row(0).to_vec();
        Ok(self.head_params_row(&out))
    }

    pub fn log_prob(&self, cond: &[f64], targets: &[f64]) -> Result<f64, MadeError> {
        let c = ArrayView2::from_shape((1, cond.len()), cond).expect("row view");
        let t = ArrayView2::from_shape((1, targets.len()), targets).expect("row view");
        Ok(self.log_prob_batch(c, t)?[0])
    }

    pub fn log_prob_batch(&self, cond: ArrayView2<f64>, targets: ArrayView2<f64>) -> Result<Vec<f64>, MadeError> {
        self.check_batch(cond, targets)?;
        let cache = self.run(self.normalized_inputs(cond, targets));
        Ok(self.head_log_probs(&cache, targets, None))
    }

    /// Exact gradient of `-log q` for one row.
    pub fn backward(&self, cond: &[f64], targets: &[f64]) -> Result<GradientSet, MadeError> {
        let c = ArrayView2::from_shape((1, cond.len()), cond).expect("row view");
        let t = ArrayView2::from_shape((1, targets.len()), targets).expect("row view");
        self.backward_batch(c, t)
    }

    /// Gradient of the mean of `-log q` over the rows of a batch.
    pub fn backward_batch(&self, cond: ArrayView2<f64>, targets: ArrayView2<f64>) -> Result<GradientSet, MadeError> {
        self.check_batch(cond, targets)?;
        let rows = cond.nrows();
        if rows == 0 {
            return Err(MadeError::DimensionMismatch("empty batch".into()));
        }
        let cache = self.run(self.normalized_inputs(cond, targets));
        let mut delta = Array2::zeros(cache.output.raw_dim());
        let lps = self.head_log_probs(&cache, targets, Some(&mut delta));
        let inv = 1.0 / rows as f64;
        delta *= inv;
        let value = -lps.iter().sum::<f64>() * inv;

        let n_layers = self.weights.len();
        let mut gw = vec![Array2::zeros((0, 0)); n_layers];
        let mut gb = vec![Array1::zeros(0); n_layers];
        for l in (0..n_layers).rev() {
            let input = &cache.activations[l];
            let g = input.t().dot(&delta) * &self.masks.masks[l];
            gw[l] = if g.is_standard_layout() { g } else { g.as_standard_layout().into_owned() };
            gb[l] = delta.sum_axis(Axis(0));
            if l > 0 {
                let mut back = delta.dot(&self.weights[l].t());
                // relu derivative: activations are exactly zero where the unit was off
                ndarray::Zip::from(&mut back).and(input).for_each(|g, &a| {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                });
                delta = back;
            }
        }
        Ok(GradientSet { weights: gw, biases: gb, value })
    }

    /// Draws one target vector autoregressively and reports its log density.
    pub fn sample<R: Rng + ?Sized>(&self, cond: &[f64], rng: &mut R) -> Result<(Vec<f64>, f64), MadeError> {
        let c = ArrayView2::from_shape((1, cond.len()), cond).expect("row view");
        let mut rngs = [rng];
        let (t, lp) = self.sample_batch(c, &mut rngs)?;
        Ok((t.row(0).to_vec(), lp[0]))
    }

    /// Draws one target vector per conditioner row, row `r` using `rngs[r]`.
    pub fn sample_batch<R: Rng + ?Sized>(
        &self,
        cond: ArrayView2<f64>,
        rngs: &mut [&mut R],
    ) -> Result<(Array2<f64>, Vec<f64>), MadeError> {
        let rows = cond.nrows();
        if rngs.len() != rows {
            return Err(MadeError::DimensionMismatch("one random stream per row required".into()));
        }
        let n = self.shape.n_targets;
        let mut targets = Array2::zeros((rows, n));
        self.check_batch(cond, targets.view())?;
        let d = match self.shape.head {
            HeadKind::Mixture { components } => components,
            HeadKind::Bernoulli => 0,
        };
        let (mut lw, mut mu, mut sd, mut dsd) = (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
        let mut input = self.normalized_inputs(cond, targets.view());
        let nc = self.shape.n_cond;
        for i in 0..n {
            let cache = self.run(input.clone());
            for r in 0..rows {
                let rng = &mut *rngs[r];
                let out = cache.output.row(r);
                let out = out.as_slice().expect("contiguous output row");
                let x = match self.shape.head {
                    HeadKind::Mixture { .. } => {
                        self.mixture_head(out, i, d, &mut lw, &mut mu, &mut sd, &mut dsd);
                        let u: f64 = rng.random();
                        let mut acc = 0.0;
                        let mut k = d - 1;
                        for (j, l) in lw.iter().enumerate() {
                            acc += l.exp();
                            if u < acc {
                                k = j;
                                break;
                            }
                        }
                        let z: f64 = rng.sample(rand_distr::StandardNormal);
                        self.target_norm[i].invert(mu[k] + sd[k] * z)
                    }
                    HeadKind::Bernoulli => {
                        if rng.random::<f64>() < sigmoid(out[i]) {
                            1.0
                        } else {
                            0.0
                        }
                    }
                };
                targets[[r, i]] = x;
                input[[r, nc + i]] = self.target_norm[i].apply(x);
            }
        }
        let lps = self.log_prob_batch(cond, targets.view())?;
        Ok((targets, lps))
    }

    /// Head parameters for target `i` from a batch whose targets before `i` are filled.
    pub fn head_params_batch(&self, cond: ArrayView2<f64>, targets: ArrayView2<f64>) -> Result<Vec<HeadParams>, MadeError> {
        self.check_batch(cond, targets)?;
        let cache = self.run(self.normalized_inputs(cond, targets));
        Ok(cache.output.outer_iter().map(|row| self.head_params_row(&row.to_vec())).collect())
    }

    pub fn to_file(&self) -> NetworkFile {
        NetworkFile {
            format: FORMAT_NAME.to_string(),
            version: FORMAT_VERSION,
            shape: self.shape.clone(),
            sigma_floor: self.sigma_floor,
            labels: self.masks.unit_labels.clone(),
            cond_norm: self.cond_norm.clone(),
            target_norm: self.target_norm.clone(),
            layers: self
                .weights
                .iter()
                .zip(&self.biases)
                .map(|(w, b)| LayerFile {
                    rows: w.nrows(),
                    cols: w.ncols(),
                    weights: w.iter().copied().collect(),
                    bias: b.to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_file(file: NetworkFile) -> Result<Self, MadeError> {
        if file.format != FORMAT_NAME {
            return Err(MadeError::Format(format!("unexpected format tag {:?}", file.format)));
        }
        if file.version != FORMAT_VERSION {
            return Err(MadeError::Format(format!(
                "unsupported network file version {} (supported: {FORMAT_VERSION})",
                file.version
            )));
        }
        file.shape.validate()?;
        let shape = file.shape;
        if file.labels.len() != shape.hidden_sizes.len()
            || file.labels.iter().zip(&shape.hidden_sizes).any(|(l, &h)| l.len() != h)
            || file.labels.iter().flatten().any(|&m| m >= shape.n_targets)
        {
            return Err(MadeError::Format("unit labels do not match hidden sizes".into()));
        }
        if file.cond_norm.len() != shape.n_cond || file.target_norm.len() != shape.n_targets {
            return Err(MadeError::Format("normalization lengths do not match shape".into()));
        }
        let masks = masks_from_labels(&shape, file.labels);
        let dims = shape.layer_dims();
        if file.layers.len() != dims.len() {
            return Err(MadeError::Format("wrong number of layers".into()));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (l, (layer, &(fan_in, fan_out))) in file.layers.into_iter().zip(&dims).enumerate() {
            if layer.rows != fan_in || layer.cols != fan_out || layer.bias.len() != fan_out {
                return Err(MadeError::Format(format!("layer {l} has wrong dimensions")));
            }
            let w = Array2::from_shape_vec((fan_in, fan_out), layer.weights)
                .map_err(|e| MadeError::Format(format!("layer {l}: {e}")))?;
            if w.iter().zip(masks.masks[l].iter()).any(|(&v, &m)| m == 0.0 && v != 0.0) {
                return Err(MadeError::Format(format!("layer {l} has weights at masked positions")));
            }
            weights.push(w);
            biases.push(Array1::from(layer.bias));
        }
        Ok(Self {
            shape,
            masks,
            weights,
            biases,
            cond_norm: file.cond_norm,
            target_norm: file.target_norm,
            sigma_floor: file.sigma_floor,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_file()).expect("network serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, MadeError> {
        let file: NetworkFile = serde_json::from_str(s).map_err(|e| MadeError::Format(e.to_string()))?;
        Self::from_file(file)
    }
}

/// On-disk layout of one network; weights are row-major (fan_in × fan_out).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkFile {
    pub format: String,
    pub version: u32,
    pub shape: NetworkShape,
    pub sigma_floor: f64,
    pub labels: Vec<Vec<usize>>,
    pub cond_norm: Vec<Affine>,
    pub target_norm: Vec<Affine>,
    pub layers: Vec<LayerFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerFile {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Boolean reachability from inputs to outputs through the masks: entry
/// (input, output) is true iff some path connects them.
pub fn reachability(masks: &MaskSet) -> Array2<bool> {
    let mut acc = masks.masks[0].mapv(|m| m != 0.0);
    for m in &masks.masks[1..] {
        let next = m.mapv(|v| v != 0.0);
        let mut out = Array2::from_elem((acc.nrows(), next.ncols()), false);
        for i in 0..acc.nrows() {
            for k in 0..acc.ncols() {
                if acc[[i, k]] {
                    for j in 0..next.ncols() {
                        out[[i, j]] |= next[[k, j]];
                    }
                }
            }
        }
        acc = out;
    }
    acc
}
