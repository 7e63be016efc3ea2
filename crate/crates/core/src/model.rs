//! The embedding network: a fully connected tower with ReLU hidden layers,
//! inverted dropout after every hidden layer and a linear output. Triplets
//! are scored by their squared-distance margin and trained with the
//! exponential triplet loss, using hand-written backpropagation and Adam.

use std::cmp::Ordering;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::FeatureTable;
use crate::linalg::{squared_distance, Matrix};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("object index {index} out of range for {n} objects")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("triplet ({i}, {j}, {k}) does not have three distinct objects")]
    DegenerateTriplet { i: usize, j: usize, k: usize },
    #[error("dropout probability {0} outside [0, 1)")]
    InvalidDropout(f64),
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("retrieval gallery is empty")]
    EmptyGallery,
    #[error("query {0} is part of the gallery")]
    QueryInGallery(usize),
    #[error("parameter shapes do not match optimizer state")]
    ShapeMismatch,
}

/// "`i` is closer to `j` than to `k`."
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triplet {
    pub i: usize,
    pub j: usize,
    pub k: usize,
}

impl Triplet {
    pub fn new(i: usize, j: usize, k: usize) -> Result<Self, ModelError> {
        if i == j || i == k || j == k {
            return Err(ModelError::DegenerateTriplet { i, j, k });
        }
        Ok(Self { i, j, k })
    }

    /// The opposite ordering `ikj`.
    pub fn swapped(self) -> Self {
        Self { i: self.i, j: self.k, k: self.j }
    }

    /// Ordering-free form of the query, with `j < k`.
    pub fn canonical(self) -> Self {
        if self.j < self.k {
            self
        } else {
            self.swapped()
        }
    }

    pub fn check_bounds(&self, n: usize) -> Result<(), ModelError> {
        for index in [self.i, self.j, self.k] {
            if index >= n {
                return Err(ModelError::IndexOutOfRange { index, n });
            }
        }
        if self.i == self.j || self.i == self.k || self.j == self.k {
            return Err(ModelError::DegenerateTriplet { i: self.i, j: self.j, k: self.k });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - z.tanh().powi(2),
            Activation::Identity => 1.0,
        }
    }
}

/// Weights and biases of the tower. `weights[l]` maps layer `l` to layer
/// `l + 1` and has shape `layer_sizes[l + 1] × layer_sizes[l]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingParams {
    layer_sizes: Vec<usize>,
    weights: Vec<Matrix>,
    biases: Vec<Vec<f64>>,
    activation: Activation,
}

impl EmbeddingParams {
    pub fn zeros(layer_sizes: &[usize], activation: Activation) -> Result<Self, ModelError> {
        check_layer_sizes(layer_sizes)?;
        let weights = layer_sizes.windows(2).map(|w| Matrix::zeros(w[1], w[0])).collect();
        let biases = layer_sizes[1..].iter().map(|&n| vec![0.0; n]).collect();
        Ok(Self { layer_sizes: layer_sizes.to_vec(), weights, biases, activation })
    }

    /// He-uniform weights (limit `sqrt(6 / fan_in)`), zero biases.
    pub fn he_uniform(layer_sizes: &[usize], activation: Activation, seed: u64) -> Result<Self, ModelError> {
        let mut params = Self::zeros(layer_sizes, activation)?;
        let mut rng = rng::rng_from(seed);
        for w in &mut params.weights {
            let limit = (6.0 / w.cols() as f64).sqrt();
            w.as_mut_slice().iter_mut().for_each(|x| *x = rng.random_range(-limit..limit));
        }
        Ok(params)
    }

    pub fn from_parts(
        layer_sizes: Vec<usize>,
        weights: Vec<Matrix>,
        biases: Vec<Vec<f64>>,
        activation: Activation,
    ) -> Result<Self, ModelError> {
        check_layer_sizes(&layer_sizes)?;
        if weights.len() != layer_sizes.len() - 1 || biases.len() != weights.len() {
            return Err(ModelError::InvalidArchitecture("layer count mismatch".into()));
        }
        for (l, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.rows() != layer_sizes[l + 1] || w.cols() != layer_sizes[l] || b.len() != layer_sizes[l + 1] {
                return Err(ModelError::InvalidArchitecture(format!("layer {l} has the wrong shape")));
            }
            if b.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::InvalidArchitecture(format!("layer {l} has non-finite biases")));
            }
        }
        Ok(Self { layer_sizes, weights, biases, activation })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated non-empty")
    }

    /// Widths of the layers that carry dropout.
    pub fn hidden_widths(&self) -> &[usize] {
        &self.layer_sizes[1..self.layer_sizes.len() - 1]
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.rows() * w.cols()).sum::<usize>() + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.layer_sizes, self.activation).expect("shape already validated")
    }

    /// Every parameter in a fixed order: per layer, weights then biases.
    pub fn values(&self) -> impl Iterator<Item = &f64> + '_ {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| w.as_slice().iter().chain(b.iter()))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| w.as_mut_slice().iter_mut().chain(b.iter_mut()))
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.layer_sizes == other.layer_sizes
    }

    pub fn forward(&self, x: &[f64], plan: Option<&DropoutPlan>) -> Result<Vec<f64>, ModelError> {
        self.check_input(x, plan)?;
        Ok(self.trace(x, plan).output)
    }

    fn check_input(&self, x: &[f64], plan: Option<&DropoutPlan>) -> Result<(), ModelError> {
        if x.len() != self.input_dim() {
            return Err(ModelError::DimensionMismatch { expected: self.input_dim(), actual: x.len() });
        }
        self.check_plan(plan)
    }

    fn check_plan(&self, plan: Option<&DropoutPlan>) -> Result<(), ModelError> {
        if let Some(plan) = plan {
            let widths: Vec<usize> = plan.masks.iter().map(Vec::len).collect();
            if widths != self.hidden_widths() {
                return Err(ModelError::InvalidArchitecture("dropout plan does not match hidden widths".into()));
            }
        }
        Ok(())
    }

    fn trace(&self, x: &[f64], plan: Option<&DropoutPlan>) -> Trace {
        let layers = self.weights.len();
        let mut inputs = Vec::with_capacity(layers);
        let mut pre = Vec::with_capacity(layers - 1);
        let mut a = x.to_vec();
        for l in 0..layers {
            let w = &self.weights[l];
            let z: Vec<f64> = (0..w.rows())
                .map(|r| w.row(r).iter().zip(&a).map(|(wi, ai)| wi * ai).sum::<f64>() + self.biases[l][r])
                .collect();
            inputs.push(std::mem::take(&mut a));
            if l + 1 == layers {
                return Trace { inputs, pre, output: z };
            }
            a = z.iter().map(|&v| self.activation.apply(v)).collect();
            if let Some(plan) = plan {
                let scale = plan.keep_scale();
                for (v, &keep) in a.iter_mut().zip(&plan.masks[l]) {
                    *v = if keep { *v * scale } else { 0.0 };
                }
            }
            pre.push(z);
        }
        unreachable!("validated at least one layer")
    }

    /// Accumulates `∂loss/∂params` into `grad` given `∂loss/∂output`.
    fn backward(&self, trace: &Trace, plan: Option<&DropoutPlan>, g_out: &[f64], grad: &mut EmbeddingParams) {
        let layers = self.weights.len();
        let mut g = g_out.to_vec();
        for l in (0..layers).rev() {
            if l + 1 < layers {
                let scale = plan.map_or(1.0, DropoutPlan::keep_scale);
                for (u, gu) in g.iter_mut().enumerate() {
                    let keep = plan.map_or(1.0, |p| if p.masks[l][u] { scale } else { 0.0 });
                    *gu *= keep * self.activation.derivative(trace.pre[l][u]);
                }
            }
            let input = &trace.inputs[l];
            let gw = &mut grad.weights[l];
            for (r, &gr) in g.iter().enumerate() {
                if gr != 0.0 {
                    gw.row_mut(r).iter_mut().zip(input).for_each(|(w, a)| *w += gr * a);
                }
                grad.biases[l][r] += gr;
            }
            if l > 0 {
                let w = &self.weights[l];
                let mut prev = vec![0.0; w.cols()];
                for (r, &gr) in g.iter().enumerate() {
                    if gr != 0.0 {
                        prev.iter_mut().zip(w.row(r)).for_each(|(p, wi)| *p += gr * wi);
                    }
                }
                g = prev;
            }
        }
    }
}

fn check_layer_sizes(layer_sizes: &[usize]) -> Result<(), ModelError> {
    if layer_sizes.len() < 2 {
        return Err(ModelError::InvalidArchitecture("need at least an input and an output layer".into()));
    }
    if layer_sizes.contains(&0) {
        return Err(ModelError::InvalidArchitecture("zero-width layer".into()));
    }
    Ok(())
}

struct Trace {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    output: Vec<f64>,
}

/// One stochastic sub-network: a keep-mask for each hidden layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropoutPlan {
    probability: f64,
    masks: Vec<Vec<bool>>,
    seed: u64,
}

impl DropoutPlan {
    pub fn sample(hidden_widths: &[usize], probability: f64, seed: u64) -> Result<Self, ModelError> {
        if !(0.0..1.0).contains(&probability) {
            return Err(ModelError::InvalidDropout(probability));
        }
        let mut rng = rng::rng_from(seed);
        let masks = hidden_widths
            .iter()
            .map(|&w| (0..w).map(|_| rng.random::<f64>() >= probability).collect())
            .collect();
        Ok(Self { probability, masks, seed })
    }

    pub fn for_params(params: &EmbeddingParams, probability: f64, seed: u64) -> Result<Self, ModelError> {
        Self::sample(params.hidden_widths(), probability, seed)
    }

    pub fn probability(&self) -> f64 {
        self.probability
    }

    pub fn masks(&self) -> &[Vec<bool>] {
        &self.masks
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn keep_scale(&self) -> f64 {
        1.0 / (1.0 - self.probability)
    }
}

/// Embeds every object of the table. Row `o` is `φ(x_o)`.
pub fn embed_all(params: &EmbeddingParams, features: &FeatureTable, plan: Option<&DropoutPlan>) -> Result<Matrix, ModelError> {
    let objects: Vec<usize> = (0..features.n()).collect();
    embed_objects(params, features, &objects, plan)
}

/// Embeds the listed objects; row `r` of the result is `φ(x_{objects[r]})`.
pub fn embed_objects(
    params: &EmbeddingParams,
    features: &FeatureTable,
    objects: &[usize],
    plan: Option<&DropoutPlan>,
) -> Result<Matrix, ModelError> {
    let mut data = Vec::with_capacity(objects.len() * params.output_dim());
    for &o in objects {
        if o >= features.n() {
            return Err(ModelError::IndexOutOfRange { index: o, n: features.n() });
        }
        data.extend(params.forward(features.row(o), plan)?);
    }
    Ok(Matrix::from_vec(objects.len(), params.output_dim(), data).expect("finite by construction"))
}

/// `‖φ(x_i) − φ(x_k)‖² − ‖φ(x_i) − φ(x_j)‖²`; positive when the model agrees
/// with the ordering.
pub fn triplet_margin(
    params: &EmbeddingParams,
    t: Triplet,
    features: &FeatureTable,
    plan: Option<&DropoutPlan>,
) -> Result<f64, ModelError> {
    t.check_bounds(features.n())?;
    let a = params.forward(features.row(t.i), plan)?;
    let b = params.forward(features.row(t.j), plan)?;
    let c = params.forward(features.row(t.k), plan)?;
    Ok(margin_of(&a, &b, &c))
}

pub(crate) fn margin_of(anchor: &[f64], near: &[f64], far: &[f64]) -> f64 {
    squared_distance(anchor, far) - squared_distance(anchor, near)
}

/// Exponential triplet loss `Σ exp(−ξ_t)` and its exact gradient.
pub fn batch_loss_and_grad(
    params: &EmbeddingParams,
    triplets: &[Triplet],
    features: &FeatureTable,
) -> Result<(f64, EmbeddingParams), ModelError> {
    loss_and_grad(params, triplets, features, None)
}

/// Loss and gradient under an optional dropout plan shared by every tower.
/// Each distinct object is forwarded and backpropagated once.
pub fn loss_and_grad(
    params: &EmbeddingParams,
    triplets: &[Triplet],
    features: &FeatureTable,
    plan: Option<&DropoutPlan>,
) -> Result<(f64, EmbeddingParams), ModelError> {
    let n = features.n();
    if features.dim() != params.input_dim() {
        return Err(ModelError::DimensionMismatch { expected: params.input_dim(), actual: features.dim() });
    }
    params.check_plan(plan)?;
    let mut slot_of: Vec<Option<usize>> = vec![None; n];
    let mut traces: Vec<Trace> = Vec::new();
    let mut objects: Vec<usize> = Vec::new();
    for t in triplets {
        t.check_bounds(n)?;
        for o in [t.i, t.j, t.k] {
            if slot_of[o].is_none() {
                slot_of[o] = Some(traces.len());
                traces.push(params.trace(features.row(o), plan));
                objects.push(o);
            }
        }
    }

    let out = params.output_dim();
    let mut g_emb = vec![vec![0.0; out]; traces.len()];
    let mut loss = 0.0;
    for t in triplets {
        let (si, sj, sk) = (slot_of[t.i].unwrap(), slot_of[t.j].unwrap(), slot_of[t.k].unwrap());
        let (a, b, c) = (&traces[si].output, &traces[sj].output, &traces[sk].output);
        let w = (-margin_of(a, b, c)).exp();
        loss += w;
        for d in 0..out {
            let ga = -2.0 * w * (b[d] - c[d]);
            let gb = -2.0 * w * (a[d] - b[d]);
            let gc = 2.0 * w * (a[d] - c[d]);
            g_emb[si][d] += ga;
            g_emb[sj][d] += gb;
            g_emb[sk][d] += gc;
        }
    }

    let mut grad = params.zeros_like();
    for (slot, trace) in traces.iter().enumerate() {
        params.backward(trace, plan, &g_emb[slot], &mut grad);
    }
    Ok((loss, grad))
}

/// Adam moments and hyperparameters, flattened in [`EmbeddingParams::values`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl AdamState {
    pub fn new(params: &EmbeddingParams, learning_rate: f64) -> Self {
        let n = params.param_count();
        Self { learning_rate, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, step: 0, first: vec![0.0; n], second: vec![0.0; n] }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.first
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.second
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut EmbeddingParams, grad: &EmbeddingParams, state: &mut AdamState) -> Result<(), ModelError> {
    if !params.same_shape(grad) || state.first.len() != params.param_count() {
        return Err(ModelError::ShapeMismatch);
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.learning_rate, state.epsilon);
    for ((p, &g), (m, v)) in params.values_mut().zip(grad.values()).zip(state.first.iter_mut().zip(state.second.iter_mut())) {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub sgd_batch: usize,
    pub learning_rate: f64,
    /// Dropout applied while training; one plan per minibatch step.
    pub dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 200, sgd_batch: 500, learning_rate: 1e-4, dropout: 0.02, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSummary {
    pub steps: usize,
    /// Deterministic full-set loss before and after training.
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Runs `epochs` passes of shuffled minibatch Adam from the current
/// parameters and optimizer state.
pub fn train(
    params: &mut EmbeddingParams,
    adam: &mut AdamState,
    triplets: &[Triplet],
    features: &FeatureTable,
    config: &TrainConfig,
) -> Result<TrainSummary, ModelError> {
    if triplets.is_empty() {
        return Ok(TrainSummary { steps: 0, initial_loss: 0.0, final_loss: 0.0 });
    }
    if !(0.0..1.0).contains(&config.dropout) {
        return Err(ModelError::InvalidDropout(config.dropout));
    }
    let initial_loss = loss_and_grad(params, triplets, features, None)?.0;
    if config.epochs == 0 {
        return Ok(TrainSummary { steps: 0, initial_loss, final_loss: initial_loss });
    }
    adam.learning_rate = config.learning_rate;
    let mut rng = rng::rng_from(config.seed);
    let mut order: Vec<usize> = (0..triplets.len()).collect();
    let batch = config.sgd_batch.max(1);
    let mut minibatch = Vec::with_capacity(batch);
    let mut steps = 0;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            minibatch.clear();
            minibatch.extend(chunk.iter().map(|&idx| triplets[idx]));
            let plan = if config.dropout > 0.0 {
                Some(DropoutPlan::for_params(params, config.dropout, rng.random())?)
            } else {
                None
            };
            let (_, grad) = loss_and_grad(params, &minibatch, features, plan.as_ref())?;
            adam_step(params, &grad, adam)?;
            steps += 1;
        }
    }
    let final_loss = loss_and_grad(params, triplets, features, None)?.0;
    Ok(TrainSummary { steps, initial_loss, final_loss })
}

/// Trains a copy of `params` with a fresh optimizer.
pub fn train_fresh(
    params: &EmbeddingParams,
    triplets: &[Triplet],
    features: &FeatureTable,
    config: &TrainConfig,
) -> Result<EmbeddingParams, ModelError> {
    let mut out = params.clone();
    let mut adam = AdamState::new(&out, config.learning_rate);
    train(&mut out, &mut adam, triplets, features, config)?;
    Ok(out)
}

/// Fraction of triplets whose ordering the deterministic model reproduces
/// (margin strictly positive).
pub fn evaluate(params: &EmbeddingParams, triplets: &[Triplet], features: &FeatureTable) -> Result<f64, ModelError> {
    if triplets.is_empty() {
        return Ok(0.0);
    }
    let emb = embed_all(params, features, None)?;
    let mut correct = 0usize;
    for t in triplets {
        t.check_bounds(features.n())?;
        if margin_of(emb.row(t.i), emb.row(t.j), emb.row(t.k)) > 0.0 {
            correct += 1;
        }
    }
    Ok(correct as f64 / triplets.len() as f64)
}

/// Gallery objects ranked by embedding distance to the query (ties by
/// index), truncated to `top_k`.
pub fn retrieve(
    params: &EmbeddingParams,
    query: usize,
    gallery: &[usize],
    features: &FeatureTable,
    top_k: usize,
) -> Result<Vec<usize>, ModelError> {
    if gallery.is_empty() {
        return Err(ModelError::EmptyGallery);
    }
    if gallery.contains(&query) {
        return Err(ModelError::QueryInGallery(query));
    }
    let mut objects = Vec::with_capacity(gallery.len() + 1);
    objects.push(query);
    objects.extend_from_slice(gallery);
    let emb = embed_objects(params, features, &objects, None)?;
    let mut ranked: Vec<(f64, usize)> =
        gallery.iter().enumerate().map(|(r, &g)| (squared_distance(emb.row(0), emb.row(r + 1)), g)).collect();
    ranked.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));
    Ok(ranked.into_iter().take(top_k).map(|(_, g)| g).collect())
}
