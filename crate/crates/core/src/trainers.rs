//! Supervised objectives for the three teachers and a minibatch SGD loop.
//!
//! * pointwise: confidence-weighted binary cross-entropy,
//! * listwise: ListNet cross-entropy against a positional-decay target
//!   built from a scalar list score,
//! * reward: Bradley–Terry loss over pairs of lists.
//!
//! Every loss returns `(value, gradient)` with the gradient taken with
//! respect to the model's flat parameter vector.

use std::borrow::Borrow;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::featurize::{ListFeatures, PairFeatures};
use crate::math::{logsumexp, position_discount, sigmoid, softmax, PROB_FLOOR};
use crate::scorers::{ModelError, RewardModel, ScorerModel};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("confidence weights sum to zero")]
    ZeroWeight,
    #[error("empty list")]
    EmptyList,
    #[error("length mismatch: {0}")]
    Length(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite model output")]
    NonFiniteScore,
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            batch_size: 32,
            epochs: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-position weights `δ_1 ≥ δ_2 ≥ … ≥ δ_k > 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecayProfile(Vec<f64>);

impl DecayProfile {
    pub fn new(values: Vec<f64>) -> Result<Self, TrainError> {
        if values.is_empty() {
            return Err(TrainError::EmptyList);
        }
        if values.iter().any(|v| !(v.is_finite() && *v > 0.0))
            || values.windows(2).any(|w| w[0] < w[1])
        {
            return Err(TrainError::Config(
                "decay must be positive and non-increasing".into(),
            ));
        }
        Ok(Self(values))
    }

    /// `δ_j = 1 / log2(j + 1)`.
    pub fn dcg(k: usize) -> Self {
        Self((1..=k).map(position_discount).collect())
    }

    pub fn uniform(k: usize) -> Self {
        Self(vec![1.0; k])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointwiseExample {
    pub features: PairFeatures,
    pub label: bool,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ListExample {
    /// Features of the exposed list, in exposure order.
    pub features: Vec<PairFeatures>,
    pub list_score: f64,
    pub item_weights: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceExample {
    pub list_a: ListFeatures,
    pub list_b: ListFeatures,
    pub preferred_a: bool,
}

fn finite(x: f64) -> Result<f64, TrainError> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(TrainError::NonFiniteScore)
    }
}

/// Weighted binary cross-entropy, normalized by the total confidence.
pub fn bce_loss<E: Borrow<PointwiseExample>>(
    model: &ScorerModel,
    batch: &[E],
) -> Result<(f64, Vec<f64>), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let z: f64 = batch.iter().map(|e| e.borrow().confidence).sum();
    if z <= 0.0 {
        return Err(TrainError::ZeroWeight);
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; model.param_count()];
    for e in batch {
        let e = e.borrow();
        if e.confidence == 0.0 {
            continue;
        }
        let x = e.features.as_slice();
        let p = sigmoid(finite(model.forward(x)?)?);
        let (l, dl) = if e.label {
            (-p.max(PROB_FLOOR).ln(), if p > PROB_FLOOR { p - 1.0 } else { 0.0 })
        } else {
            let q = 1.0 - p;
            (-q.max(PROB_FLOOR).ln(), if q > PROB_FLOOR { p } else { 0.0 })
        };
        loss += e.confidence * l;
        model.accumulate_grad(x, e.confidence * dl / z, &mut grad)?;
    }
    Ok((loss / z, grad))
}

/// Target distribution `P_true(j) ∝ exp(S · δ_j)`.
pub fn listnet_target(list_score: f64, decay: &DecayProfile) -> Vec<f64> {
    let logits: Vec<f64> = decay.values().iter().map(|d| list_score * d).collect();
    softmax(&logits)
}

/// ListNet cross-entropy for one list, gradient added into `grad`.
fn listnet_accumulate(
    model: &ScorerModel,
    features: &[PairFeatures],
    list_score: f64,
    decay: &DecayProfile,
    item_weights: Option<&[f64]>,
    scale: f64,
    grad: &mut [f64],
) -> Result<f64, TrainError> {
    let k = features.len();
    if k == 0 {
        return Err(TrainError::EmptyList);
    }
    if decay.len() != k {
        return Err(TrainError::Length(format!("decay {} for list {k}", decay.len())));
    }
    if let Some(w) = item_weights {
        if w.len() != k {
            return Err(TrainError::Length(format!("weights {} for list {k}", w.len())));
        }
    }
    let target = listnet_target(list_score, decay);
    let scores = model.forward_batch(features)?;
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(TrainError::NonFiniteScore);
    }
    let lse = logsumexp(&scores);
    let floor = PROB_FLOOR.ln();
    let mut loss = 0.0;
    let mut mass = 0.0; // Σ over unclamped j of w_j t_j
    let mut direct = vec![0.0; k];
    for j in 0..k {
        let w = item_weights.map_or(1.0, |w| w[j]);
        let logp = scores[j] - lse;
        if logp > floor {
            loss -= w * target[j] * logp;
            mass += w * target[j];
            direct[j] = w * target[j];
        } else {
            loss -= w * target[j] * floor;
        }
    }
    for j in 0..k {
        let p = (scores[j] - lse).exp();
        let ds = mass * p - direct[j];
        model.accumulate_grad(features[j].as_slice(), scale * ds, grad)?;
    }
    Ok(loss)
}

/// ListNet loss for a single list: `−Σ_j w_j P_true(j) log P_pred(j)`.
pub fn listnet_loss(
    model: &ScorerModel,
    features: &[PairFeatures],
    list_score: f64,
    decay: &DecayProfile,
    item_weights: Option<&[f64]>,
) -> Result<(f64, Vec<f64>), TrainError> {
    let mut grad = vec![0.0; model.param_count()];
    let loss = listnet_accumulate(model, features, list_score, decay, item_weights, 1.0, &mut grad)?;
    Ok((loss, grad))
}

/// Mean ListNet loss over lists, each with a DCG-style decay of its length.
pub fn listnet_batch_loss<E: Borrow<ListExample>>(
    model: &ScorerModel,
    batch: &[E],
) -> Result<(f64, Vec<f64>), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let n = batch.len() as f64;
    let mut grad = vec![0.0; model.param_count()];
    let mut loss = 0.0;
    for e in batch {
        let e = e.borrow();
        let decay = DecayProfile::dcg(e.features.len());
        loss += listnet_accumulate(
            model,
            &e.features,
            e.list_score,
            &decay,
            e.item_weights.as_deref(),
            1.0 / n,
            &mut grad,
        )?;
    }
    Ok((loss / n, grad))
}

/// Bradley–Terry loss with `Δ = RM(a) − RM(b)`.
pub fn bt_reward_loss<E: Borrow<PreferenceExample>>(
    rm: &RewardModel,
    batch: &[E],
) -> Result<(f64, Vec<f64>), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let model = rm.model();
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; model.param_count()];
    for e in batch {
        let e = e.borrow();
        let delta = finite(rm.reward(&e.list_a) - rm.reward(&e.list_b))?;
        let p = sigmoid(delta);
        let q = sigmoid(-delta);
        let (l, dl) = if e.preferred_a {
            (-p.max(PROB_FLOOR).ln(), if p > PROB_FLOOR { p - 1.0 } else { 0.0 })
        } else {
            (-q.max(PROB_FLOOR).ln(), if q > PROB_FLOOR { p } else { 0.0 })
        };
        loss += l;
        model.accumulate_grad(e.list_a.as_slice(), dl / n, &mut grad)?;
        model.accumulate_grad(e.list_b.as_slice(), -dl / n, &mut grad)?;
    }
    Ok((loss / n, grad))
}

/// A differentiable objective over a batch of examples.
pub trait Objective {
    type Example;
    fn loss_grad(
        &self,
        model: &ScorerModel,
        batch: &[&Self::Example],
    ) -> Result<(f64, Vec<f64>), TrainError>;
}

pub struct Pointwise;
pub struct ListNet;
pub struct BradleyTerry;

impl Objective for Pointwise {
    type Example = PointwiseExample;
    fn loss_grad(&self, model: &ScorerModel, batch: &[&PointwiseExample]) -> Result<(f64, Vec<f64>), TrainError> {
        match bce_loss(model, batch) {
            // a minibatch of zero-confidence items contributes nothing
            Err(TrainError::ZeroWeight) => Ok((0.0, vec![0.0; model.param_count()])),
            other => other,
        }
    }
}

impl Objective for ListNet {
    type Example = ListExample;
    fn loss_grad(&self, model: &ScorerModel, batch: &[&ListExample]) -> Result<(f64, Vec<f64>), TrainError> {
        listnet_batch_loss(model, batch)
    }
}

impl Objective for BradleyTerry {
    type Example = PreferenceExample;
    fn loss_grad(&self, model: &ScorerModel, batch: &[&PreferenceExample]) -> Result<(f64, Vec<f64>), TrainError> {
        // the reward head is a plain scorer over list features
        bt_reward_loss(&RewardModel(model.clone()), batch)
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub model: ScorerModel,
    /// Full-data loss after each epoch.
    pub losses: Vec<f64>,
}

/// Minibatch SGD with a per-epoch shuffle drawn from `config.seed`.
pub fn sgd_fit<O: Objective>(
    mut model: ScorerModel,
    objective: &O,
    data: &[O::Example],
    config: &TrainConfig,
) -> Result<FitResult, TrainError> {
    config.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let all: Vec<&O::Example> = data.iter().collect();
    let mut losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&O::Example> = chunk.iter().map(|&i| &data[i]).collect();
            let grad = match objective.loss_grad(&model, &batch) {
                Ok((_, g)) => g,
                Err(TrainError::NonFiniteScore) => {
                    return Err(TrainError::Diverged { epoch, loss: f64::NAN })
                }
                Err(e) => return Err(e),
            };
            model.apply_step(&grad, config.learning_rate);
        }
        let loss = match objective.loss_grad(&model, &all) {
            Ok((l, _)) => l,
            Err(TrainError::NonFiniteScore) => f64::NAN,
            Err(e) => return Err(e),
        };
        if !loss.is_finite() || model.params().iter().any(|p| !p.is_finite()) {
            return Err(TrainError::Diverged { epoch, loss });
        }
        losses.push(loss);
    }
    Ok(FitResult { model, losses })
}
