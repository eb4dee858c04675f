//! Teacher fusion and the gradient-boosted tree student.
//!
//! The student is boosted on Huber pseudo-residuals. Splits maximize
//! variance reduction over at most `max_thresholds` quantile candidates per
//! feature. Each leaf then takes the Huber-optimal constant of the residuals
//! it holds, so shrunken updates can never raise the training loss.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::featurize::{PairFeatures, FEATURE_DIM, FEATURE_SCHEMA_VERSION};
use crate::math::{argsort_desc, sigmoid};
use crate::scorers::{ModelError, ScorerModel};

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("fusion weight {0} outside [0,1]")]
    Alpha(f64),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("empty list batch at index {0}")]
    EmptyList(usize),
    #[error("list {0}: features and targets differ in length")]
    Length(usize),
    #[error("non-finite value in list {0}")]
    NonFinite(usize),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("training loss rose at round {round}: {before} -> {after}")]
    LossIncreased { round: usize, before: f64, after: f64 },
    #[error("ensemble expects {expected} features, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("feature schema version {got} does not match {expected}")]
    Schema { expected: u32, got: u32 },
    #[error("malformed tree {tree}: {reason}")]
    Malformed { tree: usize, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("ensemble io: {0}")]
    Io(#[from] std::io::Error),
    #[error("ensemble json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    alpha: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { alpha: 0.5 }
    }
}

impl FusionConfig {
    pub fn new(alpha: f64) -> Result<Self, DistillError> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(DistillError::Alpha(alpha));
        }
        Ok(Self { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

pub const ALPHA_GRID: [f64; 11] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];

/// `α σ(pw) + (1 − α) σ(lw)`.
pub fn fuse_targets(pointwise_logit: f64, listwise_logit: f64, fusion: &FusionConfig) -> f64 {
    let a = fusion.alpha;
    a * sigmoid(pointwise_logit) + (1.0 - a) * sigmoid(listwise_logit)
}

/// Fused soft targets for every candidate of a pool.
pub fn teacher_targets(
    pointwise: &ScorerModel,
    listwise: &ScorerModel,
    pool: &[PairFeatures],
    fusion: &FusionConfig,
) -> Result<Vec<f64>, DistillError> {
    let pw = pointwise.forward_batch(pool)?;
    let lw = listwise.forward_batch(pool)?;
    Ok(pw.iter().zip(&lw).map(|(&p, &l)| fuse_targets(p, l, fusion)).collect())
}

/// Negative Huber gradient with respect to the prediction.
pub fn huber_grad(residual: f64, delta: f64) -> f64 {
    residual.clamp(-delta, delta)
}

pub fn huber_loss(residual: f64, delta: f64) -> f64 {
    let a = residual.abs();
    if a <= delta {
        0.5 * residual * residual
    } else {
        delta * (a - 0.5 * delta)
    }
}

/// Minimizer of `Σ Huber(r_i − c)` by ternary search on the convex objective.
pub fn huber_optimal_constant(residuals: &[f64], delta: f64) -> f64 {
    if residuals.is_empty() {
        return 0.0;
    }
    let objective = |c: f64| residuals.iter().map(|r| huber_loss(r - c, delta)).sum::<f64>();
    let mut lo = residuals.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = residuals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    while hi - lo > 1e-10 {
        let m1 = lo + (hi - lo) / 3.0;
        let m2 = hi - (hi - lo) / 3.0;
        if objective(m1) <= objective(m2) {
            hi = m2;
        } else {
            lo = m1;
        }
        if m1 == lo && m2 == hi {
            break;
        }
    }
    0.5 * (lo + hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Node {
    /// `x[feature] <= threshold` goes left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf { value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    /// Root at index 0.
    pub nodes: Vec<Node>,
}

impl RegressionTree {
    pub fn leaf(value: f64) -> Self {
        Self { nodes: vec![Node::Leaf { value }] }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { value } => return value,
                Node::Split { feature, threshold, left, right } => {
                    i = if x[feature] <= threshold { left } else { right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
            }
        }
        walk(&self.nodes, 0)
    }

    fn check(&self, n_features: usize, max_depth: usize) -> Result<(), String> {
        if self.nodes.is_empty() {
            return Err("no nodes".into());
        }
        // every child index must point forward, which also rules out cycles
        for (i, node) in self.nodes.iter().enumerate() {
            match *node {
                Node::Leaf { value } if !value.is_finite() => return Err("non-finite leaf".into()),
                Node::Leaf { .. } => {}
                Node::Split { feature, threshold, left, right } => {
                    if feature >= n_features {
                        return Err(format!("feature index {feature} out of range"));
                    }
                    if !threshold.is_finite() {
                        return Err("non-finite threshold".into());
                    }
                    if left <= i || right <= i || left >= self.nodes.len() || right >= self.nodes.len() {
                        return Err(format!("bad child index at node {i}"));
                    }
                }
            }
        }
        if self.depth() > max_depth {
            return Err(format!("depth {} exceeds {max_depth}", self.depth()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub trees: usize,
    pub max_depth: usize,
    pub shrinkage: f64,
    pub huber_delta: f64,
    pub min_leaf: usize,
    pub max_thresholds: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            trees: 200,
            max_depth: 4,
            shrinkage: 0.1,
            huber_delta: 0.1,
            min_leaf: 5,
            max_thresholds: 32,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<(), DistillError> {
        if !(self.shrinkage > 0.0 && self.shrinkage <= 1.0) {
            return Err(DistillError::Config("shrinkage must be in (0,1]".into()));
        }
        if !(self.huber_delta > 0.0) {
            return Err(DistillError::Config("huber delta must be positive".into()));
        }
        if self.min_leaf == 0 || self.max_thresholds == 0 {
            return Err(DistillError::Config("min_leaf and max_thresholds must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeEnsemble {
    pub feature_schema_version: u32,
    pub n_features: usize,
    pub max_depth: usize,
    pub shrinkage: f64,
    pub init: f64,
    pub trees: Vec<RegressionTree>,
}

impl TreeEnsemble {
    /// An ensemble with no trees.
    pub fn constant(init: f64) -> Self {
        Self {
            feature_schema_version: FEATURE_SCHEMA_VERSION,
            n_features: FEATURE_DIM,
            max_depth: DistillConfig::default().max_depth,
            shrinkage: DistillConfig::default().shrinkage,
            init,
            trees: Vec::new(),
        }
    }

    /// Complete trees of depth `depth` with random splits and leaves. Serving
    /// cost depends only on shape, so this stands in for large fitted
    /// ensembles in latency measurements.
    pub fn synthetic<R: Rng + ?Sized>(n_trees: usize, depth: usize, rng: &mut R) -> Self {
        let trees = (0..n_trees)
            .map(|_| {
                let mut nodes = Vec::with_capacity((1 << (depth + 1)) - 1);
                // heap layout: children of i are 2i+1 and 2i+2
                for i in 0..(1usize << (depth + 1)) - 1 {
                    if i < (1 << depth) - 1 {
                        nodes.push(Node::Split {
                            feature: rng.random_range(0..FEATURE_DIM),
                            threshold: rng.random_range(-1.0..1.0),
                            left: 2 * i + 1,
                            right: 2 * i + 2,
                        });
                    } else {
                        nodes.push(Node::Leaf { value: rng.random_range(-1.0..1.0) });
                    }
                }
                RegressionTree { nodes }
            })
            .collect();
        Self {
            max_depth: depth,
            trees,
            ..Self::constant(0.0)
        }
    }

    /// Prediction without a dimension check.
    pub fn predict(&self, x: &[f64]) -> f64 {
        let sum: f64 = self.trees.iter().map(|t| t.predict(x)).sum();
        self.init + self.shrinkage * sum
    }

    /// Scores and the descending serving order; ties keep pool order.
    pub fn score_list<X: AsRef<[f64]>>(&self, list: &[X]) -> Result<(Vec<f64>, Vec<usize>), DistillError> {
        let mut scores = Vec::with_capacity(list.len());
        for x in list {
            let x = x.as_ref();
            if x.len() != self.n_features {
                return Err(DistillError::Dimension { expected: self.n_features, got: x.len() });
            }
            scores.push(self.predict(x));
        }
        let order = argsort_desc(&scores);
        Ok((scores, order))
    }

    pub fn validate(&self) -> Result<(), DistillError> {
        if self.feature_schema_version != FEATURE_SCHEMA_VERSION {
            return Err(DistillError::Schema {
                expected: FEATURE_SCHEMA_VERSION,
                got: self.feature_schema_version,
            });
        }
        if !self.init.is_finite() || !self.shrinkage.is_finite() {
            return Err(DistillError::Malformed { tree: 0, reason: "non-finite header".into() });
        }
        for (i, t) in self.trees.iter().enumerate() {
            t.check(self.n_features, self.max_depth)
                .map_err(|reason| DistillError::Malformed { tree: i, reason })?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String, DistillError> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, DistillError> {
        let e: Self = serde_json::from_str(s)?;
        e.validate()?;
        Ok(e)
    }

    pub fn save(&self, path: &Path) -> Result<(), DistillError> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DistillError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// One list of candidates with their fused soft targets.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillList {
    pub features: Vec<PairFeatures>,
    pub targets: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EnsembleFit {
    pub ensemble: TreeEnsemble,
    /// Mean training Huber loss at init and after every round.
    pub losses: Vec<f64>,
}

struct Builder<'a> {
    x: &'a [f64],
    f: usize,
    grad: &'a [f64],
    residual: &'a [f64],
    config: &'a DistillConfig,
    goes_left: Vec<bool>,
    nodes: Vec<Node>,
    /// Leaf value reached by every training row.
    row_value: Vec<f64>,
}

struct SplitChoice {
    feature: usize,
    threshold: f64,
    gain: f64,
}

impl Builder<'_> {
    fn value(&self, row: u32, feature: usize) -> f64 {
        self.x[row as usize * self.f + feature]
    }

    fn best_split(&self, sorted: &[Vec<u32>]) -> Option<SplitChoice> {
        let rows = &sorted[0];
        let n = rows.len();
        let min_leaf = self.config.min_leaf;
        if n < 2 * min_leaf {
            return None;
        }
        let total: f64 = rows.iter().map(|&r| self.grad[r as usize]).sum();
        let base = total * total / n as f64;
        let q = self.config.max_thresholds;
        let mut best: Option<SplitChoice> = None;
        for (feature, order) in sorted.iter().enumerate() {
            let mut prefix = Vec::with_capacity(n + 1);
            prefix.push(0.0);
            let mut acc = 0.0;
            for &r in order {
                acc += self.grad[r as usize];
                prefix.push(acc);
            }
            let mut last = 0;
            for k in 1..q {
                // split before position p, moved forward past ties
                let mut p = (k * n) / q;
                while p < n && p > 0 && self.value(order[p - 1], feature) == self.value(order[p], feature) {
                    p += 1;
                }
                if p <= last || p < min_leaf || n - p < min_leaf || p >= n {
                    continue;
                }
                last = p;
                let sl = prefix[p];
                let sr = total - sl;
                let gain = sl * sl / p as f64 + sr * sr / (n - p) as f64 - base;
                if gain > 1e-14 && best.as_ref().is_none_or(|b| gain > b.gain) {
                    let lo = self.value(order[p - 1], feature);
                    let hi = self.value(order[p], feature);
                    let mid = 0.5 * (lo + hi);
                    let threshold = if mid < hi { mid } else { lo };
                    best = Some(SplitChoice { feature, threshold, gain });
                }
            }
        }
        best
    }

    fn build(&mut self, sorted: Vec<Vec<u32>>, depth: usize) -> usize {
        let at = self.nodes.len();
        self.nodes.push(Node::Leaf { value: 0.0 });
        let split = if depth < self.config.max_depth { self.best_split(&sorted) } else { None };
        match split {
            None => {
                let res: Vec<f64> = sorted[0].iter().map(|&r| self.residual[r as usize]).collect();
                let value = huber_optimal_constant(&res, self.config.huber_delta);
                for &r in &sorted[0] {
                    self.row_value[r as usize] = value;
                }
                self.nodes[at] = Node::Leaf { value };
            }
            Some(s) => {
                for &r in &sorted[0] {
                    self.goes_left[r as usize] = self.value(r, s.feature) <= s.threshold;
                }
                let mut left = Vec::with_capacity(self.f);
                let mut right = Vec::with_capacity(self.f);
                for order in sorted {
                    let (l, r): (Vec<u32>, Vec<u32>) =
                        order.into_iter().partition(|&r| self.goes_left[r as usize]);
                    left.push(l);
                    right.push(r);
                }
                let l = self.build(left, depth + 1);
                let r = self.build(right, depth + 1);
                self.nodes[at] = Node::Split { feature: s.feature, threshold: s.threshold, left: l, right: r };
            }
        }
        at
    }
}

fn flatten(lists: &[DistillList]) -> Result<(Vec<f64>, Vec<f64>), DistillError> {
    if lists.is_empty() {
        return Err(DistillError::EmptyDataset);
    }
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (i, l) in lists.iter().enumerate() {
        if l.features.is_empty() {
            return Err(DistillError::EmptyList(i));
        }
        if l.features.len() != l.targets.len() {
            return Err(DistillError::Length(i));
        }
        for (f, &t) in l.features.iter().zip(&l.targets) {
            if !t.is_finite() || f.0.iter().any(|v| !v.is_finite()) {
                return Err(DistillError::NonFinite(i));
            }
            x.extend_from_slice(&f.0);
            y.push(t);
        }
    }
    Ok((x, y))
}

fn mean_huber(y: &[f64], pred: &[f64], delta: f64) -> f64 {
    y.iter().zip(pred).map(|(a, b)| huber_loss(a - b, delta)).sum::<f64>() / y.len() as f64
}

/// Boosts a tree ensemble onto the per-list soft targets.
pub fn fit_ensemble(lists: &[DistillList], config: &DistillConfig) -> Result<EnsembleFit, DistillError> {
    config.validate()?;
    let (x, y) = flatten(lists)?;
    let f = FEATURE_DIM;
    let n = y.len();
    let delta = config.huber_delta;
    let presorted: Vec<Vec<u32>> = (0..f)
        .map(|j| {
            let mut idx: Vec<u32> = (0..n as u32).collect();
            idx.sort_by(|&a, &b| x[a as usize * f + j].total_cmp(&x[b as usize * f + j]).then(a.cmp(&b)));
            idx
        })
        .collect();

    let init = huber_optimal_constant(&y, delta);
    let mut pred = vec![init; n];
    let mut losses = vec![mean_huber(&y, &pred, delta)];
    let mut trees = Vec::with_capacity(config.trees);
    let mut residual = vec![0.0; n];
    let mut grad = vec![0.0; n];
    for round in 0..config.trees {
        for i in 0..n {
            residual[i] = y[i] - pred[i];
            grad[i] = huber_grad(residual[i], delta);
        }
        let mut b = Builder {
            x: &x,
            f,
            grad: &grad,
            residual: &residual,
            config,
            goes_left: vec![false; n],
            nodes: Vec::new(),
            row_value: vec![0.0; n],
        };
        b.build(presorted.clone(), 0);
        for (p, v) in pred.iter_mut().zip(&b.row_value) {
            *p += config.shrinkage * v;
        }
        let before = *losses.last().expect("init loss present");
        let after = mean_huber(&y, &pred, delta);
        if after > before + 1e-12 * (1.0 + before) {
            return Err(DistillError::LossIncreased { round, before, after });
        }
        losses.push(after);
        trees.push(RegressionTree { nodes: b.nodes });
    }
    Ok(EnsembleFit {
        ensemble: TreeEnsemble {
            feature_schema_version: FEATURE_SCHEMA_VERSION,
            n_features: f,
            max_depth: config.max_depth,
            shrinkage: config.shrinkage,
            init,
            trees,
        },
        losses,
    })
}

/// Kendall τ-a between two score vectors over the same items. Tied pairs
/// count as neither concordant nor discordant.
pub fn kendall_tau(a: &[f64], b: &[f64]) -> f64 {
    let k = a.len().min(b.len());
    if k < 2 {
        return 1.0;
    }
    let mut s = 0i64;
    for i in 0..k {
        for j in i + 1..k {
            let x = (a[i] - a[j]).partial_cmp(&0.0).map_or(0, |o| o as i64);
            let y = (b[i] - b[j]).partial_cmp(&0.0).map_or(0, |o| o as i64);
            s += x * y;
        }
    }
    s as f64 / (k * (k - 1) / 2) as f64
}

/// Kendall τ between two orderings given as item sequences.
pub fn kendall_tau_orders(a: &[usize], b: &[usize]) -> f64 {
    let ranks = |order: &[usize]| {
        let mut r = vec![0.0; order.len()];
        for (pos, &item) in order.iter().enumerate() {
            r[item] = -(pos as f64);
        }
        r
    };
    kendall_tau(&ranks(a), &ranks(b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fidelity {
    pub per_list: Vec<f64>,
    pub mean: f64,
}

/// Kendall τ between the student's and the teacher targets' orderings on
/// every list with at least two items.
pub fn distillation_fidelity(ensemble: &TreeEnsemble, lists: &[DistillList]) -> Result<Fidelity, DistillError> {
    let mut per_list = Vec::with_capacity(lists.len());
    for l in lists.iter().filter(|l| l.features.len() >= 2) {
        let (scores, _) = ensemble.score_list(&l.features)?;
        per_list.push(kendall_tau_orders(&argsort_desc(&scores), &argsort_desc(&l.targets)));
    }
    let mean = if per_list.is_empty() { 0.0 } else { per_list.iter().sum::<f64>() / per_list.len() as f64 };
    Ok(Fidelity { per_list, mean })
}
