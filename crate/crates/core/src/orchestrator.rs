//! The nearline loop and the paired experiment harness.
//!
//! Confidence-filtered feedback is counted as it arrives. Each time the
//! count crosses the trigger threshold an update cycle refreshes the three
//! teachers, aligns the policy with PPO, distills a new serving model and
//! writes it to the registry as a candidate. Shadow evaluation on held-out
//! turns decides whether the live pointer moves.

use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distill::{
    fit_ensemble, fuse_targets, DistillConfig, DistillError, DistillList, FusionConfig, TreeEnsemble, ALPHA_GRID,
};
use crate::featurize::{Corpus, FeatureError, FeaturizedPool, Query, FEATURE_DIM, FEATURE_SCHEMA_VERSION};
use crate::feedback::{Ingested, Turn, DEFAULT_MIN_CONFIDENCE};
use crate::math::argsort_desc;
use crate::policy::{PlPolicy, PolicyError};
use crate::ppo::{align, PpoConfig, PpoError, RoundDiagnostics};
use crate::scorers::{Arch, ModelError, RewardModel, ScorerModel, MODEL_SCHEMA_VERSION};
use crate::seed::{derive_indexed, rng_indexed};
use crate::simulator::{ndcg_at, CorpusConfig, Ranker, SimConfig, SimError, StaticRanker, TurnOutcome, World};
use crate::trainers::{
    sgd_fit, BradleyTerry, ListExample, ListNet, Pointwise, PointwiseExample, PreferenceExample, TrainConfig,
    TrainError,
};

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("update cycle has no training events")]
    NoEvents,
    #[error("registry: {0}")]
    Registry(String),
    #[error("training: {0}")]
    Train(#[from] TrainError),
    #[error("alignment: {0}")]
    Ppo(#[from] PpoError),
    #[error("distillation: {0}")]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Event counter that fires once per `threshold` events and keeps the
/// overflow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trigger {
    pub threshold: usize,
    pub counter: usize,
}

impl Trigger {
    pub fn new(threshold: usize) -> Result<Self, OrchestratorError> {
        if threshold == 0 {
            return Err(OrchestratorError::Config("trigger threshold must be at least 1".into()));
        }
        Ok(Self { threshold, counter: 0 })
    }

    /// Adds one event; true when a cycle fires.
    pub fn accumulate(&mut self) -> bool {
        self.counter += 1;
        if self.counter >= self.threshold {
            self.counter -= self.threshold;
            true
        } else {
            false
        }
    }

    /// Adds `n` events and returns how many cycles fired.
    pub fn accumulate_many(&mut self, n: usize) -> usize {
        (0..n).filter(|_| self.accumulate()).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cadence {
    Nearline,
    /// Cycles every `interval` × threshold events.
    Batch { interval: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Distill,
    Cascade,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    pub use_doc: bool,
    pub use_list: bool,
    pub use_resp: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            use_doc: true,
            use_list: true,
            use_resp: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CycleConfig {
    pub threshold: usize,
    pub cadence: Cadence,
    pub flags: AblationFlags,
    pub fusion: FusionMode,
    pub min_confidence: f64,
    pub pointwise: TrainConfig,
    pub listwise: TrainConfig,
    pub reward: TrainConfig,
    pub ppo: PpoConfig,
    /// Most recent training turns replayed by the teachers each cycle.
    pub train_window: usize,
    pub ppo_rounds: usize,
    /// Most recent training pools used by PPO.
    pub ppo_pools: usize,
    pub distill: DistillConfig,
    /// Most recent training pools relabeled for distillation.
    pub distill_window: usize,
    /// Every `holdout_every`-th turn is held out for shadow evaluation.
    pub holdout_every: usize,
    /// Most recent held-out turns kept for evaluation.
    pub eval_window: usize,
    pub promote_tolerance: f64,
}

impl Default for CycleConfig {
    fn default() -> Self {
        let teacher = TrainConfig {
            learning_rate: 0.5,
            batch_size: 32,
            epochs: 30,
            seed: 0,
        };
        Self {
            threshold: 500,
            cadence: Cadence::Nearline,
            flags: AblationFlags::default(),
            fusion: FusionMode::Distill,
            min_confidence: DEFAULT_MIN_CONFIDENCE,
            pointwise: teacher,
            listwise: teacher,
            reward: teacher,
            ppo: PpoConfig::default(),
            train_window: 200,
            ppo_rounds: 2,
            ppo_pools: 32,
            distill: DistillConfig::default(),
            distill_window: 50,
            holdout_every: 10,
            eval_window: 100,
            promote_tolerance: 0.005,
        }
    }
}

impl CycleConfig {
    pub fn validate(&self) -> Result<(), OrchestratorError> {
        if self.threshold == 0 {
            return Err(OrchestratorError::Config("threshold must be at least 1".into()));
        }
        if let Cadence::Batch { interval: 0 } = self.cadence {
            return Err(OrchestratorError::Config("batch interval must be at least 1".into()));
        }
        if self.train_window == 0 || self.distill_window == 0 {
            return Err(OrchestratorError::Config("training windows must hold at least one turn".into()));
        }
        if self.holdout_every < 2 {
            return Err(OrchestratorError::Config("holdout_every must be at least 2".into()));
        }
        self.pointwise.validate()?;
        self.listwise.validate()?;
        self.reward.validate()?;
        self.ppo.validate()?;
        self.distill.validate()?;
        Ok(())
    }

    /// Events between cycles after applying the cadence.
    pub fn effective_threshold(&self) -> usize {
        match self.cadence {
            Cadence::Nearline => self.threshold,
            Cadence::Batch { interval } => self.threshold * interval,
        }
    }
}

/// Feedback from one turn, featurized against the turn's retrieved pool.
#[derive(Debug, Clone)]
pub struct TurnData {
    pub pool: FeaturizedPool,
    /// Oracle utilities, when the producer knows them.
    pub utilities: Option<Vec<f64>>,
    pub docs: Vec<PointwiseExample>,
    pub lists: Vec<ListExample>,
    pub prefs: Vec<PreferenceExample>,
}

impl TurnData {
    pub fn n_events(&self) -> usize {
        self.docs.len() + self.lists.len() + self.prefs.len()
    }

    pub fn from_outcome(o: &TurnOutcome, min_confidence: f64) -> Result<Self, OrchestratorError> {
        let pos = |d| {
            o.features
                .position(d)
                .ok_or_else(|| OrchestratorError::Registry(format!("doc {} not in pool", d.0)))
        };
        let docs = o
            .docs
            .iter()
            .filter(|d| d.confidence >= min_confidence)
            .map(|d| {
                Ok(PointwiseExample {
                    features: o.features.features[pos(d.doc)?],
                    label: d.label,
                    confidence: d.confidence,
                })
            })
            .collect::<Result<_, OrchestratorError>>()?;
        let lists = o
            .lists
            .iter()
            .map(|l| {
                let features = l
                    .pool
                    .iter()
                    .map(|&d| Ok(o.features.features[pos(d)?]))
                    .collect::<Result<_, OrchestratorError>>()?;
                Ok(ListExample {
                    features,
                    list_score: l.list_score,
                    item_weights: l.item_weights.clone(),
                })
            })
            .collect::<Result<_, OrchestratorError>>()?;
        let idx = |ids: &[crate::feedback::DocId]| ids.iter().map(|&d| pos(d)).collect::<Result<Vec<_>, _>>();
        let prefs = vec![PreferenceExample {
            list_a: o.features.list_features(&idx(&o.pref.list_a)?)?,
            list_b: o.features.list_features(&idx(&o.pref.list_b)?)?,
            preferred_a: o.pref.preferred_a,
        }];
        Ok(Self {
            pool: o.features.clone(),
            utilities: Some(o.utilities.clone()),
            docs,
            lists,
            prefs,
        })
    }

    /// Featurizes an ingested turn and the events attached to it.
    pub fn from_ingested(
        turn: &Turn,
        ingested: &Ingested,
        corpus: &Corpus,
        min_confidence: f64,
    ) -> Result<Self, OrchestratorError> {
        let embedding = turn
            .query_embedding
            .clone()
            .ok_or_else(|| OrchestratorError::Config(format!("turn {} lacks a query embedding", turn.query.0)))?;
        let query = Query {
            embedding,
            topic: turn.query_topic,
        };
        let docs = corpus.resolve(&turn.pool)?;
        let pool = FeaturizedPool::build(&query, &docs)?;
        let pos = |d: crate::feedback::DocId| {
            pool.position(d)
                .ok_or_else(|| OrchestratorError::Config(format!("doc {} outside pool of query {}", d.0, turn.query.0)))
        };
        let mut out = Self {
            utilities: turn.utilities.clone(),
            docs: Vec::new(),
            lists: Vec::new(),
            prefs: Vec::new(),
            pool: pool.clone(),
        };
        for &i in &turn.events.doc {
            let d = &ingested.docs[i];
            if d.confidence >= min_confidence {
                out.docs.push(PointwiseExample {
                    features: pool.features[pos(d.doc)?],
                    label: d.label,
                    confidence: d.confidence,
                });
            }
        }
        for &i in &turn.events.list {
            let l = &ingested.lists[i];
            out.lists.push(ListExample {
                features: l.pool.iter().map(|&d| Ok(pool.features[pos(d)?])).collect::<Result<_, OrchestratorError>>()?,
                list_score: l.list_score,
                item_weights: l.item_weights.clone(),
            });
        }
        for &i in &turn.events.resp {
            let r = &ingested.prefs[i];
            let a: Vec<usize> = r.list_a.iter().map(|&d| pos(d)).collect::<Result<_, _>>()?;
            let b: Vec<usize> = r.list_b.iter().map(|&d| pos(d)).collect::<Result<_, _>>()?;
            out.prefs.push(PreferenceExample {
                list_a: pool.list_features(&a)?,
                list_b: pool.list_features(&b)?,
                preferred_a: r.preferred_a,
            });
        }
        Ok(out)
    }
}

/// A held-out pool with its oracle utilities.
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub pool: FeaturizedPool,
    pub utilities: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ServingKind {
    Static,
    Ensemble,
    Cascade,
}

/// What a version serves with.
#[derive(Debug, Clone, PartialEq)]
pub enum Serving {
    /// Retriever order.
    Static,
    Ensemble(TreeEnsemble),
    /// `λ·pointwise + (1 − λ)·policy` over raw teacher logits.
    Cascade { lambda: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EventCounts {
    pub doc: usize,
    pub list: usize,
    pub resp: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub parent: Option<u32>,
    pub cycle: usize,
    pub feature_schema_version: u32,
    pub model_schema_version: u32,
    pub serving: ServingKind,
    pub flags: AblationFlags,
    pub alpha: Option<f64>,
    pub lambda: Option<f64>,
    pub events: EventCounts,
    pub ppo: Vec<RoundDiagnostics>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelVersion {
    pub manifest: Manifest,
    pub pointwise: ScorerModel,
    pub policy: ScorerModel,
    pub reward: RewardModel,
    pub serving: Serving,
}

impl ModelVersion {
    /// Version 0: serves the retriever order, teachers at seeded random init.
    pub fn bootstrap(seed: u64) -> Self {
        let mut rng = rng_indexed(seed, "bootstrap", 0, 0);
        Self {
            manifest: Manifest {
                version: 0,
                parent: None,
                cycle: 0,
                feature_schema_version: FEATURE_SCHEMA_VERSION,
                model_schema_version: MODEL_SCHEMA_VERSION,
                serving: ServingKind::Static,
                flags: AblationFlags::default(),
                alpha: None,
                lambda: None,
                events: EventCounts::default(),
                ppo: Vec::new(),
            },
            pointwise: ScorerModel::random(Arch::Linear, FEATURE_DIM, &mut rng),
            policy: ScorerModel::random(Arch::Linear, FEATURE_DIM, &mut rng),
            reward: RewardModel::random(Arch::Linear, &mut rng),
            serving: Serving::Static,
        }
    }

    pub fn score(&self, pool: &FeaturizedPool) -> Vec<f64> {
        match &self.serving {
            Serving::Static => StaticRanker.scores(pool, &[]),
            Serving::Ensemble(e) => pool.features.iter().map(|f| e.predict(&f.0)).collect(),
            Serving::Cascade { lambda } => pool
                .features
                .iter()
                .map(|f| {
                    lambda * logit(&self.pointwise, &f.0)
                        + (1.0 - lambda) * logit(&self.policy, &f.0)
                })
                .collect(),
        }
    }

    fn write_dir(&self, dir: &Path) -> Result<(), OrchestratorError> {
        fs::create_dir_all(dir)?;
        self.pointwise.save(&dir.join("pointwise.json"))?;
        self.policy.save(&dir.join("policy.json"))?;
        self.reward.model().save(&dir.join("reward.json"))?;
        if let Serving::Ensemble(e) = &self.serving {
            e.save(&dir.join("ensemble.json"))?;
        }
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&self.manifest)?)?;
        Ok(())
    }

    fn read_dir(dir: &Path) -> Result<Self, OrchestratorError> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        let serving = match manifest.serving {
            ServingKind::Static => Serving::Static,
            ServingKind::Ensemble => Serving::Ensemble(TreeEnsemble::load(&dir.join("ensemble.json"))?),
            ServingKind::Cascade => Serving::Cascade {
                lambda: manifest
                    .lambda
                    .ok_or_else(|| OrchestratorError::Registry("cascade manifest without lambda".into()))?,
            },
        };
        let pointwise = ScorerModel::load(&dir.join("pointwise.json"))?;
        let policy = ScorerModel::load(&dir.join("policy.json"))?;
        if pointwise.input_dim() != FEATURE_DIM || policy.input_dim() != FEATURE_DIM {
            return Err(OrchestratorError::Registry(format!("{} holds a teacher of the wrong input dimension", dir.display())));
        }
        Ok(Self {
            pointwise,
            policy,
            reward: RewardModel::new(ScorerModel::load(&dir.join("reward.json"))?)?,
            serving,
            manifest,
        })
    }
}

impl Ranker for ModelVersion {
    fn scores(&self, pool: &FeaturizedPool, _: &[f64]) -> Vec<f64> {
        self.score(pool)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShadowDecision {
    pub candidate: u32,
    pub live: u32,
    pub promote: bool,
    pub candidate_ndcg: f64,
    pub live_ndcg: f64,
    pub delta: f64,
    pub reason: String,
}

/// Append-only versions with a single live pointer. Readers take an `Arc`
/// snapshot, so a promotion never disturbs in-flight scoring.
#[derive(Debug)]
pub struct ModelRegistry {
    dir: Option<PathBuf>,
    versions: Vec<Arc<ModelVersion>>,
    live: usize,
    pub decisions: Vec<ShadowDecision>,
}

impl ModelRegistry {
    pub fn in_memory(v0: ModelVersion) -> Self {
        Self {
            dir: None,
            versions: vec![Arc::new(v0)],
            live: 0,
            decisions: Vec::new(),
        }
    }

    /// Opens a registry directory, creating it with `v0` when empty.
    pub fn open(dir: &Path, v0: ModelVersion) -> Result<Self, OrchestratorError> {
        fs::create_dir_all(dir)?;
        let mut versions = Vec::new();
        for n in 0.. {
            let vdir = dir.join(format!("v{n}"));
            if !vdir.is_dir() {
                break;
            }
            versions.push(Arc::new(ModelVersion::read_dir(&vdir)?));
        }
        let mut reg = Self {
            dir: Some(dir.to_path_buf()),
            versions: Vec::new(),
            live: 0,
            decisions: Vec::new(),
        };
        if versions.is_empty() {
            reg.append(v0)?;
            reg.write_live()?;
        } else {
            reg.versions = versions;
            let live: usize = fs::read_to_string(dir.join("LIVE"))?
                .trim()
                .parse()
                .map_err(|_| OrchestratorError::Registry("unreadable LIVE pointer".into()))?;
            if live >= reg.versions.len() {
                return Err(OrchestratorError::Registry(format!("LIVE points at missing v{live}")));
            }
            reg.live = live;
        }
        Ok(reg)
    }

    pub fn live(&self) -> Arc<ModelVersion> {
        Arc::clone(&self.versions[self.live])
    }

    pub fn live_version(&self) -> u32 {
        self.live as u32
    }

    pub fn len(&self) -> usize {
        self.versions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.versions.is_empty()
    }

    pub fn get(&self, version: u32) -> Option<Arc<ModelVersion>> {
        self.versions.get(version as usize).cloned()
    }

    pub fn next_version(&self) -> u32 {
        self.versions.len() as u32
    }

    /// Writes a new immutable version; the live pointer does not move.
    pub fn append(&mut self, mut v: ModelVersion) -> Result<u32, OrchestratorError> {
        let n = self.next_version();
        v.manifest.version = n;
        if let Some(dir) = &self.dir {
            let tmp = dir.join(format!(".v{n}.tmp"));
            if tmp.exists() {
                fs::remove_dir_all(&tmp)?;
            }
            v.write_dir(&tmp)?;
            fs::rename(&tmp, dir.join(format!("v{n}")))?;
        }
        self.versions.push(Arc::new(v));
        Ok(n)
    }

    fn write_live(&self) -> Result<(), OrchestratorError> {
        if let Some(dir) = &self.dir {
            let tmp = dir.join(".LIVE.tmp");
            fs::write(&tmp, format!("{}\n", self.live))?;
            fs::rename(tmp, dir.join("LIVE"))?;
        }
        Ok(())
    }

    fn record(&mut self, d: ShadowDecision) -> Result<(), OrchestratorError> {
        if let Some(dir) = &self.dir {
            use std::io::Write;
            let mut f = fs::OpenOptions::new().create(true).append(true).open(dir.join("decisions.jsonl"))?;
            writeln!(f, "{}", serde_json::to_string(&d)?)?;
        }
        self.decisions.push(d);
        Ok(())
    }

    /// Shadow-evaluates `candidate` against the live version and moves the
    /// live pointer when it is accepted.
    pub fn gate(&mut self, candidate: u32, eval: &[EvalItem], tolerance: f64) -> Result<ShadowDecision, OrchestratorError> {
        let cand = self
            .get(candidate)
            .ok_or_else(|| OrchestratorError::Registry(format!("no version {candidate}")))?;
        let live = self.live();
        let d = shadow_eval(&cand, &live, eval, tolerance);
        if d.promote {
            self.live = candidate as usize;
            self.write_live()?;
        }
        self.record(d.clone())?;
        Ok(d)
    }
}

fn logit(model: &ScorerModel, x: &[f64]) -> f64 {
    model.forward(x).expect("teacher input matches the feature dimension")
}

fn logits(model: &ScorerModel, xs: &[crate::featurize::PairFeatures]) -> Vec<f64> {
    model.forward_batch(xs).expect("teacher input matches the feature dimension")
}

/// Mean NDCG@m of a scorer over the evaluation slice.
pub fn slice_ndcg(eval: &[EvalItem], m: usize, score: impl Fn(&FeaturizedPool) -> Vec<f64>) -> f64 {
    if eval.is_empty() {
        return 0.0;
    }
    let total: f64 = eval
        .iter()
        .map(|e| {
            let order = argsort_desc(&score(&e.pool));
            let served: Vec<f64> = order.iter().take(m).map(|&i| e.utilities[i]).collect();
            ndcg_at(&served, &e.utilities, m)
        })
        .sum();
    total / eval.len() as f64
}

pub const EVAL_DEPTH: usize = 5;

/// Promote iff candidate NDCG ≥ live NDCG − tolerance on the held-out slice.
pub fn shadow_eval(candidate: &ModelVersion, live: &ModelVersion, eval: &[EvalItem], tolerance: f64) -> ShadowDecision {
    let mut d = ShadowDecision {
        candidate: candidate.manifest.version,
        live: live.manifest.version,
        promote: false,
        candidate_ndcg: 0.0,
        live_ndcg: 0.0,
        delta: 0.0,
        reason: String::new(),
    };
    if eval.is_empty() {
        d.reason = "empty evaluation slice".into();
        return d;
    }
    d.candidate_ndcg = slice_ndcg(eval, EVAL_DEPTH, |p| candidate.score(p));
    d.live_ndcg = slice_ndcg(eval, EVAL_DEPTH, |p| live.score(p));
    d.delta = d.candidate_ndcg - d.live_ndcg;
    d.promote = d.delta >= -tolerance;
    d.reason = if d.promote { "within tolerance".into() } else { "below live".into() };
    d
}

/// Grid value maximizing `objective`; ties go to the value nearest 0.5.
fn tune_weight(objective: impl Fn(f64) -> f64) -> f64 {
    let mut grid = ALPHA_GRID.to_vec();
    grid.sort_by(|a, b| (a - 0.5).abs().total_cmp(&(b - 0.5).abs()).then(a.total_cmp(b)));
    let mut best = (f64::NEG_INFINITY, 0.5);
    for a in grid {
        let v = objective(a);
        if v > best.0 {
            best = (v, a);
        }
    }
    best.1
}

/// Fusion weight maximizing fused-teacher NDCG on the slice.
pub fn tune_alpha(pointwise: &ScorerModel, policy: &ScorerModel, eval: &[EvalItem]) -> f64 {
    if eval.is_empty() {
        return FusionConfig::default().alpha();
    }
    let logits: Vec<(Vec<f64>, Vec<f64>)> = eval
        .iter()
        .map(|e| (logits(&pointwise, &e.pool.features), logits(&policy, &e.pool.features)))
        .collect();
    tune_weight(|a| {
        let fc = FusionConfig::new(a).expect("grid values lie in [0,1]");
        let mut total = 0.0;
        for (e, (pw, lw)) in eval.iter().zip(&logits) {
            let y: Vec<f64> = pw.iter().zip(lw).map(|(&p, &l)| fuse_targets(p, l, &fc)).collect();
            let order = argsort_desc(&y);
            let served: Vec<f64> = order.iter().take(EVAL_DEPTH).map(|&i| e.utilities[i]).collect();
            total += ndcg_at(&served, &e.utilities, EVAL_DEPTH);
        }
        total
    })
}

/// Cascade weight maximizing interpolated-logit NDCG on the slice.
pub fn tune_lambda(pointwise: &ScorerModel, policy: &ScorerModel, eval: &[EvalItem]) -> f64 {
    if eval.is_empty() {
        return 0.5;
    }
    tune_weight(|l| {
        slice_ndcg(eval, EVAL_DEPTH, |p| {
            p.features
                .iter()
                .map(|f| l * logit(&pointwise, &f.0) + (1.0 - l) * logit(&policy, &f.0))
                .collect()
        })
    })
}

/// Inputs of one update cycle.
pub struct CycleInput<'a> {
    pub cycle: usize,
    pub seed: u64,
    pub batch: &'a [TurnData],
    pub window: &'a [FeaturizedPool],
    pub eval: &'a [EvalItem],
}

/// Refresh teachers, align, distill. Returns an unversioned candidate.
pub fn update_cycle(live: &ModelVersion, input: &CycleInput<'_>, config: &CycleConfig) -> Result<ModelVersion, OrchestratorError> {
    config.validate()?;
    let flags = config.flags;
    let docs: Vec<PointwiseExample> = input.batch.iter().flat_map(|t| t.docs.iter().cloned()).collect();
    let lists: Vec<ListExample> = input.batch.iter().flat_map(|t| t.lists.iter().cloned()).collect();
    let prefs: Vec<PreferenceExample> = input.batch.iter().flat_map(|t| t.prefs.iter().cloned()).collect();
    let counts = EventCounts {
        doc: docs.len(),
        list: lists.len(),
        resp: prefs.len(),
    };
    let used = (flags.use_doc as usize) * counts.doc + (flags.use_list as usize) * counts.list + (flags.use_resp as usize) * counts.resp;
    if used == 0 {
        return Err(OrchestratorError::NoEvents);
    }
    let seed_for = |label: &str| derive_indexed(input.seed, label, input.cycle as u64, 0);

    let pointwise = if flags.use_doc && !docs.is_empty() {
        let cfg = TrainConfig { seed: seed_for("pointwise"), ..config.pointwise };
        sgd_fit(live.pointwise.clone(), &Pointwise, &docs, &cfg)?.model
    } else {
        live.pointwise.clone()
    };
    let listwise = if flags.use_list {
        if lists.is_empty() {
            live.policy.clone()
        } else {
            let cfg = TrainConfig { seed: seed_for("listwise"), ..config.listwise };
            sgd_fit(live.policy.clone(), &ListNet, &lists, &cfg)?.model
        }
    } else {
        let mut rng = rng_indexed(input.seed, "policy-init", input.cycle as u64, 0);
        ScorerModel::random(live.policy.arch(), FEATURE_DIM, &mut rng)
    };
    let reward = if flags.use_resp && !prefs.is_empty() {
        let cfg = TrainConfig { seed: seed_for("reward"), ..config.reward };
        RewardModel::new(sgd_fit(live.reward.model().clone(), &BradleyTerry, &prefs, &cfg)?.model)?
    } else {
        live.reward.clone()
    };

    let mut ppo_rows = Vec::new();
    let policy = if flags.use_resp && config.ppo_rounds > 0 {
        let start = input.batch.len().saturating_sub(config.ppo_pools);
        let pools: Vec<FeaturizedPool> = input.batch[start..].iter().map(|t| t.pool.clone()).collect();
        let pl = PlPolicy::new(listwise.clone(), EVAL_DEPTH)?;
        let mut rng = rng_indexed(input.seed, "ppo", input.cycle as u64, 0);
        let (aligned, rows) = align(&pl, &reward, &pools, &config.ppo, config.ppo_rounds, &mut rng)?;
        ppo_rows = rows;
        aligned.model
    } else {
        listwise.clone()
    };

    let (serving, kind, alpha, lambda) = match config.fusion {
        FusionMode::Distill => {
            let alpha = if flags.use_doc { tune_alpha(&pointwise, &policy, input.eval) } else { 0.0 };
            let fc = FusionConfig::new(alpha)?;
            let lists: Vec<DistillList> = input
                .window
                .iter()
                .map(|p| {
                    let pw = logits(&pointwise, &p.features);
                    let lw = logits(&policy, &p.features);
                    DistillList {
                        features: p.features.clone(),
                        targets: pw.iter().zip(&lw).map(|(&a, &b)| fuse_targets(a, b, &fc)).collect(),
                    }
                })
                .collect();
            let ensemble = fit_ensemble(&lists, &config.distill)?.ensemble;
            (Serving::Ensemble(ensemble), ServingKind::Ensemble, Some(alpha), None)
        }
        FusionMode::Cascade => {
            let lambda = if flags.use_doc { tune_lambda(&pointwise, &policy, input.eval) } else { 0.0 };
            (Serving::Cascade { lambda }, ServingKind::Cascade, None, Some(lambda))
        }
    };
    Ok(ModelVersion {
        manifest: Manifest {
            version: live.manifest.version + 1,
            parent: Some(live.manifest.version),
            cycle: input.cycle,
            feature_schema_version: FEATURE_SCHEMA_VERSION,
            model_schema_version: MODEL_SCHEMA_VERSION,
            serving: kind,
            flags,
            alpha,
            lambda,
            events: counts,
            ppo: ppo_rows,
        },
        pointwise,
        policy,
        reward,
        serving,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub cycle: usize,
    pub turn: usize,
    pub fired: usize,
    pub candidate: Option<u32>,
    pub decision: Option<ShadowDecision>,
    pub error: Option<String>,
}

/// Streaming nearline state for one serving arm.
pub struct Orchestrator {
    pub config: CycleConfig,
    pub registry: ModelRegistry,
    pub trigger: Trigger,
    seed: u64,
    replay: VecDeque<TurnData>,
    window: VecDeque<FeaturizedPool>,
    eval: VecDeque<EvalItem>,
    turns_seen: usize,
    pub cycles: Vec<CycleRecord>,
}

impl Orchestrator {
    pub fn new(config: CycleConfig, registry: ModelRegistry, seed: u64) -> Result<Self, OrchestratorError> {
        config.validate()?;
        Ok(Self {
            trigger: Trigger::new(config.effective_threshold())?,
            config,
            registry,
            seed,
            replay: VecDeque::new(),
            window: VecDeque::new(),
            eval: VecDeque::new(),
            turns_seen: 0,
            cycles: Vec::new(),
        })
    }

    pub fn live(&self) -> Arc<ModelVersion> {
        self.registry.live()
    }

    pub fn is_held_out(&self, turn_index: usize) -> bool {
        turn_index % self.config.holdout_every == self.config.holdout_every - 1
    }

    pub fn eval_slice(&self) -> Vec<EvalItem> {
        self.eval.iter().cloned().collect()
    }

    /// Feeds one turn. Held-out turns only extend the evaluation slice; others
    /// count towards the trigger and may run one update cycle.
    pub fn observe(&mut self, data: TurnData) -> Result<Option<CycleRecord>, OrchestratorError> {
        let index = self.turns_seen;
        self.turns_seen += 1;
        if self.is_held_out(index) {
            if let Some(u) = data.utilities {
                self.eval.push_back(EvalItem { pool: data.pool, utilities: u });
                while self.eval.len() > self.config.eval_window {
                    self.eval.pop_front();
                }
            }
            return Ok(None);
        }
        let fired = self.trigger.accumulate_many(data.n_events());
        self.window.push_back(data.pool.clone());
        while self.window.len() > self.config.distill_window {
            self.window.pop_front();
        }
        self.replay.push_back(data);
        while self.replay.len() > self.config.train_window {
            self.replay.pop_front();
        }
        if fired == 0 {
            return Ok(None);
        }
        Ok(Some(self.run_cycle(index, fired)?))
    }

    fn run_cycle(&mut self, turn: usize, fired: usize) -> Result<CycleRecord, OrchestratorError> {
        let cycle = self.cycles.len();
        let live = self.registry.live();
        let window: Vec<FeaturizedPool> = self.window.iter().cloned().collect();
        let batch: Vec<TurnData> = self.replay.iter().cloned().collect();
        let eval = self.eval_slice();
        let input = CycleInput {
            cycle,
            seed: self.seed,
            batch: &batch,
            window: &window,
            eval: &eval,
        };
        let mut record = CycleRecord {
            cycle,
            turn,
            fired,
            candidate: None,
            decision: None,
            error: None,
        };
        match update_cycle(&live, &input, &self.config) {
            Ok(candidate) => {
                let v = self.registry.append(candidate)?;
                record.candidate = Some(v);
                record.decision = Some(self.registry.gate(v, &eval, self.config.promote_tolerance)?);
            }
            // a failed cycle leaves the registry untouched
            Err(e) => record.error = Some(e.to_string()),
        }
        self.cycles.push(record.clone());
        Ok(record)
    }
}

// ---------------------------------------------------------------------------
// Experiments

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    AbDrift,
    Ablation,
    Cadence,
    Fusion,
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ab_drift" => Ok(Mode::AbDrift),
            "ablation" => Ok(Mode::Ablation),
            "cadence" => Ok(Mode::Cadence),
            "fusion" => Ok(Mode::Fusion),
            _ => Err(format!("unknown mode {s}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArmKind {
    /// Serves the retriever order forever.
    Frozen,
    Dma { cycle: CycleConfig },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSpec {
    pub name: String,
    pub kind: ArmKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub sessions: u64,
    pub turns_per_session: u64,
    pub corpus: CorpusConfig,
    pub sim: SimConfig,
    pub cycle: CycleConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            sessions: 100,
            turns_per_session: 20,
            corpus: CorpusConfig::default(),
            sim: SimConfig::default(),
            cycle: CycleConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Named arms for a mode; the first arm is the reference.
    pub fn arms(&self, mode: Mode) -> Vec<ArmSpec> {
        let full = self.cycle;
        let with = |f: &dyn Fn(&mut CycleConfig)| {
            let mut c = full;
            f(&mut c);
            ArmKind::Dma { cycle: c }
        };
        let arm = |name: &str, kind| ArmSpec { name: name.into(), kind };
        match mode {
            Mode::AbDrift => vec![arm("nearline", with(&|_| {})), arm("frozen", ArmKind::Frozen)],
            Mode::Ablation => vec![
                arm("full", with(&|_| {})),
                arm("no_doc", with(&|c| c.flags.use_doc = false)),
                arm("no_list", with(&|c| c.flags.use_list = false)),
                arm("no_resp", with(&|c| c.flags.use_resp = false)),
            ],
            Mode::Cadence => vec![
                arm("nearline", with(&|c| c.cadence = Cadence::Nearline)),
                arm("batch", with(&|c| c.cadence = Cadence::Batch { interval: 10 })),
            ],
            Mode::Fusion => vec![
                arm("distill", with(&|c| c.fusion = FusionMode::Distill)),
                arm("cascade", with(&|c| c.fusion = FusionMode::Cascade)),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub name: String,
    pub satisfaction: f64,
    pub ndcg: f64,
    pub mean_utility: f64,
    /// Per-session satisfaction proxy, in session order.
    pub session_satisfaction: Vec<f64>,
    pub cycles: usize,
    pub promotions: usize,
    pub failed_cycles: usize,
    pub ppo_rows: usize,
    pub alphas: Vec<f64>,
}

/// Plays the whole session stream with one arm.
pub fn run_arm(world: &World, spec: &ArmSpec, config: &ExperimentConfig, seed: u64) -> Result<ArmResult, OrchestratorError> {
    let threshold = config.sim.satisfaction_threshold;
    let mut orch = match spec.kind {
        ArmKind::Frozen => None,
        ArmKind::Dma { cycle } => Some(Orchestrator::new(
            cycle,
            ModelRegistry::in_memory(ModelVersion::bootstrap(seed)),
            seed,
        )?),
    };
    let mut session_sat = Vec::with_capacity(config.sessions as usize);
    let (mut sat, mut ndcg, mut util, mut n) = (0.0, 0.0, 0.0, 0usize);
    for s in 0..config.sessions {
        let mut user = world.initial_user(s);
        let mut s_sat = 0.0;
        for j in 0..config.turns_per_session {
            let t = s * config.turns_per_session + j;
            let out = match &orch {
                None => world.step(&mut user, s, j, t, &StaticRanker)?,
                Some(o) => world.step(&mut user, s, j, t, o.live().as_ref())?,
            };
            let ok = out.satisfied(threshold) as u8 as f64;
            s_sat += ok;
            sat += ok;
            ndcg += out.ndcg();
            util += out.list_utility;
            n += 1;
            if let Some(o) = orch.as_mut() {
                let min_conf = o.config.min_confidence;
                o.observe(TurnData::from_outcome(&out, min_conf)?)?;
            }
        }
        session_sat.push(s_sat / config.turns_per_session.max(1) as f64);
    }
    let n = n.max(1) as f64;
    let mut r = ArmResult {
        name: spec.name.clone(),
        satisfaction: sat / n,
        ndcg: ndcg / n,
        mean_utility: util / n,
        session_satisfaction: session_sat,
        cycles: 0,
        promotions: 0,
        failed_cycles: 0,
        ppo_rows: 0,
        alphas: Vec::new(),
    };
    if let Some(o) = orch {
        r.cycles = o.cycles.len();
        r.failed_cycles = o.cycles.iter().filter(|c| c.error.is_some()).count();
        r.promotions = o.registry.decisions.iter().filter(|d| d.promote).count();
        for c in &o.cycles {
            if let Some(v) = c.candidate.and_then(|v| o.registry.get(v)) {
                r.ppo_rows += v.manifest.ppo.len();
                if let Some(a) = v.manifest.alpha.or(v.manifest.lambda) {
                    r.alphas.push(a);
                }
            }
        }
    }
    Ok(r)
}

/// Two-sided exact sign test p-value for `pos` successes out of `pos + neg`.
pub fn sign_test_p(pos: usize, neg: usize) -> f64 {
    let n = pos + neg;
    if n == 0 {
        return 1.0;
    }
    let k = pos.min(neg);
    let mut log_pmf = -(n as f64) * std::f64::consts::LN_2;
    let mut tail = 0.0;
    for i in 0..=k {
        tail += log_pmf.exp();
        log_pmf += ((n - i) as f64).ln() - ((i + 1) as f64).ln();
    }
    (2.0 * tail).min(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub treatment: String,
    pub reference: String,
    pub delta_satisfaction: f64,
    pub delta_ndcg: f64,
    /// Per-session paired satisfaction differences, treatment minus reference.
    pub session_deltas: Vec<f64>,
    pub sessions_better: usize,
    pub sessions_worse: usize,
    pub sign_test_p: f64,
}

pub fn compare(treatment: &ArmResult, reference: &ArmResult) -> Comparison {
    let deltas: Vec<f64> = treatment
        .session_satisfaction
        .iter()
        .zip(&reference.session_satisfaction)
        .map(|(a, b)| a - b)
        .collect();
    let better = deltas.iter().filter(|&&d| d > 0.0).count();
    let worse = deltas.iter().filter(|&&d| d < 0.0).count();
    Comparison {
        treatment: treatment.name.clone(),
        reference: reference.name.clone(),
        delta_satisfaction: treatment.satisfaction - reference.satisfaction,
        delta_ndcg: treatment.ndcg - reference.ndcg,
        session_deltas: deltas,
        sessions_better: better,
        sessions_worse: worse,
        sign_test_p: sign_test_p(better, worse),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub mode: Mode,
    pub seed: u64,
    pub arms: Vec<ArmResult>,
    /// The reference arm against every other arm.
    pub comparisons: Vec<Comparison>,
}

pub fn build_world(config: &ExperimentConfig, seed: u64) -> Result<World, OrchestratorError> {
    let corpus = crate::simulator::gen_corpus(&config.corpus, derive_indexed(seed, "corpus", 0, 0))?;
    Ok(World::new(corpus, config.sim, seed)?)
}

/// Runs the paired arms of `mode` on one shared world.
pub fn run_experiment(mode: Mode, config: &ExperimentConfig, seed: u64) -> Result<ExperimentReport, OrchestratorError> {
    let world = build_world(config, seed)?;
    let arms = config
        .arms(mode)
        .iter()
        .map(|a| run_arm(&world, a, config, seed))
        .collect::<Result<Vec<_>, _>>()?;
    let comparisons = arms[1..].iter().map(|b| compare(&arms[0], b)).collect();
    Ok(ExperimentReport { mode, seed, arms, comparisons })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::gen_corpus;

    #[test]
    fn trigger_arithmetic() {
        let mut t = Trigger::new(500).unwrap();
        assert_eq!(t.accumulate_many(499), 0);
        let mut t = Trigger::new(500).unwrap();
        assert_eq!(t.accumulate_many(1050), 2);
        assert_eq!(t.counter, 50);
        let mut t = Trigger::new(1).unwrap();
        assert!((0..20).all(|_| t.accumulate()));
        assert!(Trigger::new(0).is_err());
    }

    #[test]
    fn sign_test_values() {
        assert_eq!(sign_test_p(0, 0), 1.0);
        assert!((sign_test_p(5, 5) - 1.0).abs() < 1e-12);
        // P(X <= 0) for n = 5 is 1/32, two-sided 1/16
        assert!((sign_test_p(5, 0) - 0.0625).abs() < 1e-12);
        // n = 10, k = 2: (1 + 10 + 45) / 1024, doubled
        assert!((sign_test_p(8, 2) - 112.0 / 1024.0).abs() < 1e-12);
    }

    fn small_config() -> ExperimentConfig {
        ExperimentConfig {
            sessions: 12,
            turns_per_session: 10,
            corpus: CorpusConfig { n_docs: 200, ..Default::default() },
            cycle: CycleConfig {
                threshold: 100,
                distill: DistillConfig { trees: 20, ..Default::default() },
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn fixture_turns(n: u64, seed: u64) -> (Vec<TurnData>, Vec<EvalItem>) {
        let world = build_world(&small_config(), seed).unwrap();
        let outs = world.run(1, n, &StaticRanker).unwrap();
        let data: Vec<TurnData> = outs.iter().map(|o| TurnData::from_outcome(o, 0.5).unwrap()).collect();
        let eval = outs
            .iter()
            .map(|o| EvalItem { pool: o.features.clone(), utilities: o.utilities.clone() })
            .collect();
        (data, eval)
    }

    fn run_fixture_cycle(config: &CycleConfig) -> (ModelVersion, ModelVersion) {
        let (data, eval) = fixture_turns(30, 3);
        let window: Vec<FeaturizedPool> = data.iter().map(|d| d.pool.clone()).collect();
        let live = ModelVersion::bootstrap(3);
        let input = CycleInput { cycle: 0, seed: 3, batch: &data, window: &window, eval: &eval };
        let cand = update_cycle(&live, &input, config).unwrap();
        (live, cand)
    }

    #[test]
    fn happy_path_cycle_produces_all_artifacts() {
        let cfg = CycleConfig { distill: DistillConfig { trees: 10, ..Default::default() }, ..Default::default() };
        let (live, cand) = run_fixture_cycle(&cfg);
        assert!(matches!(cand.serving, Serving::Ensemble(_)));
        assert_ne!(cand.pointwise, live.pointwise);
        assert_ne!(cand.reward, live.reward);
        assert_eq!(cand.manifest.ppo.len(), cfg.ppo_rounds);
        assert!(cand.manifest.alpha.is_some());
        assert_eq!(cand.manifest.parent, Some(0));
    }

    #[test]
    fn no_resp_skips_ppo() {
        let mut cfg = CycleConfig { distill: DistillConfig { trees: 10, ..Default::default() }, ..Default::default() };
        cfg.flags.use_resp = false;
        let (data, eval) = fixture_turns(30, 3);
        let window: Vec<FeaturizedPool> = data.iter().map(|d| d.pool.clone()).collect();
        let live = ModelVersion::bootstrap(3);
        let input = CycleInput { cycle: 0, seed: 3, batch: &data, window: &window, eval: &eval };
        let cand = update_cycle(&live, &input, &cfg).unwrap();
        let lists: Vec<ListExample> = data.iter().flat_map(|t| t.lists.iter().cloned()).collect();
        let lw_cfg = TrainConfig { seed: derive_indexed(3, "listwise", 0, 0), ..cfg.listwise };
        let listnet_only = sgd_fit(live.policy.clone(), &ListNet, &lists, &lw_cfg).unwrap().model;
        assert_eq!(cand.policy.params(), listnet_only.params());
        assert!(cand.manifest.ppo.is_empty());
        assert_eq!(cand.reward, live.reward);
    }

    #[test]
    fn no_doc_fuses_policy_only() {
        let mut cfg = CycleConfig { distill: DistillConfig { trees: 0, ..Default::default() }, ..Default::default() };
        cfg.flags.use_doc = false;
        let (live, cand) = run_fixture_cycle(&cfg);
        assert_eq!(cand.manifest.alpha, Some(0.0));
        assert_eq!(cand.pointwise, live.pointwise);
        // with zero trees the student is the Huber-optimal constant of σ(g)
        let (data, _) = fixture_turns(30, 3);
        let targets: Vec<f64> = data
            .iter()
            .flat_map(|d| logits(&cand.policy, &d.pool.features))
            .map(crate::math::sigmoid)
            .collect();
        let fused: Vec<f64> = data
            .iter()
            .flat_map(|d| {
                let pw = logits(&cand.pointwise, &d.pool.features);
                let lw = logits(&cand.policy, &d.pool.features);
                pw.into_iter().zip(lw).map(|(a, b)| fuse_targets(a, b, &FusionConfig::new(0.0).unwrap())).collect::<Vec<_>>()
            })
            .collect();
        assert_eq!(targets, fused);
        let Serving::Ensemble(e) = &cand.serving else { panic!("expected ensemble") };
        let init = crate::distill::huber_optimal_constant(&targets, cfg.distill.huber_delta);
        assert!((e.init - init).abs() < 1e-9);
    }

    #[test]
    fn no_list_reinitializes_policy() {
        let mut cfg = CycleConfig { distill: DistillConfig { trees: 5, ..Default::default() }, ..Default::default() };
        cfg.flags.use_list = false;
        cfg.flags.use_resp = false;
        let (_, cand) = run_fixture_cycle(&cfg);
        let mut rng = rng_indexed(3, "policy-init", 0, 0);
        let fresh = ScorerModel::random(Arch::Linear, FEATURE_DIM, &mut rng);
        assert_eq!(cand.policy, fresh);
    }

    #[test]
    fn cycle_without_events_fails() {
        let mut cfg = CycleConfig::default();
        cfg.flags = AblationFlags { use_doc: true, use_list: false, use_resp: false };
        let live = ModelVersion::bootstrap(1);
        let input = CycleInput { cycle: 0, seed: 1, batch: &[], window: &[], eval: &[] };
        assert!(matches!(update_cycle(&live, &input, &cfg), Err(OrchestratorError::NoEvents)));
    }

    #[test]
    fn shadow_eval_cases() {
        let (_, eval) = fixture_turns(10, 4);
        let live = ModelVersion::bootstrap(4);
        let same = shadow_eval(&live, &live, &eval, 0.005);
        assert!(same.promote);
        assert_eq!(same.delta, 0.0);
        let empty = shadow_eval(&live, &live, &[], 0.005);
        assert!(!empty.promote);

        // a candidate that reverses the retriever order
        let mut worse = live.clone();
        worse.serving = Serving::Cascade { lambda: 1.0 };
        let mut w = vec![0.0; FEATURE_DIM + 1];
        w[0] = -1.0;
        worse.pointwise = ScorerModel::from_params(Arch::Linear, FEATURE_DIM, w).unwrap();
        let d = shadow_eval(&worse, &live, &eval, 0.005);
        let independent = |sign: f64| {
            let mut total = 0.0;
            for e in &eval {
                let mut idx: Vec<usize> = (0..e.pool.len()).collect();
                idx.sort_by(|&a, &b| (sign * e.pool.features[b].0[0]).partial_cmp(&(sign * e.pool.features[a].0[0])).unwrap());
                let served: Vec<f64> = idx[..5].iter().map(|&i| e.utilities[i]).collect();
                total += ndcg_at(&served, &e.utilities, 5);
            }
            total / eval.len() as f64
        };
        assert!((d.live_ndcg - independent(1.0)).abs() < 1e-12);
        assert!((d.candidate_ndcg - independent(-1.0)).abs() < 1e-12);
        assert_eq!(d.promote, d.delta >= -0.005);
        assert!(!d.promote);
    }

    #[test]
    fn registry_is_append_only_and_persists() {
        let dir = tempfile::tempdir().unwrap();
        let mut reg = ModelRegistry::open(dir.path(), ModelVersion::bootstrap(5)).unwrap();
        assert_eq!(reg.len(), 1);
        let (_, mut cand) = run_fixture_cycle(&CycleConfig { distill: DistillConfig { trees: 3, ..Default::default() }, ..Default::default() });
        cand.manifest.version = 99;
        let snapshot = reg.live();
        let v = reg.append(cand).unwrap();
        assert_eq!(v, 1);
        assert_eq!(reg.live_version(), 0);
        for f in ["pointwise", "policy", "reward", "ensemble", "manifest"] {
            assert!(dir.path().join(format!("v1/{f}.json")).exists(), "{f}");
        }
        let (_, eval) = fixture_turns(10, 4);
        reg.gate(1, &eval, 1.0).unwrap();
        assert_eq!(reg.live_version(), 1);
        assert_eq!(snapshot.manifest.version, 0);
        let reopened = ModelRegistry::open(dir.path(), ModelVersion::bootstrap(5)).unwrap();
        assert_eq!(reopened.len(), 2);
        assert_eq!(reopened.live_version(), 1);
        assert_eq!(*reopened.live(), *reg.live());
    }

    #[test]
    fn identical_arms_have_zero_deltas() {
        let cfg = small_config();
        let world = build_world(&cfg, 6).unwrap();
        let spec = &cfg.arms(Mode::AbDrift)[0];
        let a = run_arm(&world, spec, &cfg, 6).unwrap();
        let b = run_arm(&world, spec, &cfg, 6).unwrap();
        let c = compare(&a, &b);
        assert_eq!(c.delta_satisfaction, 0.0);
        assert_eq!(c.delta_ndcg, 0.0);
        assert!(c.session_deltas.iter().all(|&d| d == 0.0));
        assert!(a.cycles > 0);
    }

    #[test]
    fn nearline_fires_at_least_as_often_as_batch() {
        let cfg = small_config();
        let r = run_experiment(Mode::Cadence, &cfg, 7).unwrap();
        assert!(r.arms[0].cycles >= r.arms[1].cycles);
    }

    #[test]
    fn corpus_from_experiment_seed_is_stable() {
        let cfg = small_config();
        let a = gen_corpus(&cfg.corpus, derive_indexed(9, "corpus", 0, 0)).unwrap();
        let b = build_world(&cfg, 9).unwrap();
        assert_eq!(a.docs(), b.corpus.docs());
    }
}
