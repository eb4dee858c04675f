//! Synthetic corpus, drifting users and the three feedback channels.
//!
//! A user's latent intent random-walks on the unit sphere and occasionally
//! jumps to a new topic. The oracle utility of a document mixes the intent
//! dot product, a same-topic bonus and a population-wide preference for
//! fresh content whose weight drifts sinusoidally over simulation time. Every
//! turn draws from two per-turn streams (user dynamics and feedback) keyed by
//! `(seed, session, turn)`, so arms that serve different lists still see the
//! same users, queries and uniform draws.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::featurize::{Corpus, Doc, FeatureError, FeaturizedPool, Query};
use crate::feedback::{AttachedEvents, DocFeedback, DocId, ListFeedback, QueryId, ResponsePreference, Turn};
use crate::math::{argsort_desc, dot, mean_std, normalize, position_discount, sigmoid};
use crate::seed::{rng_for, rng_indexed};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("pool size {k} exceeds corpus size {n}")]
    PoolTooLarge { k: usize, n: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub n_docs: usize,
    pub n_topics: usize,
    pub dim: usize,
    /// Norm of the within-topic embedding noise before renormalization.
    pub topic_spread: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_docs: 400,
            n_topics: 4,
            dim: crate::featurize::DEFAULT_EMBEDDING_DIM,
            topic_spread: 0.8,
        }
    }
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn gaussian_vec<R: Rng + ?Sized>(dim: usize, std: f64, rng: &mut R) -> Vec<f64> {
    (0..dim)
        .map(|_| std * normal(rng))
        .collect()
}

/// Unit-norm embeddings clustered around random topic centroids; topics are
/// assigned round-robin.
pub fn gen_corpus(config: &CorpusConfig, seed: u64) -> Result<Corpus, SimError> {
    if config.n_docs == 0 || config.n_topics == 0 || config.dim == 0 {
        return Err(SimError::Config("n_docs, n_topics and dim must be positive".into()));
    }
    let mut rng = rng_for(seed, "corpus");
    let centroids: Vec<Vec<f64>> = (0..config.n_topics)
        .map(|_| {
            let mut c = gaussian_vec(config.dim, 1.0, &mut rng);
            normalize(&mut c);
            c
        })
        .collect();
    let noise_std = config.topic_spread / (config.dim as f64).sqrt();
    let docs = (0..config.n_docs)
        .map(|i| {
            let topic = i % config.n_topics;
            let noise = gaussian_vec(config.dim, noise_std, &mut rng);
            let mut e: Vec<f64> = centroids[topic].iter().zip(&noise).map(|(c, n)| c + n).collect();
            normalize(&mut e);
            Doc {
                id: DocId(i as u64),
                embedding: e,
                topic: topic as u32,
                freshness: rng.random::<f64>(),
            }
        })
        .collect();
    Ok(Corpus::new(docs)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UserConfig {
    /// Norm of the per-turn random-walk step.
    pub drift: f64,
    pub jump_prob: f64,
    /// Norm of the offset between a fresh intent and its topic centroid.
    pub intent_spread: f64,
}

impl Default for UserConfig {
    fn default() -> Self {
        Self {
            drift: 0.02,
            jump_prob: 0.01,
            intent_spread: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentUser {
    pub intent: Vec<f64>,
    pub topic: u32,
}

impl LatentUser {
    pub fn sample<R: Rng + ?Sized>(centroids: &[Vec<f64>], config: &UserConfig, rng: &mut R) -> Self {
        let topic = rng.random_range(0..centroids.len());
        let c = &centroids[topic];
        let noise = gaussian_vec(c.len(), config.intent_spread / (c.len() as f64).sqrt(), rng);
        let mut intent: Vec<f64> = c.iter().zip(&noise).map(|(a, b)| a + b).collect();
        normalize(&mut intent);
        Self {
            intent,
            topic: topic as u32,
        }
    }

    /// One turn of drift, or a jump to a freshly sampled intent.
    pub fn step<R: Rng + ?Sized>(&mut self, centroids: &[Vec<f64>], config: &UserConfig, rng: &mut R) {
        if rng.random::<f64>() < config.jump_prob {
            *self = Self::sample(centroids, config, rng);
            return;
        }
        let d = self.intent.len();
        let noise = gaussian_vec(d, config.drift / (d as f64).sqrt(), rng);
        self.intent.iter_mut().zip(&noise).for_each(|(x, n)| *x += n);
        normalize(&mut self.intent);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UtilityConfig {
    /// Multiplies every utility.
    pub scale: f64,
    pub topic_bonus: f64,
    /// Subtracted before scaling so typical pool items straddle zero.
    pub offset: f64,
    /// Constant part of the population freshness preference.
    pub freshness_base: f64,
    /// Peak deviation of the freshness preference around its base.
    pub freshness_amplitude: f64,
    /// Period of the freshness preference, in global turns.
    pub freshness_period: f64,
}

impl Default for UtilityConfig {
    fn default() -> Self {
        Self {
            scale: 10.0,
            topic_bonus: 0.2,
            offset: 1.05,
            freshness_base: 0.3,
            freshness_amplitude: 0.2,
            freshness_period: 1200.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    pub flip_prob: f64,
    pub list_sigma: f64,
    pub pref_temperature: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.1,
            list_sigma: 0.1,
            pref_temperature: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub pool_size: usize,
    pub served: usize,
    /// Norm of the query noise.
    pub query_noise: f64,
    /// Click logit is `utility · click_scale`; infinity thresholds at zero.
    pub click_scale: f64,
    /// Noise added to the standardized ranker scores for the second list.
    pub perturbation: f64,
    pub satisfaction_threshold: f64,
    /// Also emit a list score for the perturbed list.
    pub rate_alternative: bool,
    /// Scale click probabilities by the examination propensity of the served
    /// position, `1 / log2(1 + rank)`.
    pub position_bias: bool,
    pub user: UserConfig,
    pub utility: UtilityConfig,
    pub noise: NoiseConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            pool_size: 20,
            served: 5,
            query_noise: 0.1,
            click_scale: 0.4,
            perturbation: 1.0,
            satisfaction_threshold: 0.375,
            rate_alternative: true,
            position_bias: false,
            user: UserConfig::default(),
            utility: UtilityConfig::default(),
            noise: NoiseConfig::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let n = &self.noise;
        if !(0.0..=1.0).contains(&n.flip_prob) || !(0.0..=1.0).contains(&self.user.jump_prob) {
            return Err(SimError::Config("probabilities must lie in [0,1]".into()));
        }
        if !(n.list_sigma >= 0.0) || !(n.pref_temperature > 0.0) {
            return Err(SimError::Config("list sigma must be >= 0 and temperature > 0".into()));
        }
        if self.pool_size == 0 || self.served == 0 || self.served > self.pool_size {
            return Err(SimError::Config("need 1 <= served <= pool_size".into()));
        }
        if !(self.click_scale > 0.0) || !(self.query_noise >= 0.0) || !(self.user.drift >= 0.0) {
            return Err(SimError::Config("click scale must be positive, noise and drift non-negative".into()));
        }
        Ok(())
    }
}

/// Population freshness weight at global turn `t`.
pub fn freshness_preference(config: &UtilityConfig, t: u64, phase: f64) -> f64 {
    if config.freshness_period <= 0.0 {
        return config.freshness_base + config.freshness_amplitude * phase.sin();
    }
    let w = std::f64::consts::TAU * t as f64 / config.freshness_period;
    config.freshness_base + config.freshness_amplitude * (w + phase).sin()
}

/// Oracle utility of one document for a user at time `t`.
pub fn item_utility(config: &UtilityConfig, user: &LatentUser, doc: &Doc, freshness_weight: f64) -> f64 {
    let bonus = if doc.topic == user.topic { config.topic_bonus } else { 0.0 };
    config.scale * (dot(&user.intent, &doc.embedding) + bonus + freshness_weight * (doc.freshness - 0.5) - config.offset)
}

/// `U(D) = Σ_j δ_j u_j` over a served list.
pub fn list_utility(utilities_in_order: &[f64]) -> f64 {
    utilities_in_order
        .iter()
        .enumerate()
        .map(|(j, u)| position_discount(j + 1) * u)
        .sum()
}

/// Bradley–Terry preference probability for list A.
pub fn preference_prob(u_a: f64, u_b: f64, temperature: f64) -> f64 {
    sigmoid((u_a - u_b) / temperature)
}

/// Anything that scores a featurized pool. The oracle utilities are passed
/// along so an oracle ranker can exist; learned rankers ignore them.
pub trait Ranker {
    fn scores(&self, pool: &FeaturizedPool, utilities: &[f64]) -> Vec<f64>;
}

/// Serves the retriever's dot-product order.
#[derive(Debug, Clone, Copy, Default)]
pub struct StaticRanker;

impl Ranker for StaticRanker {
    fn scores(&self, pool: &FeaturizedPool, _: &[f64]) -> Vec<f64> {
        pool.features.iter().map(|f| f.dot()).collect()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct OracleRanker;

impl Ranker for OracleRanker {
    fn scores(&self, _: &FeaturizedPool, utilities: &[f64]) -> Vec<f64> {
        utilities.to_vec()
    }
}

impl Ranker for crate::distill::TreeEnsemble {
    fn scores(&self, pool: &FeaturizedPool, _: &[f64]) -> Vec<f64> {
        pool.features.iter().map(|f| self.predict(&f.0)).collect()
    }
}

/// Everything one turn produced.
#[derive(Debug, Clone)]
pub struct TurnOutcome {
    pub session: u64,
    pub turn: Turn,
    pub features: FeaturizedPool,
    /// Oracle utility per pool entry.
    pub utilities: Vec<f64>,
    /// Pool indices in serving order.
    pub served_idx: Vec<usize>,
    pub alt_idx: Vec<usize>,
    pub list_utility: f64,
    pub docs: Vec<DocFeedback>,
    pub lists: Vec<ListFeedback>,
    pub pref: ResponsePreference,
}

impl TurnOutcome {
    pub fn satisfied(&self, threshold: f64) -> bool {
        self.list_utility >= threshold
    }

    pub fn ndcg(&self) -> f64 {
        let served: Vec<f64> = self.served_idx.iter().map(|&i| self.utilities[i]).collect();
        ndcg_at(&served, &self.utilities, self.served_idx.len())
    }

    pub fn n_feedback(&self) -> usize {
        self.docs.len() + self.lists.len() + 1
    }
}

/// The fixed part of a simulation: corpus, topic centroids, config and seed.
#[derive(Debug, Clone)]
pub struct World {
    pub corpus: Corpus,
    pub centroids: Vec<Vec<f64>>,
    pub config: SimConfig,
    pub seed: u64,
    pub phase: f64,
}

fn top_m(scores: &[f64], m: usize) -> Vec<usize> {
    let mut order = argsort_desc(scores);
    order.truncate(m);
    order
}

impl World {
    pub fn new(corpus: Corpus, config: SimConfig, seed: u64) -> Result<Self, SimError> {
        config.validate()?;
        if config.pool_size > corpus.len() {
            return Err(SimError::PoolTooLarge {
                k: config.pool_size,
                n: corpus.len(),
            });
        }
        let centroids = corpus.topic_centroids();
        let phase = rng_for(seed, "freshness-phase").random::<f64>() * std::f64::consts::TAU;
        Ok(Self {
            corpus,
            centroids,
            config,
            seed,
            phase,
        })
    }

    pub fn initial_user(&self, session: u64) -> LatentUser {
        let mut rng = rng_indexed(self.seed, "user-init", session, 0);
        LatentUser::sample(&self.centroids, &self.config.user, &mut rng)
    }

    pub fn freshness_weight(&self, t: u64) -> f64 {
        freshness_preference(&self.config.utility, t, self.phase)
    }

    /// Top-`k` documents by dot product with the query, ties by corpus order.
    pub fn retrieve(&self, query: &[f64]) -> Vec<&Doc> {
        let docs = self.corpus.docs();
        let scores: Vec<f64> = docs.iter().map(|d| dot(query, &d.embedding)).collect();
        top_m(&scores, self.config.pool_size).into_iter().map(|i| &docs[i]).collect()
    }

    /// Plays one turn: query, retrieval, serving, feedback, then user drift.
    pub fn step(
        &self,
        user: &mut LatentUser,
        session: u64,
        turn: u64,
        t_global: u64,
        ranker: &dyn Ranker,
    ) -> Result<TurnOutcome, SimError> {
        let cfg = &self.config;
        let mut user_rng = rng_indexed(self.seed, "user", session, turn);
        let mut fb_rng = rng_indexed(self.seed, "feedback", session, turn);
        let d = user.intent.len();
        let qn = gaussian_vec(d, cfg.query_noise / (d as f64).sqrt(), &mut user_rng);
        let q: Vec<f64> = user.intent.iter().zip(&qn).map(|(a, b)| a + b).collect();
        let pool = self.retrieve(&q);
        let w_f = self.freshness_weight(t_global);
        let utilities: Vec<f64> = pool.iter().map(|doc| item_utility(&cfg.utility, user, doc, w_f)).collect();
        let query = Query {
            embedding: q,
            topic: Some(user.topic),
        };
        let features = FeaturizedPool::build(&query, &pool)?;

        let scores = ranker.scores(&features, &utilities);
        let served_idx = top_m(&scores, cfg.served);
        let served_u: Vec<f64> = served_idx.iter().map(|&i| utilities[i]).collect();
        let u_a = list_utility(&served_u);

        let (mu, sd) = mean_std(&scores);
        let sd = if sd > 0.0 { sd } else { 1.0 };
        let noisy: Vec<f64> = scores
            .iter()
            .map(|s| (s - mu) / sd + cfg.perturbation * normal(&mut fb_rng))
            .collect();
        let alt_idx = top_m(&noisy, cfg.served);
        let u_b = list_utility(&alt_idx.iter().map(|&i| utilities[i]).collect::<Vec<_>>());

        let qid = QueryId(t_global);
        let ids = |idx: &[usize]| idx.iter().map(|&i| pool[i].id).collect::<Vec<_>>();
        let docs = served_idx
            .iter()
            .enumerate()
            .map(|(j, &i)| {
                let u = utilities[i];
                let mut p = if cfg.click_scale.is_infinite() {
                    if u > 0.0 { 1.0 } else { 0.0 }
                } else {
                    sigmoid(u * cfg.click_scale)
                };
                if cfg.position_bias {
                    p *= position_discount(j + 1);
                }
                let click = fb_rng.random::<f64>() < p;
                let flip = fb_rng.random::<f64>() < cfg.noise.flip_prob;
                DocFeedback {
                    session,
                    query: qid,
                    doc: pool[i].id,
                    label: click != flip,
                    confidence: 1.0 - cfg.noise.flip_prob,
                }
            })
            .collect();
        let mut lists = vec![ListFeedback {
            session,
            query: qid,
            pool: ids(&served_idx),
            list_score: u_a + cfg.noise.list_sigma * normal(&mut fb_rng),
            item_weights: None,
            soft_targets: None,
        }];
        let alt_score = u_b + cfg.noise.list_sigma * normal(&mut fb_rng);
        if cfg.rate_alternative {
            lists.push(ListFeedback {
                session,
                query: qid,
                pool: ids(&alt_idx),
                list_score: alt_score,
                item_weights: None,
                soft_targets: None,
            });
        }
        let p_a = preference_prob(u_a, u_b, cfg.noise.pref_temperature);
        let pref = ResponsePreference {
            session,
            query: qid,
            list_a: ids(&served_idx),
            list_b: ids(&alt_idx),
            preferred_a: fb_rng.random::<f64>() < p_a,
        };

        user.step(&self.centroids, &cfg.user, &mut user_rng);
        Ok(TurnOutcome {
            session,
            turn: Turn {
                query: qid,
                pool: ids(&(0..pool.len()).collect::<Vec<_>>()),
                served: ids(&served_idx),
                satisfaction: u_a,
                query_embedding: Some(query.embedding),
                query_topic: query.topic,
                utilities: Some(utilities.clone()),
                events: AttachedEvents::default(),
            },
            features,
            utilities,
            served_idx,
            alt_idx,
            list_utility: u_a,
            docs,
            lists,
            pref,
        })
    }

    /// Runs `sessions × turns` turns in session-major order with one ranker.
    pub fn run(&self, sessions: u64, turns: u64, ranker: &dyn Ranker) -> Result<Vec<TurnOutcome>, SimError> {
        let mut out = Vec::with_capacity((sessions * turns) as usize);
        for s in 0..sessions {
            let mut user = self.initial_user(s);
            for j in 0..turns {
                out.push(self.step(&mut user, s, j, s * turns + j, ranker)?);
            }
        }
        Ok(out)
    }
}

/// NDCG over the first `m` served items. Gains are utilities shifted by the
/// pool minimum so they are non-negative; a pool with no spread scores 1.
pub fn ndcg_at(served_utilities: &[f64], pool_utilities: &[f64], m: usize) -> f64 {
    let floor = pool_utilities.iter().copied().fold(f64::INFINITY, f64::min);
    let dcg = |us: &[f64]| {
        us.iter()
            .take(m)
            .enumerate()
            .map(|(j, u)| (u - floor) * position_discount(j + 1))
            .sum::<f64>()
    };
    let mut ideal = pool_utilities.to_vec();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let idcg = dcg(&ideal);
    if idcg <= 0.0 {
        return 1.0;
    }
    dcg(served_utilities) / idcg
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub turns: usize,
    pub ndcg: f64,
    pub mean_utility: f64,
    pub satisfaction: f64,
}

/// Offline metrics over traced turns that carry oracle utilities.
pub fn evaluate<'a, I>(turns: I, m: usize, threshold: f64) -> EvalMetrics
where
    I: IntoIterator<Item = &'a Turn>,
{
    let mut out = EvalMetrics::default();
    for t in turns {
        let Some(util) = &t.utilities else { continue };
        let served: Vec<f64> = t
            .served
            .iter()
            .filter_map(|d| t.pool.iter().position(|p| p == d).map(|i| util[i]))
            .collect();
        let u = list_utility(&served);
        out.turns += 1;
        out.ndcg += ndcg_at(&served, util, m);
        out.mean_utility += u;
        out.satisfaction += (u >= threshold) as u8 as f64;
    }
    if out.turns > 0 {
        let n = out.turns as f64;
        out.ndcg /= n;
        out.mean_utility /= n;
        out.satisfaction /= n;
    }
    out
}
