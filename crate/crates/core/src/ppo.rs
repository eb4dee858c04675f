//! PPO alignment of the Plackett–Luce policy against a list reward model.
//!
//! Episodes are single-step: one sampled list per draw. The ratio uses the
//! probability of the served top-`m` prefix. The KL penalty is a Monte Carlo
//! estimate over fresh samples from the pre-update policy using the
//! non-negative `(r − 1) − ln r` estimator, and each epoch takes one
//! backtracked gradient step that never increases the frozen-batch loss.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::featurize::{FeatureError, FeaturizedPool};
use crate::math::mean_std;
use crate::policy::{PlPolicy, PolicyError};
use crate::scorers::RewardModel;

const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum PpoError {
    #[error("non-finite probability ratio at episode {episode}")]
    NanRatio { episode: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("no queries to align on")]
    NoQueries,
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub clip_eps: f64,
    pub kl_coef: f64,
    pub epochs: usize,
    pub samples_per_query: usize,
    pub baseline_decay: f64,
    pub learning_rate: f64,
    /// Step halvings tried before an epoch gives up on moving.
    pub max_backtracks: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            kl_coef: 0.01,
            epochs: 4,
            samples_per_query: 8,
            baseline_decay: 0.9,
            learning_rate: 0.5,
            max_backtracks: 30,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), PpoError> {
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(PpoError::Config("clip epsilon must be in (0,1)".into()));
        }
        if !(self.kl_coef >= 0.0) {
            return Err(PpoError::Config("KL coefficient must be non-negative".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(PpoError::Config("learning rate must be positive".into()));
        }
        if self.samples_per_query == 0 {
            return Err(PpoError::Config("samples per query must be at least 1".into()));
        }
        Ok(())
    }
}

/// One sampled list for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    /// Index of the query's pool in the batch.
    pub query: usize,
    pub prefix: Vec<usize>,
    /// Prefix log-probability under the sampling policy, frozen at sampling time.
    pub old_logprob: f64,
    pub reward: f64,
    pub advantage: f64,
}

/// A draw from the pre-update policy used only for the KL estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct KlSample {
    pub query: usize,
    pub prefix: Vec<usize>,
    pub old_logprob: f64,
}

/// Exponentially decayed running mean of rewards.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Baseline {
    pub value: f64,
}

/// Sets `advantage = ((r − b) − mean(r − b)) / max(std(r − b), 1e-6)` and
/// then folds the batch mean reward into the baseline.
pub fn compute_advantages(episodes: &mut [Episode], baseline: &mut Baseline, decay: f64) {
    if episodes.is_empty() {
        return;
    }
    let centered: Vec<f64> = episodes.iter().map(|e| e.reward - baseline.value).collect();
    let (mean, std) = mean_std(&centered);
    let scale = std.max(STD_FLOOR);
    for (e, c) in episodes.iter_mut().zip(&centered) {
        e.advantage = (c - mean) / scale;
    }
    let mean_reward = episodes.iter().map(|e| e.reward).sum::<f64>() / episodes.len() as f64;
    baseline.value = decay * baseline.value + (1.0 - decay) * mean_reward;
}

/// `min(ρ Â, clip(ρ, 1 − ε, 1 + ε) Â)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, eps: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - eps, 1.0 + eps) * advantage)
}

/// Surrogate computed from log-probabilities.
pub fn surrogate_from_logprobs(new_lp: f64, old_lp: f64, advantage: f64, eps: f64) -> f64 {
    clipped_surrogate((new_lp - old_lp).exp(), advantage, eps)
}

/// A frozen batch of episodes over a set of query pools.
#[derive(Debug, Clone)]
pub struct PpoBatch<'a> {
    pub pools: &'a [FeaturizedPool],
    pub episodes: Vec<Episode>,
    pub kl_samples: Vec<KlSample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PpoDiagnostics {
    pub loss: f64,
    pub surrogate: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub kl: f64,
}

/// PPO loss `−mean(surrogate) + β · KL̂` and its parameter gradient.
pub fn ppo_loss(
    policy: &PlPolicy,
    batch: &PpoBatch<'_>,
    config: &PpoConfig,
) -> Result<(f64, Vec<f64>, PpoDiagnostics), PpoError> {
    let p = policy.model.param_count();
    let mut grad = vec![0.0; p];
    let eps = config.clip_eps;
    let n = batch.episodes.len().max(1) as f64;
    let mut surrogate = 0.0;
    let mut ratio_sum = 0.0;
    let mut clipped = 0usize;
    let mut scratch = vec![0.0; p];
    for (idx, e) in batch.episodes.iter().enumerate() {
        let pool = &batch.pools[e.query].features;
        scratch.iter_mut().for_each(|g| *g = 0.0);
        let lp = policy.logprob_and_grad(pool, &e.prefix, 1.0, &mut scratch)?;
        let ratio = (lp - e.old_logprob).exp();
        if !ratio.is_finite() {
            return Err(PpoError::NanRatio { episode: idx });
        }
        ratio_sum += ratio;
        let unclipped = ratio * e.advantage;
        let clip = ratio.clamp(1.0 - eps, 1.0 + eps) * e.advantage;
        surrogate += unclipped.min(clip);
        if unclipped <= clip {
            // d(ρÂ)/dθ = Â ρ ∇lp, loss carries a minus sign
            let up = -e.advantage * ratio / n;
            for (g, s) in grad.iter_mut().zip(&scratch) {
                *g += up * s;
            }
        } else {
            clipped += 1;
        }
    }
    let mut kl = 0.0;
    if !batch.kl_samples.is_empty() {
        let nk = batch.kl_samples.len() as f64;
        for s in &batch.kl_samples {
            let pool = &batch.pools[s.query].features;
            scratch.iter_mut().for_each(|g| *g = 0.0);
            let lp = policy.logprob_and_grad(pool, &s.prefix, 1.0, &mut scratch)?;
            let log_r = lp - s.old_logprob;
            let r = log_r.exp();
            kl += (r - 1.0) - log_r;
            if config.kl_coef > 0.0 {
                let up = config.kl_coef * (r - 1.0) / nk;
                for (g, x) in grad.iter_mut().zip(&scratch) {
                    *g += up * x;
                }
            }
        }
        kl /= nk;
    }
    let surrogate = surrogate / n;
    let loss = -surrogate + config.kl_coef * kl;
    let diag = PpoDiagnostics {
        loss,
        surrogate,
        mean_ratio: ratio_sum / n,
        clip_fraction: clipped as f64 / n,
        kl,
    };
    Ok((loss, grad, diag))
}

/// One backtracked gradient step on the frozen batch. Returns the updated
/// policy and the diagnostics measured before the step.
pub fn ppo_step(
    policy: &PlPolicy,
    batch: &PpoBatch<'_>,
    config: &PpoConfig,
) -> Result<(PlPolicy, PpoDiagnostics), PpoError> {
    let (loss, grad, diag) = ppo_loss(policy, batch, config)?;
    let mut lr = config.learning_rate;
    for _ in 0..=config.max_backtracks {
        let mut candidate = policy.clone();
        candidate.model.apply_step(&grad, lr);
        match ppo_loss(&candidate, batch, config) {
            Ok((l, _, _)) if l <= loss => return Ok((candidate, diag)),
            Ok(_) | Err(PpoError::NanRatio { .. }) => lr *= 0.5,
            Err(e) => return Err(e),
        }
    }
    Ok((policy.clone(), diag))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RoundDiagnostics {
    pub mean_reward: f64,
    pub kl: f64,
    pub clip_fraction: f64,
    pub mean_ratio: f64,
}

/// Samples episodes from `policy` on every pool and scores them with `reward`.
/// Advantages are normalized per query.
pub fn collect_batch<'a, R: Rng + ?Sized>(
    policy: &PlPolicy,
    reward: &RewardModel,
    pools: &'a [FeaturizedPool],
    config: &PpoConfig,
    baseline: &mut Baseline,
    rng: &mut R,
) -> Result<PpoBatch<'a>, PpoError> {
    let mut episodes = Vec::with_capacity(pools.len() * config.samples_per_query);
    let mut kl_samples = Vec::with_capacity(pools.len() * config.samples_per_query);
    for (q, pool) in pools.iter().enumerate() {
        let mut group = Vec::with_capacity(config.samples_per_query);
        for _ in 0..config.samples_per_query {
            let s = policy.sample(&pool.features, rng)?;
            let r = reward.reward(&pool.list_features(&s.prefix)?);
            group.push(Episode {
                query: q,
                prefix: s.prefix,
                old_logprob: s.logprob,
                reward: r,
                advantage: 0.0,
            });
        }
        compute_advantages(&mut group, baseline, config.baseline_decay);
        episodes.extend(group);
        for _ in 0..config.samples_per_query {
            let s = policy.sample(&pool.features, rng)?;
            kl_samples.push(KlSample {
                query: q,
                prefix: s.prefix,
                old_logprob: s.logprob,
            });
        }
    }
    Ok(PpoBatch {
        pools,
        episodes,
        kl_samples,
    })
}

/// Sample, score and run `config.epochs` PPO steps.
pub fn align_round<R: Rng + ?Sized>(
    policy: &PlPolicy,
    reward: &RewardModel,
    pools: &[FeaturizedPool],
    config: &PpoConfig,
    baseline: &mut Baseline,
    rng: &mut R,
) -> Result<(PlPolicy, RoundDiagnostics), PpoError> {
    config.validate()?;
    if pools.is_empty() {
        return Err(PpoError::NoQueries);
    }
    let batch = collect_batch(policy, reward, pools, config, baseline, rng)?;
    let mean_reward =
        batch.episodes.iter().map(|e| e.reward).sum::<f64>() / batch.episodes.len() as f64;
    let mut current = policy.clone();
    let mut last = PpoDiagnostics::default();
    for _ in 0..config.epochs {
        let (next, diag) = ppo_step(&current, &batch, config)?;
        current = next;
        last = diag;
    }
    Ok((
        current,
        RoundDiagnostics {
            mean_reward,
            kl: last.kl,
            clip_fraction: last.clip_fraction,
            mean_ratio: last.mean_ratio,
        },
    ))
}

/// Runs `rounds` alignment rounds, returning the final policy and one
/// diagnostics row per round.
pub fn align<R: Rng + ?Sized>(
    policy: &PlPolicy,
    reward: &RewardModel,
    pools: &[FeaturizedPool],
    config: &PpoConfig,
    rounds: usize,
    rng: &mut R,
) -> Result<(PlPolicy, Vec<RoundDiagnostics>), PpoError> {
    let mut baseline = Baseline::default();
    let mut current = policy.clone();
    let mut diags = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        let (next, d) = align_round(&current, reward, pools, config, &mut baseline, rng)?;
        current = next;
        diags.push(d);
    }
    Ok((current, diags))
}
