//! Feature vectors for (query, document) pairs and for whole lists.
//!
//! Pair features are always computed relative to the retrieved pool the
//! document came from, so the two within-list features are identical at
//! training and serving time.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feedback::DocId;
use crate::math::{dot, norm, position_discount};

/// Bumped whenever the meaning or order of pair features changes.
pub const FEATURE_SCHEMA_VERSION: u32 = 1;
pub const FEATURE_DIM: usize = 8;
pub const LIST_FEATURE_DIM: usize = FEATURE_DIM + 3;
pub const DEFAULT_EMBEDDING_DIM: usize = 16;

pub const FEATURE_NAMES: [&str; FEATURE_DIM] = [
    "dot",
    "cosine",
    "neg_l2",
    "topic_match",
    "freshness",
    "rank_prior",
    "list_z_dot",
    "list_rank_frac",
];

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("rank {rank} outside pool of {pool}")]
    Rank { rank: usize, pool: usize },
    #[error("empty list")]
    EmptyList,
    #[error("decay has {decay} entries for {members} members")]
    DecayLength { decay: usize, members: usize },
    #[error("unknown document {0}")]
    UnknownDoc(u64),
    #[error("non-finite feature value")]
    NonFinite,
    #[error("corpus io: {0}")]
    Io(#[from] std::io::Error),
    #[error("corpus parse: {0}")]
    Parse(#[from] serde_json::Error),
}

/// A corpus document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Doc {
    pub id: DocId,
    pub embedding: Vec<f64>,
    pub topic: u32,
    pub freshness: f64,
}

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    docs: Vec<Doc>,
    index: HashMap<DocId, usize>,
}

impl Corpus {
    pub fn new(docs: Vec<Doc>) -> Result<Self, FeatureError> {
        let dim = docs.first().map_or(0, |d| d.embedding.len());
        let mut index = HashMap::with_capacity(docs.len());
        for (i, d) in docs.iter().enumerate() {
            if d.embedding.len() != dim {
                return Err(FeatureError::Dimension {
                    expected: dim,
                    got: d.embedding.len(),
                });
            }
            if d.embedding.iter().any(|x| !x.is_finite()) || !d.freshness.is_finite() {
                return Err(FeatureError::NonFinite);
            }
            index.insert(d.id, i);
        }
        Ok(Self { docs, index })
    }

    pub fn docs(&self) -> &[Doc] {
        &self.docs
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.docs.first().map_or(0, |d| d.embedding.len())
    }

    pub fn get(&self, id: DocId) -> Result<&Doc, FeatureError> {
        self.index
            .get(&id)
            .map(|&i| &self.docs[i])
            .ok_or(FeatureError::UnknownDoc(id.0))
    }

    pub fn resolve(&self, ids: &[DocId]) -> Result<Vec<&Doc>, FeatureError> {
        ids.iter().map(|&id| self.get(id)).collect()
    }

    pub fn n_topics(&self) -> usize {
        self.docs.iter().map(|d| d.topic as usize + 1).max().unwrap_or(0)
    }

    /// Normalized mean embedding of each topic's documents.
    pub fn topic_centroids(&self) -> Vec<Vec<f64>> {
        let mut sums = vec![vec![0.0; self.dim()]; self.n_topics()];
        for d in &self.docs {
            for (s, x) in sums[d.topic as usize].iter_mut().zip(&d.embedding) {
                *s += x;
            }
        }
        for s in &mut sums {
            crate::math::normalize(s);
        }
        sums
    }

    pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Self, FeatureError> {
        let mut docs = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            docs.push(serde_json::from_str(&line)?);
        }
        Self::new(docs)
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), FeatureError> {
        for d in &self.docs {
            serde_json::to_writer(&mut w, d)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// The observable side of a query.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub embedding: Vec<f64>,
    pub topic: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairFeatures(pub [f64; FEATURE_DIM]);

impl PairFeatures {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dot(&self) -> f64 {
        self.0[0]
    }
}

impl AsRef<[f64]> for PairFeatures {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ListFeatures(pub [f64; LIST_FEATURE_DIM]);

impl ListFeatures {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl AsRef<[f64]> for ListFeatures {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

fn check_dim(expected: usize, got: usize) -> Result<(), FeatureError> {
    if expected == got {
        Ok(())
    } else {
        Err(FeatureError::Dimension { expected, got })
    }
}

struct PoolStats {
    mean: f64,
    std: f64,
    len: usize,
}

impl PoolStats {
    fn new(query: &[f64], pool: &[&Doc]) -> Result<Self, FeatureError> {
        let mut dots = Vec::with_capacity(pool.len());
        for d in pool {
            check_dim(query.len(), d.embedding.len())?;
            dots.push(dot(query, &d.embedding));
        }
        let (mean, std) = crate::math::mean_std(&dots);
        Ok(Self {
            mean,
            std,
            len: pool.len(),
        })
    }
}

fn features_with_stats(
    query: &Query,
    doc: &Doc,
    stats: &PoolStats,
    rank: usize,
) -> Result<PairFeatures, FeatureError> {
    check_dim(query.embedding.len(), doc.embedding.len())?;
    if rank == 0 || rank > stats.len {
        return Err(FeatureError::Rank {
            rank,
            pool: stats.len,
        });
    }
    let q = &query.embedding;
    let d = &doc.embedding;
    let qd = dot(q, d);
    let qn = norm(q);
    let dn = norm(d);
    let cosine = if qn > 0.0 && dn > 0.0 { qd / (qn * dn) } else { 0.0 };
    let l2 = q
        .iter()
        .zip(d)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let topic_match = match query.topic {
        Some(t) if t == doc.topic => 1.0,
        _ => 0.0,
    };
    let z = if stats.std > 0.0 {
        (qd - stats.mean) / stats.std
    } else {
        0.0
    };
    let f = PairFeatures([
        qd,
        cosine,
        -l2,
        topic_match,
        doc.freshness,
        position_discount(rank),
        z,
        rank as f64 / stats.len as f64,
    ]);
    if f.0.iter().any(|x| !x.is_finite()) {
        return Err(FeatureError::NonFinite);
    }
    Ok(f)
}

/// Features of `doc` at 1-based `rank` within `pool_context`. The within-list
/// statistics use population variance over the whole context, so the order of
/// `pool_context` does not matter.
pub fn pair_features(
    query: &Query,
    doc: &Doc,
    pool_context: &[&Doc],
    rank: usize,
) -> Result<PairFeatures, FeatureError> {
    let stats = PoolStats::new(&query.embedding, pool_context)?;
    features_with_stats(query, doc, &stats, rank)
}

/// Features for every member of a retrieved pool, ranks taken from pool order.
pub fn pool_features(query: &Query, pool: &[&Doc]) -> Result<Vec<PairFeatures>, FeatureError> {
    let stats = PoolStats::new(&query.embedding, pool)?;
    pool.iter()
        .enumerate()
        .map(|(i, d)| features_with_stats(query, d, &stats, i + 1))
        .collect()
}

/// Aggregates member features into list features: decay-weighted mean of the
/// pair features, max dot product, diversity (one minus mean pairwise cosine
/// between member embeddings) and the served fraction `m / pool_len`.
pub fn list_features(
    members: &[PairFeatures],
    embeddings: &[&[f64]],
    decay: &[f64],
    pool_len: usize,
) -> Result<ListFeatures, FeatureError> {
    if members.is_empty() {
        return Err(FeatureError::EmptyList);
    }
    if decay.len() != members.len() {
        return Err(FeatureError::DecayLength {
            decay: decay.len(),
            members: members.len(),
        });
    }
    if embeddings.len() != members.len() {
        return Err(FeatureError::DecayLength {
            decay: embeddings.len(),
            members: members.len(),
        });
    }
    let mut out = [0.0; LIST_FEATURE_DIM];
    let wsum: f64 = decay.iter().sum();
    for (m, w) in members.iter().zip(decay) {
        for (o, x) in out.iter_mut().zip(m.0.iter()) {
            *o += w * x / wsum;
        }
    }
    out[FEATURE_DIM] = members
        .iter()
        .map(PairFeatures::dot)
        .fold(f64::NEG_INFINITY, f64::max);
    let n = embeddings.len();
    out[FEATURE_DIM + 1] = if n < 2 {
        0.0
    } else {
        let mut total = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                let (a, b) = (embeddings[i], embeddings[j]);
                let denom = norm(a) * norm(b);
                total += if denom > 0.0 { dot(a, b) / denom } else { 0.0 };
            }
        }
        1.0 - total / ((n * (n - 1) / 2) as f64)
    };
    out[FEATURE_DIM + 2] = members.len() as f64 / pool_len.max(1) as f64;
    if out.iter().any(|x| !x.is_finite()) {
        return Err(FeatureError::NonFinite);
    }
    Ok(ListFeatures(out))
}

/// A retrieved pool with its pair features and member embeddings, in
/// retriever order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturizedPool {
    pub docs: Vec<DocId>,
    pub features: Vec<PairFeatures>,
    pub embeddings: Vec<Vec<f64>>,
}

impl FeaturizedPool {
    pub fn build(query: &Query, pool: &[&Doc]) -> Result<Self, FeatureError> {
        Ok(Self {
            docs: pool.iter().map(|d| d.id).collect(),
            features: pool_features(query, pool)?,
            embeddings: pool.iter().map(|d| d.embedding.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn position(&self, doc: DocId) -> Option<usize> {
        self.docs.iter().position(|&d| d == doc)
    }

    /// List features of the members at `order` (pool indices, serving
    /// order) with DCG-style positional decay.
    pub fn list_features(&self, order: &[usize]) -> Result<ListFeatures, FeatureError> {
        let members: Vec<PairFeatures> = order.iter().map(|&i| self.features[i]).collect();
        let embs: Vec<&[f64]> = order.iter().map(|&i| self.embeddings[i].as_slice()).collect();
        let decay: Vec<f64> = (1..=order.len()).map(position_discount).collect();
        list_features(&members, &embs, &decay, self.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mk_doc(id: u64, emb: Vec<f64>, topic: u32) -> Doc {
        Doc {
            id: DocId(id),
            embedding: emb,
            topic,
            freshness: 0.5,
        }
    }

    fn q(emb: Vec<f64>) -> Query {
        Query {
            embedding: emb,
            topic: Some(0),
        }
    }

    #[test]
    fn identical_unit_vectors() {
        let d = mk_doc(1, vec![1.0, 0.0], 0);
        let f = pair_features(&q(vec![1.0, 0.0]), &d, &[&d], 1).unwrap();
        assert_eq!(f.0[0], 1.0);
        assert_eq!(f.0[1], 1.0);
        assert_eq!(f.0[2], 0.0);
        assert_eq!(f.0[3], 1.0);
        assert_eq!(f.0[5], 1.0);
        assert_eq!(f.0[7], 1.0);
    }

    #[test]
    fn zero_variance_pool_gives_zero_z() {
        let docs: Vec<Doc> = (0..4).map(|i| mk_doc(i, vec![0.6, 0.8], 0)).collect();
        let refs: Vec<&Doc> = docs.iter().collect();
        for f in pool_features(&q(vec![1.0, 0.0]), &refs).unwrap() {
            assert_eq!(f.0[6], 0.0);
        }
    }

    #[test]
    fn two_doc_pool_z_scores() {
        // dots 0.5 and -0.5: mean 0, population std 0.5
        let a = mk_doc(1, vec![0.5, 0.0], 0);
        let b = mk_doc(2, vec![-0.5, 0.0], 0);
        let fs = pool_features(&q(vec![1.0, 0.0]), &[&a, &b]).unwrap();
        assert!((fs[0].0[6] - 1.0).abs() < 1e-12);
        assert!((fs[1].0[6] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let a = mk_doc(1, vec![1.0, 0.0, 0.0], 0);
        assert!(matches!(
            pair_features(&q(vec![1.0, 0.0]), &a, &[&a], 1),
            Err(FeatureError::Dimension { .. })
        ));
        let b = mk_doc(1, vec![1.0, 0.0], 0);
        assert!(matches!(
            pair_features(&q(vec![1.0, 0.0]), &b, &[&b], 2),
            Err(FeatureError::Rank { .. })
        ));
        assert!(matches!(
            list_features(&[], &[], &[], 1),
            Err(FeatureError::EmptyList)
        ));
    }

    #[test]
    fn singleton_list() {
        let d = mk_doc(1, vec![0.6, 0.8], 0);
        let f = pair_features(&q(vec![1.0, 0.0]), &d, &[&d], 1).unwrap();
        let lf = list_features(&[f], &[&d.embedding], &[1.0], 20).unwrap();
        assert_eq!(&lf.0[..FEATURE_DIM], &f.0[..]);
        assert_eq!(lf.0[FEATURE_DIM], f.dot());
        assert_eq!(lf.0[FEATURE_DIM + 1], 0.0);
        assert_eq!(lf.0[FEATURE_DIM + 2], 1.0 / 20.0);
    }

    #[test]
    fn orthogonal_pair_has_full_diversity() {
        let a = mk_doc(1, vec![1.0, 0.0], 0);
        let b = mk_doc(2, vec![0.0, 1.0], 0);
        let fs = pool_features(&q(vec![1.0, 0.0]), &[&a, &b]).unwrap();
        let lf = list_features(&fs, &[&a.embedding, &b.embedding], &[1.0, 0.5], 2).unwrap();
        assert_eq!(lf.0[FEATURE_DIM + 1], 1.0);
    }

    #[test]
    fn three_doc_fixture_by_hand() {
        // query e1; docs e1, (0.6,0.8), e2; decay 1, 0.5, 0.25 (sum 1.75)
        let a = mk_doc(1, vec![1.0, 0.0], 0);
        let b = mk_doc(2, vec![0.6, 0.8], 1);
        let c = mk_doc(3, vec![0.0, 1.0], 0);
        let fs = pool_features(&q(vec![1.0, 0.0]), &[&a, &b, &c]).unwrap();
        let embs = [a.embedding.as_slice(), &b.embedding, &c.embedding];
        let lf = list_features(&fs, &embs, &[1.0, 0.5, 0.25], 3).unwrap();
        // weighted mean of dots: (1*1 + 0.5*0.6 + 0.25*0) / 1.75
        assert!((lf.0[0] - 1.3 / 1.75).abs() < 1e-12);
        // topic match: (1 + 0 + 0.25) / 1.75
        assert!((lf.0[3] - 1.25 / 1.75).abs() < 1e-12);
        assert_eq!(lf.0[FEATURE_DIM], 1.0);
        // cosines: ab 0.6, ac 0, bc 0.8 -> mean 1.4/3
        assert!((lf.0[FEATURE_DIM + 1] - (1.0 - 1.4 / 3.0)).abs() < 1e-12);
        assert_eq!(lf.0[FEATURE_DIM + 2], 1.0);
    }

    #[test]
    fn corpus_jsonl_round_trip() {
        let c = Corpus::new(vec![mk_doc(1, vec![0.25, 0.1], 0), mk_doc(2, vec![0.3, -1.0], 1)])
            .unwrap();
        let mut buf = Vec::new();
        c.write_jsonl(&mut buf).unwrap();
        let back = Corpus::read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back.docs(), c.docs());
        assert_eq!(back.n_topics(), 2);
    }

    fn vec2() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-1.0f64..1.0, 4)
    }

    proptest! {
        #[test]
        fn pair_features_ignore_context_order(
            qv in vec2(),
            embs in prop::collection::vec(vec2(), 2..8),
            seed in any::<u64>(),
        ) {
            let docs: Vec<Doc> = embs.into_iter().enumerate()
                .map(|(i, e)| mk_doc(i as u64, e, (i % 2) as u32)).collect();
            let refs: Vec<&Doc> = docs.iter().collect();
            let mut shuffled = refs.clone();
            let k = shuffled.len();
            shuffled.rotate_left((seed as usize) % k);
            shuffled.reverse();
            let query = q(qv);
            for (i, d) in refs.iter().enumerate() {
                let a = pair_features(&query, d, &refs, i + 1).unwrap();
                let b = pair_features(&query, d, &shuffled, i + 1).unwrap();
                for (x, y) in a.0.iter().zip(b.0.iter()) {
                    prop_assert!((x - y).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn uniform_decay_list_features_are_permutation_invariant(
            qv in vec2(),
            embs in prop::collection::vec(vec2(), 1..6),
        ) {
            let docs: Vec<Doc> = embs.into_iter().enumerate()
                .map(|(i, e)| mk_doc(i as u64, e, 0)).collect();
            let refs: Vec<&Doc> = docs.iter().collect();
            let query = q(qv);
            let fs = pool_features(&query, &refs).unwrap();
            let em: Vec<&[f64]> = docs.iter().map(|d| d.embedding.as_slice()).collect();
            let uniform = vec![1.0; fs.len()];
            let a = list_features(&fs, &em, &uniform, 10).unwrap();
            let mut fr = fs.clone();
            fr.reverse();
            let mut er = em.clone();
            er.reverse();
            let b = list_features(&fr, &er, &uniform, 10).unwrap();
            for (x, y) in a.0.iter().zip(b.0.iter()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
