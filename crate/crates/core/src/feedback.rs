//! Feedback records at document, list and response granularity, plus the
//! session trace they are attached to.
//!
//! Events arrive as line-delimited JSON. Each line carries a `type` tag
//! (`doc`, `list`, `resp` or `turn`), the session and query ids, and the
//! fields specific to that granularity. Lines that fail to parse or violate
//! a record invariant are logged, counted and skipped.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default confidence threshold applied before training.
pub const DEFAULT_MIN_CONFIDENCE: f64 = 0.5;

#[derive(Debug, Error)]
pub enum FeedbackError {
    #[error("failed to read event stream: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to encode event: {0}")]
    Encode(#[from] serde_json::Error),
    #[error("pool length must be at least 1")]
    EmptyPool,
    #[error("invalid record: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QueryId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DocId(pub u64);

/// A pointwise usefulness label with a confidence weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DocFeedback {
    pub session: u64,
    pub query: QueryId,
    pub doc: DocId,
    pub label: bool,
    pub confidence: f64,
}

/// A scalar quality score for an exposed ranking.
#[derive(Debug, Clone, PartialEq)]
pub struct ListFeedback {
    pub session: u64,
    pub query: QueryId,
    pub pool: Vec<DocId>,
    pub list_score: f64,
    /// Optional inverse-propensity corrections, one per pool entry.
    pub item_weights: Option<Vec<f64>>,
    /// Optional per-item soft utilities. Carried through ingestion but not
    /// consumed by any trainer.
    pub soft_targets: Option<Vec<f64>>,
}

/// A comparison between responses produced from two different lists.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponsePreference {
    pub session: u64,
    pub query: QueryId,
    pub list_a: Vec<DocId>,
    pub list_b: Vec<DocId>,
    pub preferred_a: bool,
}

/// Indices into the ingested record sets for the events attached to a turn.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttachedEvents {
    pub doc: Vec<usize>,
    pub list: Vec<usize>,
    pub resp: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Turn {
    pub query: QueryId,
    /// Retrieved pool in retriever order.
    pub pool: Vec<DocId>,
    /// Served list, a subset of `pool` in serving order.
    pub served: Vec<DocId>,
    pub satisfaction: f64,
    pub query_embedding: Option<Vec<f64>>,
    pub query_topic: Option<u32>,
    /// Ground-truth utilities for each pool entry, when the producer knows them.
    pub utilities: Option<Vec<f64>>,
    pub events: AttachedEvents,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionTrace {
    pub session: u64,
    pub turns: Vec<Turn>,
}

/// One line of the event stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum EventRecord {
    Doc {
        session: u64,
        query: QueryId,
        doc: DocId,
        label: i64,
        confidence: f64,
    },
    List {
        session: u64,
        query: QueryId,
        pool: Vec<DocId>,
        score: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        weights: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        soft_targets: Option<Vec<f64>>,
    },
    Resp {
        session: u64,
        query: QueryId,
        list_a: Vec<DocId>,
        list_b: Vec<DocId>,
        preferred_a: i64,
    },
    Turn {
        session: u64,
        query: QueryId,
        pool: Vec<DocId>,
        served: Vec<DocId>,
        satisfaction: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        query_emb: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        query_topic: Option<u32>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        utilities: Option<Vec<f64>>,
    },
}

impl EventRecord {
    pub fn session(&self) -> u64 {
        match self {
            EventRecord::Doc { session, .. }
            | EventRecord::List { session, .. }
            | EventRecord::Resp { session, .. }
            | EventRecord::Turn { session, .. } => *session,
        }
    }

    pub fn query(&self) -> QueryId {
        match self {
            EventRecord::Doc { query, .. }
            | EventRecord::List { query, .. }
            | EventRecord::Resp { query, .. }
            | EventRecord::Turn { query, .. } => *query,
        }
    }
}

impl EventRecord {
    /// The turn line of `session`; attached events are written separately.
    pub fn turn(session: u64, t: &Turn) -> Self {
        EventRecord::Turn {
            session,
            query: t.query,
            pool: t.pool.clone(),
            served: t.served.clone(),
            satisfaction: t.satisfaction,
            query_emb: t.query_embedding.clone(),
            query_topic: t.query_topic,
            utilities: t.utilities.clone(),
        }
    }
}

impl From<&DocFeedback> for EventRecord {
    fn from(d: &DocFeedback) -> Self {
        EventRecord::Doc {
            session: d.session,
            query: d.query,
            doc: d.doc,
            label: d.label as i64,
            confidence: d.confidence,
        }
    }
}

impl From<&ListFeedback> for EventRecord {
    fn from(l: &ListFeedback) -> Self {
        EventRecord::List {
            session: l.session,
            query: l.query,
            pool: l.pool.clone(),
            score: l.list_score,
            weights: l.item_weights.clone(),
            soft_targets: l.soft_targets.clone(),
        }
    }
}

impl From<&ResponsePreference> for EventRecord {
    fn from(r: &ResponsePreference) -> Self {
        EventRecord::Resp {
            session: r.session,
            query: r.query,
            list_a: r.list_a.clone(),
            list_b: r.list_b.clone(),
            preferred_a: r.preferred_a as i64,
        }
    }
}

fn has_duplicates(ids: &[DocId]) -> bool {
    let mut seen = HashSet::with_capacity(ids.len());
    ids.iter().any(|d| !seen.insert(*d))
}

fn invalid(msg: impl Into<String>) -> FeedbackError {
    FeedbackError::Invalid(msg.into())
}

impl DocFeedback {
    pub fn validate(&self) -> Result<(), FeedbackError> {
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(invalid(format!("confidence {} outside [0,1]", self.confidence)));
        }
        Ok(())
    }
}

impl ListFeedback {
    pub fn validate(&self) -> Result<(), FeedbackError> {
        if self.pool.is_empty() {
            return Err(invalid("list pool is empty"));
        }
        if has_duplicates(&self.pool) {
            return Err(invalid("list pool has duplicate documents"));
        }
        if !self.list_score.is_finite() {
            return Err(invalid("list score is not finite"));
        }
        if let Some(w) = &self.item_weights {
            if w.len() != self.pool.len() {
                return Err(invalid(format!(
                    "{} item weights for a pool of {}",
                    w.len(),
                    self.pool.len()
                )));
            }
            if w.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
                return Err(invalid("item weights must be positive"));
            }
        }
        if let Some(s) = &self.soft_targets {
            if s.len() != self.pool.len() {
                return Err(invalid("soft target length differs from pool length"));
            }
        }
        Ok(())
    }
}

impl ResponsePreference {
    pub fn validate(&self) -> Result<(), FeedbackError> {
        if self.list_a.is_empty() || self.list_b.is_empty() {
            return Err(invalid("preference lists must be non-empty"));
        }
        if self.list_a == self.list_b {
            return Err(invalid("preference lists are identical"));
        }
        Ok(())
    }
}

impl Turn {
    pub fn validate(&self) -> Result<(), FeedbackError> {
        if self.pool.is_empty() {
            return Err(invalid("turn pool is empty"));
        }
        let pool: HashSet<DocId> = self.pool.iter().copied().collect();
        if let Some(d) = self.served.iter().find(|d| !pool.contains(d)) {
            return Err(invalid(format!("served doc {} not in retrieved pool", d.0)));
        }
        if has_duplicates(&self.served) {
            return Err(invalid("served list has duplicate documents"));
        }
        if let Some(u) = &self.utilities {
            if u.len() != self.pool.len() {
                return Err(invalid("utility length differs from pool length"));
            }
        }
        Ok(())
    }
}

fn binary(v: i64, field: &str) -> Result<bool, FeedbackError> {
    match v {
        0 => Ok(false),
        1 => Ok(true),
        other => Err(invalid(format!("{field} = {other} is not binary"))),
    }
}

/// Everything recovered from one event stream.
#[derive(Debug, Clone, Default)]
pub struct Ingested {
    pub docs: Vec<DocFeedback>,
    pub lists: Vec<ListFeedback>,
    pub prefs: Vec<ResponsePreference>,
    pub sessions: Vec<SessionTrace>,
    /// Malformed or invariant-violating lines.
    pub skipped: usize,
}

impl Ingested {
    pub fn counts(&self) -> (usize, usize, usize, usize) {
        (
            self.docs.len(),
            self.lists.len(),
            self.prefs.len(),
            self.sessions.len(),
        )
    }

    pub fn turns(&self) -> impl Iterator<Item = &Turn> {
        self.sessions.iter().flat_map(|s| s.turns.iter())
    }
}

/// Incrementally partitions records by granularity.
#[derive(Debug, Default)]
pub struct Ingestor {
    out: Ingested,
    session_index: HashMap<u64, usize>,
    // (session, query) -> (session idx, turn idx)
    turn_index: HashMap<(u64, QueryId), (usize, usize)>,
    // events seen before their turn line
    pending: HashMap<(u64, QueryId), AttachedEvents>,
}

impl Ingestor {
    pub fn new() -> Self {
        Self::default()
    }

    fn attach(&mut self, session: u64, query: QueryId, f: impl FnOnce(&mut AttachedEvents)) {
        if let Some(&(s, t)) = self.turn_index.get(&(session, query)) {
            f(&mut self.out.sessions[s].turns[t].events);
        } else {
            f(self.pending.entry((session, query)).or_default());
        }
    }

    /// Adds a parsed record. Invalid records are rejected without side effects.
    pub fn push(&mut self, rec: EventRecord) -> Result<(), FeedbackError> {
        match rec {
            EventRecord::Doc {
                session,
                query,
                doc,
                label,
                confidence,
            } => {
                let d = DocFeedback {
                    session,
                    query,
                    doc,
                    label: binary(label, "label")?,
                    confidence,
                };
                d.validate()?;
                let idx = self.out.docs.len();
                self.out.docs.push(d);
                self.attach(session, query, |e| e.doc.push(idx));
            }
            EventRecord::List {
                session,
                query,
                pool,
                score,
                weights,
                soft_targets,
            } => {
                let l = ListFeedback {
                    session,
                    query,
                    pool,
                    list_score: score,
                    item_weights: weights,
                    soft_targets,
                };
                l.validate()?;
                let idx = self.out.lists.len();
                self.out.lists.push(l);
                self.attach(session, query, |e| e.list.push(idx));
            }
            EventRecord::Resp {
                session,
                query,
                list_a,
                list_b,
                preferred_a,
            } => {
                let r = ResponsePreference {
                    session,
                    query,
                    list_a,
                    list_b,
                    preferred_a: binary(preferred_a, "preferred_a")?,
                };
                r.validate()?;
                let idx = self.out.prefs.len();
                self.out.prefs.push(r);
                self.attach(session, query, |e| e.resp.push(idx));
            }
            EventRecord::Turn {
                session,
                query,
                pool,
                served,
                satisfaction,
                query_emb,
                query_topic,
                utilities,
            } => {
                let mut turn = Turn {
                    query,
                    pool,
                    served,
                    satisfaction,
                    query_embedding: query_emb,
                    query_topic,
                    utilities,
                    events: AttachedEvents::default(),
                };
                turn.validate()?;
                if self.turn_index.contains_key(&(session, query)) {
                    return Err(invalid(format!(
                        "duplicate turn for session {session} query {}",
                        query.0
                    )));
                }
                if let Some(p) = self.pending.remove(&(session, query)) {
                    turn.events = p;
                }
                let s = *self.session_index.entry(session).or_insert_with(|| {
                    self.out.sessions.push(SessionTrace {
                        session,
                        turns: Vec::new(),
                    });
                    self.out.sessions.len() - 1
                });
                let t = self.out.sessions[s].turns.len();
                self.out.sessions[s].turns.push(turn);
                self.turn_index.insert((session, query), (s, t));
            }
        }
        Ok(())
    }

    /// Parses and adds one line; on failure logs a warning and bumps the
    /// skip counter. Blank lines are ignored.
    pub fn push_line(&mut self, line: &str) {
        let line = line.trim();
        if line.is_empty() {
            return;
        }
        let res = serde_json::from_str::<EventRecord>(line)
            .map_err(FeedbackError::from)
            .and_then(|rec| self.push(rec));
        if let Err(e) = res {
            log::warn!("skipping event line: {e}");
            self.out.skipped += 1;
        }
    }

    pub fn finish(self) -> Ingested {
        self.out
    }
}

/// Reads a line-delimited event stream. Read failures are fatal; malformed
/// lines are skipped and counted.
pub fn ingest_events<R: BufRead>(reader: R) -> Result<Ingested, FeedbackError> {
    let mut ing = Ingestor::new();
    for line in reader.lines() {
        ing.push_line(&line?);
    }
    Ok(ing.finish())
}

pub fn write_events<'a, W: Write>(
    mut w: W,
    events: impl IntoIterator<Item = &'a EventRecord>,
) -> Result<(), FeedbackError> {
    for e in events {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Keeps the events whose confidence is at least `threshold`, in order.
pub fn confidence_filter(events: &[DocFeedback], threshold: f64) -> Vec<DocFeedback> {
    events
        .iter()
        .filter(|e| e.confidence >= threshold)
        .copied()
        .collect()
}

/// Inverse exposure propensities `log2(rank + 1)` for ranks `1..=pool_length`.
pub fn exposure_weights(pool_length: usize) -> Result<Vec<f64>, FeedbackError> {
    if pool_length == 0 {
        return Err(FeedbackError::EmptyPool);
    }
    Ok((1..=pool_length)
        .map(|j| ((j + 1) as f64).log2())
        .collect())
}
