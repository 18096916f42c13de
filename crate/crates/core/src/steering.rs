//! Radio and Steering sessions over a shared forest.
//!
//! A Radio session offers 10 full phrases through 10 distinct roots and ends
//! with one pick. A Steering session walks the tree one chunk at a time:
//! 10 root options, then 5 children of the current selection, twice. Option
//! sets are drawn uniformly without replacement from the candidates matching
//! the requested constraints; if too few match, the set is topped up with the
//! nearest non-matching candidates, flagged `relaxed`.
//!
//! Every request, selection and restart is appended to the session history,
//! which can be replayed against the same forest to reproduce the session.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::Phrase;
use crate::features::{direction, key_relation, Bin, BinEdges, Dimension, Direction, FeatureVector, KeyRelation};
use crate::forest::{Forest, ForestError, NodePath};
use crate::seed::RngSeed;

pub const RADIO_OPTIONS: usize = 10;
pub const ROOT_OPTIONS: usize = 10;
pub const CONTINUATION_OPTIONS: usize = 5;

#[derive(Debug, Error)]
pub enum SteeringError {
    #[error("unknown card {0:?}")]
    UnknownCard(String),
    #[error("illegal constraint: {0}")]
    IllegalConstraint(String),
    #[error("session is already complete")]
    SessionComplete,
    #[error("session is not complete")]
    SessionIncomplete,
    #[error("option set {given} is not the current one ({current:?})")]
    StaleSelection { given: u64, current: Option<u64> },
    #[error("option {index} out of range for a set of {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("forest has no feature bins; run index-features first")]
    NotIndexed,
    #[error("replay diverged at history entry {entry}: {reason}")]
    ReplayDivergence { entry: usize, reason: String },
    #[error("malformed history: {0}")]
    MalformedHistory(String),
    #[error(transparent)]
    Forest(#[from] ForestError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionMode {
    Radio,
    Steering,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbsoluteChoice {
    #[default]
    Any,
    VeryLow,
    Low,
    Mid,
    High,
    VeryHigh,
}

impl AbsoluteChoice {
    pub fn bin(self) -> Option<Bin> {
        match self {
            AbsoluteChoice::Any => None,
            AbsoluteChoice::VeryLow => Some(Bin::VeryLow),
            AbsoluteChoice::Low => Some(Bin::Low),
            AbsoluteChoice::Mid => Some(Bin::Mid),
            AbsoluteChoice::High => Some(Bin::High),
            AbsoluteChoice::VeryHigh => Some(Bin::VeryHigh),
        }
    }
}

impl From<Bin> for AbsoluteChoice {
    fn from(b: Bin) -> Self {
        match b {
            Bin::VeryLow => AbsoluteChoice::VeryLow,
            Bin::Low => AbsoluteChoice::Low,
            Bin::Mid => AbsoluteChoice::Mid,
            Bin::High => AbsoluteChoice::High,
            Bin::VeryHigh => AbsoluteChoice::VeryHigh,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelativeChoice {
    #[default]
    Any,
    Lower,
    Same,
    Higher,
}

impl RelativeChoice {
    pub fn direction(self) -> Option<Direction> {
        match self {
            RelativeChoice::Any => None,
            RelativeChoice::Lower => Some(Direction::Lower),
            RelativeChoice::Same => Some(Direction::Same),
            RelativeChoice::Higher => Some(Direction::Higher),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyChoice {
    #[default]
    Any,
    SameKey,
    DifferentKey,
}

impl KeyChoice {
    pub fn relation(self) -> Option<KeyRelation> {
        match self {
            KeyChoice::Any => None,
            KeyChoice::SameKey => Some(KeyRelation::SameKey),
            KeyChoice::DifferentKey => Some(KeyRelation::DifferentKey),
        }
    }
}

/// A steering request. Dimensions missing from a map are unconstrained.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstraintSet {
    pub absolute: BTreeMap<Dimension, AbsoluteChoice>,
    pub relative: BTreeMap<Dimension, RelativeChoice>,
    pub key_relation: KeyChoice,
}

impl ConstraintSet {
    pub fn any() -> Self {
        Self::default()
    }

    pub fn with_absolute(mut self, dim: Dimension, bin: Bin) -> Self {
        self.absolute.insert(dim, bin.into());
        self
    }

    pub fn with_relative(mut self, dim: Dimension, choice: RelativeChoice) -> Self {
        self.relative.insert(dim, choice);
        self
    }

    pub fn with_key(mut self, choice: KeyChoice) -> Self {
        self.key_relation = choice;
        self
    }

    fn absolute_bins(&self) -> impl Iterator<Item = (Dimension, Bin)> + '_ {
        self.absolute.iter().filter_map(|(&d, c)| c.bin().map(|b| (d, b)))
    }

    fn relative_dirs(&self) -> impl Iterator<Item = (Dimension, Direction)> + '_ {
        self.relative.iter().filter_map(|(&d, c)| c.direction().map(|r| (d, r)))
    }

    pub fn has_relative(&self) -> bool {
        self.relative_dirs().next().is_some() || self.key_relation != KeyChoice::Any
    }

    pub fn is_unconstrained(&self) -> bool {
        self.absolute_bins().next().is_none() && !self.has_relative()
    }

    fn needs_bins(&self) -> bool {
        self.absolute_bins().next().is_some() || self.relative_dirs().next().is_some()
    }
}

/// Whether `candidate` (at `depth`, child of `parent`) meets every requested
/// constraint.
pub fn satisfies(
    constraints: &ConstraintSet,
    candidate: &FeatureVector,
    depth: u8,
    parent: Option<&FeatureVector>,
    edges: Option<&BinEdges>,
) -> Result<bool, SteeringError> {
    Ok(constraint_distance(constraints, candidate, depth, parent, edges)? == 0.0)
}

/// Normalized distance from `candidate` to the region the constraints
/// describe; 0 exactly when every constraint holds.
///
/// Each absolute miss costs its bin gap over 4 plus the value gap to the
/// target bin over the population range; each relative miss costs the value
/// gap to the required side of the margin over the range; a key mismatch
/// costs 1.
pub fn constraint_distance(
    constraints: &ConstraintSet,
    candidate: &FeatureVector,
    depth: u8,
    parent: Option<&FeatureVector>,
    edges: Option<&BinEdges>,
) -> Result<f64, SteeringError> {
    let bins_for = |dim| {
        edges
            .ok_or(SteeringError::NotIndexed)?
            .dimension(depth, dim)
            .map_err(|_| SteeringError::NotIndexed)
    };
    let mut total = 0.0;
    for (dim, bin) in constraints.absolute_bins() {
        let bins = bins_for(dim)?;
        let v = candidate.value(dim);
        let got = bins.bin_of(v);
        if got != bin {
            let range = positive_or_one(bins.range());
            let (lo, hi) = bins.bin_interval(bin);
            let gap = if v < lo {
                lo - v
            } else if v > hi {
                v - hi
            } else {
                0.0
            };
            total += got.index().abs_diff(bin.index()) as f64 / 4.0 + gap / range;
        }
    }
    if constraints.has_relative() {
        let parent = parent
            .ok_or_else(|| SteeringError::IllegalConstraint("relative constraints need a parent chunk".into()))?;
        for (dim, want) in constraints.relative_dirs() {
            let bins = bins_for(dim)?;
            let (c, p, eps) = (candidate.value(dim), parent.value(dim), bins.epsilon);
            if direction(c, p, eps) != want {
                let diff = c - p;
                let gap = match want {
                    Direction::Higher => eps - diff,
                    Direction::Lower => diff + eps,
                    Direction::Same => diff.abs() - eps,
                };
                // Strictly positive: a miss must never tie with a match.
                total += gap.max(0.0) / positive_or_one(bins.range()) + f64::EPSILON;
            }
        }
        if let Some(want) = constraints.key_relation.relation() {
            if key_relation(candidate.key, parent.key) != want {
                total += 1.0;
            }
        }
    }
    Ok(total)
}

fn positive_or_one(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum SessionState {
    AwaitingChunk { depth: u8 },
    AwaitingPhrasePick,
    Complete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptionEntry {
    pub path: NodePath,
    pub node_id: u64,
    /// For Radio options, the features of the phrase's first chunk.
    pub features: FeatureVector,
    pub relaxed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptionSet {
    /// Identifies this set; a selection must quote the current token.
    pub token: u64,
    /// Depth of the offered nodes; 3 for Radio phrases.
    pub depth: u8,
    pub constraints: ConstraintSet,
    pub options: Vec<OptionEntry>,
    /// Candidates in the pool that met every constraint.
    pub matching: usize,
    pub shortfall: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum HistoryEntry {
    Start {
        session_id: String,
        mode: SessionMode,
        card_id: String,
        seed: u64,
        at_ms: u64,
    },
    Request {
        token: u64,
        depth: u8,
        constraints: ConstraintSet,
        options: Vec<NodePath>,
        relaxed: Vec<bool>,
        shortfall: usize,
        at_ms: u64,
    },
    Select {
        token: u64,
        index: usize,
        path: NodePath,
        at_ms: u64,
    },
    Restart {
        at_ms: u64,
    },
}

impl HistoryEntry {
    fn without_time(&self) -> HistoryEntry {
        let mut e = self.clone();
        match &mut e {
            HistoryEntry::Start { at_ms, .. }
            | HistoryEntry::Request { at_ms, .. }
            | HistoryEntry::Select { at_ms, .. }
            | HistoryEntry::Restart { at_ms } => *at_ms = 0,
        }
        e
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub mode: SessionMode,
    pub card_id: String,
    pub seed: RngSeed,
    pub state: SessionState,
    /// Indices chosen so far; a full leaf path once complete.
    pub selected_path: Vec<u32>,
    pub current: Option<OptionSet>,
    requests: u64,
    history: Vec<HistoryEntry>,
}

impl Session {
    pub fn history(&self) -> &[HistoryEntry] {
        &self.history
    }

    pub fn requests_made(&self) -> u64 {
        self.requests
    }

    pub fn is_complete(&self) -> bool {
        self.state == SessionState::Complete
    }

    fn initial_state(mode: SessionMode) -> SessionState {
        match mode {
            SessionMode::Radio => SessionState::AwaitingPhrasePick,
            SessionMode::Steering => SessionState::AwaitingChunk { depth: 1 },
        }
    }

    /// History as JSON lines, one entry per line.
    pub fn history_jsonl(&self) -> String {
        history_to_jsonl(&self.history)
    }
}

pub fn history_to_jsonl(history: &[HistoryEntry]) -> String {
    let mut out = String::new();
    for e in history {
        out.push_str(&serde_json::to_string(e).expect("history serializes"));
        out.push('\n');
    }
    out
}

pub fn parse_history_jsonl(text: &str) -> Result<Vec<HistoryEntry>, SteeringError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| SteeringError::MalformedHistory(format!("line {}: {e}", i + 1)))
        })
        .collect()
}

fn system_now_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Serves sessions over one read-only forest.
#[derive(Clone)]
pub struct SteeringEngine {
    forest: Arc<Forest>,
    cards: BTreeSet<String>,
    clock: fn() -> u64,
}

impl std::fmt::Debug for SteeringEngine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SteeringEngine")
            .field("forest", &self.forest)
            .field("cards", &self.cards)
            .finish()
    }
}

impl SteeringEngine {
    pub fn new<I, S>(forest: Arc<Forest>, card_ids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        SteeringEngine {
            forest,
            cards: card_ids.into_iter().map(Into::into).collect(),
            clock: system_now_ms,
        }
    }

    /// Replaces the wall clock used for history timestamps.
    pub fn with_clock(mut self, clock: fn() -> u64) -> Self {
        self.clock = clock;
        self
    }

    pub fn forest(&self) -> &Arc<Forest> {
        &self.forest
    }

    pub fn start_session(
        &self,
        id: impl Into<String>,
        mode: SessionMode,
        card_id: &str,
        seed: RngSeed,
    ) -> Result<Session, SteeringError> {
        if !self.cards.contains(card_id) {
            return Err(SteeringError::UnknownCard(card_id.to_string()));
        }
        let id = id.into();
        let history = vec![HistoryEntry::Start {
            session_id: id.clone(),
            mode,
            card_id: card_id.to_string(),
            seed: seed.0,
            at_ms: (self.clock)(),
        }];
        Ok(Session {
            id,
            mode,
            card_id: card_id.to_string(),
            seed,
            state: Session::initial_state(mode),
            selected_path: Vec::new(),
            current: None,
            requests: 0,
            history,
        })
    }

    pub fn request_options(
        &self,
        session: &mut Session,
        constraints: &ConstraintSet,
    ) -> Result<OptionSet, SteeringError> {
        let token = session.requests + 1;
        let mut rng = session.seed.derive(&[(token >> 32) as u32, token as u32]).rng();
        let set = match session.state {
            SessionState::Complete => return Err(SteeringError::SessionComplete),
            SessionState::AwaitingPhrasePick => {
                if !constraints.is_unconstrained() {
                    return Err(SteeringError::IllegalConstraint(
                        "radio sessions take no constraints".into(),
                    ));
                }
                self.radio_options(token, &mut rng)?
            }
            SessionState::AwaitingChunk { depth } => {
                if depth == 1 && constraints.has_relative() {
                    return Err(SteeringError::IllegalConstraint(
                        "relative and key constraints need a previous chunk".into(),
                    ));
                }
                self.steering_options(token, depth, &session.selected_path, constraints, &mut rng)?
            }
        };
        session.requests = token;
        session.history.push(HistoryEntry::Request {
            token,
            depth: set.depth,
            constraints: set.constraints.clone(),
            options: set.options.iter().map(|o| o.path.clone()).collect(),
            relaxed: set.options.iter().map(|o| o.relaxed).collect(),
            shortfall: set.shortfall,
            at_ms: (self.clock)(),
        });
        session.current = Some(set.clone());
        Ok(set)
    }

    fn radio_options<R: Rng>(&self, token: u64, rng: &mut R) -> Result<OptionSet, SteeringError> {
        let config = *self.forest.config();
        let mut paths: Vec<NodePath> = index::sample(rng, config.n1 as usize, RADIO_OPTIONS.min(config.n1 as usize))
            .into_iter()
            .map(|i| {
                let j = rng.random_range(0..config.n2);
                let k = rng.random_range(0..config.n3);
                NodePath::leaf(i as u32, j, k)
            })
            .collect();
        // Fewer roots than options: top up with further distinct phrases.
        let leaves = config.phrase_count();
        let want = (RADIO_OPTIONS as u64).min(leaves) as usize;
        let mut taken: BTreeSet<NodePath> = paths.iter().cloned().collect();
        while paths.len() < want {
            let p = NodePath::leaf(
                rng.random_range(0..config.n1),
                rng.random_range(0..config.n2),
                rng.random_range(0..config.n3),
            );
            if taken.insert(p.clone()) {
                paths.push(p);
            }
        }
        let options = paths
            .into_iter()
            .map(|path| {
                let leaf_id = self.forest.node(&path)?.id;
                let root = self.forest.node(&NodePath::root(path.0[0]))?;
                Ok(OptionEntry {
                    node_id: leaf_id,
                    features: root.features.clone(),
                    path,
                    relaxed: false,
                })
            })
            .collect::<Result<Vec<_>, ForestError>>()?;
        Ok(OptionSet {
            token,
            depth: 3,
            constraints: ConstraintSet::any(),
            matching: leaves as usize,
            shortfall: RADIO_OPTIONS - options.len(),
            options,
        })
    }

    fn steering_options<R: Rng>(
        &self,
        token: u64,
        depth: u8,
        selected: &[u32],
        constraints: &ConstraintSet,
        rng: &mut R,
    ) -> Result<OptionSet, SteeringError> {
        let edges = self.forest.bin_edges();
        if constraints.needs_bins() && edges.is_none() {
            return Err(SteeringError::NotIndexed);
        }
        let (pool, parent) = if depth == 1 {
            (
                self.forest.roots().iter().map(std::borrow::Cow::Borrowed).collect(),
                None,
            )
        } else {
            let parent_path = NodePath(selected.to_vec());
            let parent = self.forest.node(&parent_path)?.features.clone();
            (self.forest.children(&parent_path)?, Some(parent))
        };
        let count = if depth == 1 { ROOT_OPTIONS } else { CONTINUATION_OPTIONS };

        let distances = pool
            .iter()
            .map(|n| constraint_distance(constraints, &n.features, depth, parent.as_ref(), edges))
            .collect::<Result<Vec<_>, _>>()?;
        let matches: Vec<usize> = (0..pool.len()).filter(|&i| distances[i] == 0.0).collect();
        let take = count.min(matches.len());
        let mut chosen: Vec<(usize, bool)> = index::sample(rng, matches.len(), take)
            .into_iter()
            .map(|i| (matches[i], false))
            .collect();
        if take < count {
            let mut rest: Vec<usize> = (0..pool.len()).filter(|&i| distances[i] > 0.0).collect();
            rest.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]).then(a.cmp(&b)));
            chosen.extend(rest.into_iter().take(count - take).map(|i| (i, true)));
        }
        let options = chosen
            .into_iter()
            .map(|(i, relaxed)| OptionEntry {
                path: pool[i].path.clone(),
                node_id: pool[i].id,
                features: pool[i].features.clone(),
                relaxed,
            })
            .collect();
        Ok(OptionSet {
            token,
            depth,
            constraints: constraints.clone(),
            matching: matches.len(),
            shortfall: count.saturating_sub(matches.len()),
            options,
        })
    }

    /// Picks option `index` from the current set. `token`, when given, must
    /// name the current set.
    pub fn select_option(&self, session: &mut Session, token: Option<u64>, index: usize) -> Result<(), SteeringError> {
        if session.is_complete() {
            return Err(SteeringError::SessionComplete);
        }
        let current = session.current.as_ref();
        let current_token = current.map(|s| s.token);
        let set = match (current, token) {
            (Some(set), Some(t)) if t == set.token => set,
            (Some(set), None) => set,
            (_, given) => {
                return Err(SteeringError::StaleSelection {
                    given: given.unwrap_or(0),
                    current: current_token,
                })
            }
        };
        let option = set.options.get(index).ok_or(SteeringError::IndexOutOfRange {
            index,
            len: set.options.len(),
        })?;
        let path = option.path.clone();
        let set_token = set.token;
        session.selected_path = path.0.clone();
        session.state = match (session.mode, path.depth()) {
            (SessionMode::Radio, _) | (SessionMode::Steering, 3) => SessionState::Complete,
            (SessionMode::Steering, d) => SessionState::AwaitingChunk { depth: d + 1 },
        };
        session.current = None;
        session.history.push(HistoryEntry::Select {
            token: set_token,
            index,
            path,
            at_ms: (self.clock)(),
        });
        Ok(())
    }

    pub fn restart_session(&self, session: &mut Session) {
        session.state = Session::initial_state(session.mode);
        session.selected_path.clear();
        session.current = None;
        session.history.push(HistoryEntry::Restart { at_ms: (self.clock)() });
    }

    pub fn export_composition(&self, session: &Session) -> Result<Phrase, SteeringError> {
        if !session.is_complete() {
            return Err(SteeringError::SessionIncomplete);
        }
        match session.selected_path.as_slice() {
            &[i, j, k] => Ok(self.forest.phrase_at(i, j, k)?),
            _ => Err(SteeringError::SessionIncomplete),
        }
    }

    /// Re-runs a history log and checks every logged option set and
    /// selection is reproduced. Timestamps are not compared; the logged ones are kept.
    pub fn replay(&self, history: &[HistoryEntry]) -> Result<Session, SteeringError> {
        let (id, mode, card_id, seed) = match history.first() {
            Some(HistoryEntry::Start {
                session_id,
                mode,
                card_id,
                seed,
                ..
            }) => (session_id.clone(), *mode, card_id.clone(), *seed),
            _ => {
                return Err(SteeringError::MalformedHistory(
                    "history must begin with a start entry".into(),
                ))
            }
        };
        let mut session = self.start_session(id, mode, &card_id, RngSeed(seed))?;
        for (n, entry) in history.iter().enumerate().skip(1) {
            let diverged = |reason: String| SteeringError::ReplayDivergence { entry: n, reason };
            match entry {
                HistoryEntry::Start { .. } => {
                    return Err(SteeringError::MalformedHistory(format!("second start entry at {n}")))
                }
                HistoryEntry::Request { constraints, .. } => {
                    self.request_options(&mut session, constraints)
                        .map_err(|e| diverged(e.to_string()))?;
                }
                HistoryEntry::Select { token, index, .. } => {
                    self.select_option(&mut session, Some(*token), *index)
                        .map_err(|e| diverged(e.to_string()))?;
                }
                HistoryEntry::Restart { .. } => self.restart_session(&mut session),
            }
            let produced = session.history.last_mut().expect("entry just pushed");
            if produced.without_time() != entry.without_time() {
                return Err(diverged(format!("expected {entry:?}, produced {produced:?}")));
            }
            *produced = entry.clone();
        }
        session.history[0] = history[0].clone();
        Ok(session)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forest::{build_forest, ForestConfig};
    use crate::generator::{train, GeneratorSpec};

    fn forest(n1: u32, n2: u32, n3: u32) -> Arc<Forest> {
        let corpus = crate::corpus::synthetic_corpus(RngSeed(4), 6);
        let model = train(&corpus, GeneratorSpec::default()).unwrap();
        let mut f = build_forest(&model, ForestConfig::new(n1, n2, n3, 21)).unwrap();
        f.index_features().unwrap();
        Arc::new(f)
    }

    fn engine(f: Arc<Forest>) -> SteeringEngine {
        SteeringEngine::new(f, ["happy", "fear"]).with_clock(|| 1000)
    }

    #[test]
    fn start_states_and_unknown_card() {
        let e = engine(forest(10, 6, 6));
        assert_eq!(
            e.start_session("a", SessionMode::Radio, "happy", RngSeed(1))
                .unwrap()
                .state,
            SessionState::AwaitingPhrasePick
        );
        assert_eq!(
            e.start_session("b", SessionMode::Steering, "fear", RngSeed(1))
                .unwrap()
                .state,
            SessionState::AwaitingChunk { depth: 1 }
        );
        assert!(matches!(
            e.start_session("c", SessionMode::Steering, "nope", RngSeed(1)),
            Err(SteeringError::UnknownCard(_))
        ));
    }

    #[test]
    fn steering_walk_and_export() {
        let f = forest(12, 6, 6);
        let e = engine(f.clone());
        let mut s = e
            .start_session("s", SessionMode::Steering, "happy", RngSeed(3))
            .unwrap();
        let set = e.request_options(&mut s, &ConstraintSet::any()).unwrap();
        assert_eq!(set.options.len(), 10);
        assert_eq!(set.shortfall, 0);
        let distinct: BTreeSet<_> = set.options.iter().map(|o| o.path.clone()).collect();
        assert_eq!(distinct.len(), 10);
        assert!(matches!(
            e.export_composition(&s),
            Err(SteeringError::SessionIncomplete)
        ));
        e.select_option(&mut s, Some(set.token), 2).unwrap();
        assert_eq!(s.state, SessionState::AwaitingChunk { depth: 2 });
        let root = set.options[2].path.clone();

        let set = e.request_options(&mut s, &ConstraintSet::any()).unwrap();
        assert_eq!(set.options.len(), 5);
        assert!(set.options.iter().all(|o| o.path.parent() == Some(root.clone())));
        assert!(matches!(
            e.select_option(&mut s, Some(set.token), 7),
            Err(SteeringError::IndexOutOfRange { index: 7, len: 5 })
        ));
        e.select_option(&mut s, None, 0).unwrap();
        let set = e.request_options(&mut s, &ConstraintSet::any()).unwrap();
        e.select_option(&mut s, Some(set.token), 4).unwrap();
        assert_eq!(s.state, SessionState::Complete);
        let p = &s.selected_path;
        assert_eq!(
            e.export_composition(&s).unwrap(),
            f.phrase_at(p[0], p[1], p[2]).unwrap()
        );
        assert!(matches!(
            e.request_options(&mut s, &ConstraintSet::any()),
            Err(SteeringError::SessionComplete)
        ));
    }

    #[test]
    fn stale_selection() {
        let e = engine(forest(10, 5, 5));
        let mut s = e
            .start_session("s", SessionMode::Steering, "happy", RngSeed(3))
            .unwrap();
        assert!(matches!(
            e.select_option(&mut s, None, 0),
            Err(SteeringError::StaleSelection { current: None, .. })
        ));
        let first = e.request_options(&mut s, &ConstraintSet::any()).unwrap();
        let second = e.request_options(&mut s, &ConstraintSet::any()).unwrap();
        assert_ne!(first.token, second.token);
        assert!(matches!(
            e.select_option(&mut s, Some(first.token), 0),
            Err(SteeringError::StaleSelection { .. })
        ));
        e.select_option(&mut s, Some(second.token), 0).unwrap();
    }

    #[test]
    fn relative_constraints_are_illegal_at_depth_one_and_in_radio() {
        let e = engine(forest(10, 5, 5));
        let mut s = e
            .start_session("s", SessionMode::Steering, "happy", RngSeed(3))
            .unwrap();
        let rel = ConstraintSet::any().with_relative(Dimension::Tempo, RelativeChoice::Higher);
        assert!(matches!(
            e.request_options(&mut s, &rel),
            Err(SteeringError::IllegalConstraint(_))
        ));
        let key = ConstraintSet::any().with_key(KeyChoice::DifferentKey);
        assert!(matches!(
            e.request_options(&mut s, &key),
            Err(SteeringError::IllegalConstraint(_))
        ));
        let mut r = e.start_session("r", SessionMode::Radio, "happy", RngSeed(3)).unwrap();
        let abs = ConstraintSet::any().with_absolute(Dimension::Pitch, Bin::Low);
        assert!(matches!(
            e.request_options(&mut r, &abs),
            Err(SteeringError::IllegalConstraint(_))
        ));
        assert_eq!(s.history().len(), 1);
    }

    #[test]
    fn unindexed_forest_rejects_binned_constraints() {
        let corpus = crate::corpus::synthetic_corpus(RngSeed(4), 3);
        let model = train(&corpus, GeneratorSpec::default()).unwrap();
        let f = Arc::new(build_forest(&model, ForestConfig::new(10, 2, 2, 1)).unwrap());
        let e = engine(f);
        let mut s = e
            .start_session("s", SessionMode::Steering, "happy", RngSeed(3))
            .unwrap();
        let abs = ConstraintSet::any().with_absolute(Dimension::Pitch, Bin::Low);
        assert!(matches!(
            e.request_options(&mut s, &abs),
            Err(SteeringError::NotIndexed)
        ));
        assert_eq!(
            e.request_options(&mut s, &ConstraintSet::any()).unwrap().options.len(),
            10
        );
    }

    #[test]
    fn radio_offers_ten_phrases_through_distinct_roots() {
        let f = forest(15, 4, 4);
        let e = engine(f.clone());
        let mut s = e.start_session("r", SessionMode::Radio, "happy", RngSeed(8)).unwrap();
        let set = e.request_options(&mut s, &ConstraintSet::any()).unwrap();
        assert_eq!(set.options.len(), 10);
        let roots: BTreeSet<u32> = set.options.iter().map(|o| o.path.0[0]).collect();
        assert_eq!(roots.len(), 10);
        assert!(set.options.iter().all(|o| o.path.depth() == 3 && !o.relaxed));
        e.select_option(&mut s, Some(set.token), 6).unwrap();
        assert!(s.is_complete());
        let p = &set.options[6].path.0;
        assert_eq!(
            e.export_composition(&s).unwrap(),
            f.phrase_at(p[0], p[1], p[2]).unwrap()
        );
    }

    #[test]
    fn radio_with_few_roots_still_offers_distinct_phrases() {
        let e = engine(forest(5, 3, 3));
        let mut s = e.start_session("r", SessionMode::Radio, "happy", RngSeed(8)).unwrap();
        let set = e.request_options(&mut s, &ConstraintSet::any()).unwrap();
        let distinct: BTreeSet<_> = set.options.iter().map(|o| o.path.clone()).collect();
        assert_eq!(distinct.len(), 10);
        assert_eq!(set.shortfall, 0);
    }

    #[test]
    fn shortfall_is_filled_with_relaxed_options() {
        let f = forest(10, 20, 3);
        let e = engine(f.clone());
        let mut s = e
            .start_session("s", SessionMode::Steering, "happy", RngSeed(2))
            .unwrap();
        let set = e.request_options(&mut s, &ConstraintSet::any()).unwrap();
        e.select_option(&mut s, Some(set.token), 0).unwrap();
        let root = NodePath(s.selected_path.clone());
        let edges = f.bin_edges().unwrap();
        let kids = f.children(&root).unwrap();
        // The bin with the fewest children of this root.
        let (bin, n) = Bin::ALL
            .iter()
            .map(|&b| {
                let n = kids
                    .iter()
                    .filter(|k| edges.bin_of(k.features.tempo, Dimension::Tempo, 2).unwrap() == b)
                    .count();
                (b, n)
            })
            .min_by_key(|&(_, n)| n)
            .unwrap();
        assert!(n < 5);
        let c = ConstraintSet::any().with_absolute(Dimension::Tempo, bin);
        let set = e.request_options(&mut s, &c).unwrap();
        assert_eq!(set.options.len(), 5);
        assert_eq!(set.matching, n);
        assert_eq!(set.shortfall, 5 - n);
        assert_eq!(set.options.iter().filter(|o| o.relaxed).count(), 5 - n);
        for o in &set.options {
            let ok = edges.bin_of(o.features.tempo, Dimension::Tempo, 2).unwrap() == bin;
            assert_eq!(ok, !o.relaxed);
        }
        // matches come first, relaxed fill after
        let first_relaxed = set.options.iter().position(|o| o.relaxed).unwrap();
        assert_eq!(first_relaxed, n);
    }

    #[test]
    fn restart_keeps_history() {
        let e = engine(forest(10, 5, 5));
        let mut s = e
            .start_session("s", SessionMode::Steering, "happy", RngSeed(3))
            .unwrap();
        for _ in 0..3 {
            let set = e.request_options(&mut s, &ConstraintSet::any()).unwrap();
            e.select_option(&mut s, Some(set.token), 0).unwrap();
        }
        assert!(s.is_complete());
        e.restart_session(&mut s);
        assert_eq!(s.state, SessionState::AwaitingChunk { depth: 1 });
        e.restart_session(&mut s);
        let restarts = s
            .history()
            .iter()
            .filter(|h| matches!(h, HistoryEntry::Restart { .. }))
            .count();
        assert_eq!(restarts, 2);
        assert_eq!(s.history().len(), 1 + 6 + 2);

        let mut r = e.start_session("r", SessionMode::Radio, "happy", RngSeed(3)).unwrap();
        e.request_options(&mut r, &ConstraintSet::any()).unwrap();
        e.restart_session(&mut r);
        assert_eq!(r.state, SessionState::AwaitingPhrasePick);
        assert!(r.current.is_none());
    }

    #[test]
    fn replay_reproduces_sessions_and_detects_tampering() {
        let f = forest(12, 8, 8);
        let e = engine(f.clone());
        let mut s = e
            .start_session("s", SessionMode::Steering, "fear", RngSeed(99))
            .unwrap();
        let set = e.request_options(&mut s, &ConstraintSet::any()).unwrap();
        e.select_option(&mut s, Some(set.token), 3).unwrap();
        let c = ConstraintSet::any()
            .with_relative(Dimension::Pitch, RelativeChoice::Lower)
            .with_absolute(Dimension::Tempo, Bin::High);
        e.request_options(&mut s, &c).unwrap();
        let set = e.request_options(&mut s, &c).unwrap();
        e.select_option(&mut s, Some(set.token), 1).unwrap();
        e.restart_session(&mut s);
        let set = e.request_options(&mut s, &ConstraintSet::any()).unwrap();
        e.select_option(&mut s, Some(set.token), 0).unwrap();

        let text = s.history_jsonl();
        let parsed = parse_history_jsonl(&text).unwrap();
        assert_eq!(parsed, s.history());
        let replayed = SteeringEngine::new(f.clone(), ["fear"]).replay(&parsed).unwrap();
        // A different clock still restores the logged timestamps.
        assert_eq!(replayed, s);

        let mut tampered = parsed.clone();
        if let HistoryEntry::Request { options, .. } = &mut tampered[1] {
            options.swap(0, 1);
        }
        assert!(matches!(
            e.replay(&tampered),
            Err(SteeringError::ReplayDivergence { entry: 1, .. })
        ));
        assert!(matches!(
            e.replay(&parsed[1..]),
            Err(SteeringError::MalformedHistory(_))
        ));
        assert!(parse_history_jsonl("{not json").is_err());
    }

    #[test]
    fn constraint_json_shape() {
        let c: ConstraintSet = serde_json::from_str(
            r#"{"absolute": {"tempo": "very_low", "pitch": "any"}, "relative": {"dissonance": "higher"}, "key_relation": "different_key"}"#,
        )
        .unwrap();
        assert_eq!(c.absolute[&Dimension::Tempo], AbsoluteChoice::VeryLow);
        assert_eq!(c.relative[&Dimension::Dissonance], RelativeChoice::Higher);
        assert_eq!(c.key_relation, KeyChoice::DifferentKey);
        let empty: ConstraintSet = serde_json::from_str("{}").unwrap();
        assert!(empty.is_unconstrained());
        let all_any: ConstraintSet = serde_json::from_str(r#"{"absolute": {"tempo": "any"}}"#).unwrap();
        assert!(all_any.is_unconstrained());
    }
}
