//! Response bodies. 64-bit ids, seeds and tokens are sent as decimal
//! strings so JavaScript clients keep every bit.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use chunkforest::events::Note;
use chunkforest::features::{Bin, Dimension, FeatureVector};
use chunkforest::forest::{Forest, NodePath};
use chunkforest::steering::{ConstraintSet, HistoryEntry, OptionEntry, OptionSet, Session, SessionMode, SessionState};
use chunkforest::study::{Comparison, OptionSlot};

use crate::ApiError;

/// A u64 given either as a JSON number or a decimal string.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(untagged)]
pub enum SeedValue {
    Number(u64),
    Text(String),
}

impl SeedValue {
    pub fn value(self) -> Result<u64, ApiError> {
        match self {
            SeedValue::Number(n) => Ok(n),
            SeedValue::Text(s) => s
                .trim()
                .parse()
                .map_err(|_| ApiError::invalid_body(format!("{s:?} is not an unsigned 64-bit integer"))),
        }
    }
}

pub fn state_label(state: SessionState) -> String {
    match state {
        SessionState::AwaitingChunk { depth } => format!("awaiting_chunk_{depth}"),
        SessionState::AwaitingPhrasePick => "awaiting_phrase_pick".into(),
        SessionState::Complete => "complete".into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub id: String,
    pub mode: SessionMode,
    pub card_id: String,
    pub seed: String,
    pub state: String,
    /// Depth of the next chunk to pick; absent unless awaiting a chunk.
    pub depth: Option<u8>,
    pub selected_path: Vec<u32>,
    pub requests_made: u64,
    pub current_options: Option<OptionSetView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryView {
    #[serde(flatten)]
    pub session: SessionView,
    pub history: Vec<HistoryEntry>,
}

pub fn session_view(forest: &Forest, session: &Session) -> Result<SessionView, ApiError> {
    let depth = match session.state {
        SessionState::AwaitingChunk { depth } => Some(depth),
        _ => None,
    };
    Ok(SessionView {
        id: session.id.clone(),
        mode: session.mode,
        card_id: session.card_id.clone(),
        seed: session.seed.0.to_string(),
        state: state_label(session.state),
        depth,
        selected_path: session.selected_path.clone(),
        requests_made: session.requests_made(),
        current_options: session
            .current
            .as_ref()
            .map(|set| OptionSetView::new(forest, session.mode, set))
            .transpose()?,
    })
}

/// Notes of the whole path up to and including the option, in phrase time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preview {
    pub duration_ms: u32,
    /// Where the offered chunk begins; earlier notes are its prefix.
    pub chunk_start_ms: u32,
    pub notes: Vec<Note>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptionView {
    pub index: usize,
    pub path: NodePath,
    pub node_id: String,
    pub features: FeatureVector,
    /// Quintile of each binned feature; empty when the forest is not indexed.
    pub bins: BTreeMap<Dimension, Bin>,
    pub relaxed: bool,
    pub preview: Preview,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptionSetView {
    pub token: String,
    pub depth: u8,
    pub constraints: ConstraintSet,
    pub matching: usize,
    pub shortfall: usize,
    pub options: Vec<OptionView>,
}

impl OptionSetView {
    pub fn new(forest: &Forest, mode: SessionMode, set: &OptionSet) -> Result<Self, ApiError> {
        let options = set
            .options
            .iter()
            .enumerate()
            .map(|(index, o)| option_view(forest, mode, index, o))
            .collect::<Result<_, _>>()?;
        Ok(OptionSetView {
            token: set.token.to_string(),
            depth: set.depth,
            constraints: set.constraints.clone(),
            matching: set.matching,
            shortfall: set.shortfall,
            options,
        })
    }
}

fn option_view(forest: &Forest, mode: SessionMode, index: usize, o: &OptionEntry) -> Result<OptionView, ApiError> {
    let phrase = forest.phrase_along(&o.path)?;
    let chunks = phrase.chunks();
    // Radio options are whole phrases described by their first chunk.
    let (feature_depth, chunk_start_ms) = match mode {
        SessionMode::Radio => (1, 0),
        SessionMode::Steering => (
            o.path.depth(),
            chunks[..chunks.len() - 1].iter().map(|c| c.duration_ms()).sum(),
        ),
    };
    let bins = match forest.bin_edges() {
        Some(edges) => Dimension::ALL
            .iter()
            .filter_map(|&d| edges.bin_of(o.features.value(d), d, feature_depth).ok().map(|b| (d, b)))
            .collect(),
        None => BTreeMap::new(),
    };
    Ok(OptionView {
        index,
        path: o.path.clone(),
        node_id: o.node_id.to_string(),
        features: o.features.clone(),
        bins,
        relaxed: o.relaxed,
        preview: Preview {
            duration_ms: phrase.total_duration_ms(),
            chunk_start_ms,
            notes: phrase.to_notes().notes,
        },
    })
}

/// Option order for one listener and comparison.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Presentation {
    pub listener_id: String,
    pub comparison_id: String,
    pub card_id: String,
    pub treatment_option: OptionSlot,
    /// Session played as option 1 and option 2, when registered.
    pub option1_session: Option<String>,
    pub option2_session: Option<String>,
}

impl Presentation {
    pub fn new(listener_id: &str, c: &Comparison, slot: OptionSlot) -> Self {
        let (first, second) = match slot {
            OptionSlot::Option1 => (&c.treatment_session, &c.baseline_session),
            OptionSlot::Option2 => (&c.baseline_session, &c.treatment_session),
        };
        Presentation {
            listener_id: listener_id.into(),
            comparison_id: c.id.clone(),
            card_id: c.card_id.clone(),
            treatment_option: slot,
            option1_session: first.clone(),
            option2_session: second.clone(),
        }
    }
}
