//! Study harness: cards, counterbalanced assignments, listener and composer
//! ratings, paired t-tests and CSV reports.

pub mod assign;
pub mod cards;
pub mod ratings;
pub mod report;
pub mod stats;

use thiserror::Error;

pub use assign::{make_assignments, Bookkeeping, ComparisonAssignment, ComparisonKind, StudyPlan};
pub use cards::{Card, Deck, Feeling};
pub use ratings::{
    numeric_score, Comparison, ComposerRatings, ComposerReport, ListenerRating, Measure, OptionSlot, Question,
    RatingRow, RatingStore, RatingSubmission, RawAnswer, Recorded, System,
};
pub use report::{aggregate_report, aggregate_rows, Report};
pub use stats::{paired_t, StatResult};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StudyError {
    #[error("card {card} has {found} keywords; exactly 3 are required")]
    KeywordCount { card: String, found: usize },
    #[error("duplicate card id {0:?}")]
    DuplicateCard(String),
    #[error("the card deck is empty")]
    EmptyDeck,
    #[error("unknown comparison {0:?}")]
    UnknownComparison(String),
    #[error("rating contradicts the option order: {0}")]
    OrderingMismatch(String),
    #[error("conflicting resubmission: {0}")]
    Conflict(String),
    #[error("{measure} rating {value} is outside 1..=7")]
    RatingOutOfRange { measure: String, value: u8 },
    #[error("system {system} is not part of a {kind} comparison")]
    SystemMismatch { system: String, kind: String },
    #[error("a t-test needs at least 2 values, got {n}")]
    DegenerateSample { n: usize },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("i/o error: {0}")]
    Io(String),
}
