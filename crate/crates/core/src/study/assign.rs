//! Counterbalanced composer assignments and the comparison plan.
//!
//! Each composer does two comparisons, one of interfaces and one of models,
//! each with its own randomly drawn card. Which comparison comes first, and
//! which system comes first inside each comparison, are split as evenly as
//! the cohort size allows.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::cards::Deck;
use super::StudyError;
use crate::seed::RngSeed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComparisonKind {
    /// Radio vs Steering on the same generator.
    Interface,
    /// The erratic vs the coherent generator, both through Radio.
    Model,
}

impl ComparisonKind {
    pub const ALL: [ComparisonKind; 2] = [ComparisonKind::Interface, ComparisonKind::Model];

    pub fn name(self) -> &'static str {
        match self {
            ComparisonKind::Interface => "interface",
            ComparisonKind::Model => "model",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    /// The system a positive rating favours.
    pub fn treatment(self) -> &'static str {
        match self {
            ComparisonKind::Interface => "steering",
            ComparisonKind::Model => "coherent",
        }
    }

    pub fn baseline(self) -> &'static str {
        match self {
            ComparisonKind::Interface => "radio",
            ComparisonKind::Model => "erratic",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComparisonAssignment {
    pub composer_id: String,
    pub kind: ComparisonKind,
    pub card_id: String,
    /// The composer uses the treatment system before the baseline.
    pub treatment_first: bool,
    /// This comparison is the composer's first of the two.
    pub comparison_first: bool,
}

impl ComparisonAssignment {
    pub fn comparison_id(&self) -> String {
        comparison_id(&self.composer_id, self.kind)
    }
}

pub fn comparison_id(composer_id: &str, kind: ComparisonKind) -> String {
    format!("{composer_id}-{}", kind.name())
}

/// `true` for exactly `n / 2` (rounded up or down at random) of `n` slots,
/// in shuffled positions.
fn balanced_flags<R: Rng>(n: usize, rng: &mut R) -> Vec<bool> {
    let mut trues = n / 2;
    if n % 2 == 1 && rng.random_bool(0.5) {
        trues += 1;
    }
    let mut flags: Vec<bool> = (0..n).map(|i| i < trues).collect();
    flags.shuffle(rng);
    flags
}

/// Two assignments per composer, interface comparison first in the list.
pub fn make_assignments(composer_ids: &[String], deck: &Deck, seed: RngSeed) -> Vec<ComparisonAssignment> {
    let mut rng = seed.rng();
    let n = composer_ids.len();
    let interface_first = balanced_flags(n, &mut rng);
    let steering_first = balanced_flags(n, &mut rng);
    let coherent_first = balanced_flags(n, &mut rng);
    let cards = deck.cards();
    let mut out = Vec::with_capacity(2 * n);
    for (i, composer) in composer_ids.iter().enumerate() {
        for kind in ComparisonKind::ALL {
            let card = &cards[rng.random_range(0..cards.len())];
            let (treatment_first, comparison_first) = match kind {
                ComparisonKind::Interface => (steering_first[i], interface_first[i]),
                ComparisonKind::Model => (coherent_first[i], !interface_first[i]),
            };
            out.push(ComparisonAssignment {
                composer_id: composer.clone(),
                kind,
                card_id: card.id.clone(),
                treatment_first,
                comparison_first,
            });
        }
    }
    out
}

/// The comparisons that reach listeners, after any drops.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudyPlan {
    pub comparisons: Vec<ComparisonAssignment>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bookkeeping {
    pub comparisons: usize,
    pub interface_comparisons: usize,
    pub model_comparisons: usize,
    pub listeners: usize,
    /// One head-to-head judgement of a pair by one listener.
    pub pair_ratings: usize,
    /// Pair ratings times the number of questions asked per pair.
    pub question_ratings: usize,
}

impl StudyPlan {
    pub fn new(assignments: Vec<ComparisonAssignment>) -> Self {
        StudyPlan {
            comparisons: assignments,
        }
    }

    /// Removes a comparison, e.g. when a composer did not finish it.
    pub fn drop_comparison(
        &mut self,
        composer_id: &str,
        kind: ComparisonKind,
    ) -> Result<ComparisonAssignment, StudyError> {
        let pos = self
            .comparisons
            .iter()
            .position(|a| a.composer_id == composer_id && a.kind == kind)
            .ok_or_else(|| StudyError::UnknownComparison(comparison_id(composer_id, kind)))?;
        Ok(self.comparisons.remove(pos))
    }

    pub fn count(&self, kind: ComparisonKind) -> usize {
        self.comparisons.iter().filter(|a| a.kind == kind).count()
    }

    pub fn bookkeeping(&self, listeners: usize) -> Bookkeeping {
        let comparisons = self.comparisons.len();
        Bookkeeping {
            comparisons,
            interface_comparisons: self.count(ComparisonKind::Interface),
            model_comparisons: self.count(ComparisonKind::Model),
            listeners,
            pair_ratings: comparisons * listeners,
            question_ratings: comparisons * listeners * super::ratings::Question::ALL.len(),
        }
    }
}
