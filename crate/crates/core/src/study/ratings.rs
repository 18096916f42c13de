//! Listener head-to-head ratings, composer questionnaires and their store.
//!
//! Listeners answer on a five-level balanced scale about "option 1" and
//! "option 2". Which system sat in which slot is randomized per listener,
//! so the stored number is oriented: positive always favours the treatment
//! (Steering for interface comparisons, the coherent model for model
//! comparisons).

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::assign::{ComparisonAssignment, ComparisonKind};
use super::StudyError;

pub const EVOKES_TEXT: &str =
    "Which one of these musical excerpts most evokes the feelings of the words and imagery on the card?";
pub const MUSICAL_TEXT: &str = "Which one sounded more musical";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Question {
    Evokes,
    Musical,
}

impl Question {
    pub const ALL: [Question; 2] = [Question::Evokes, Question::Musical];

    /// The wording shown to listeners.
    pub fn text(self) -> &'static str {
        match self {
            Question::Evokes => EVOKES_TEXT,
            Question::Musical => MUSICAL_TEXT,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Question::Evokes => "evokes",
            Question::Musical => "musical",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|q| q.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum RawAnswer {
    StrongOption1,
    WeakOption1,
    NoPreference,
    WeakOption2,
    StrongOption2,
}

impl RawAnswer {
    pub const ALL: [RawAnswer; 5] = [
        RawAnswer::StrongOption1,
        RawAnswer::WeakOption1,
        RawAnswer::NoPreference,
        RawAnswer::WeakOption2,
        RawAnswer::StrongOption2,
    ];

    pub fn label(self) -> &'static str {
        match self {
            RawAnswer::StrongOption1 => "Strong preference for option 1",
            RawAnswer::WeakOption1 => "Weak preference for option 1",
            RawAnswer::NoPreference => "No preference",
            RawAnswer::WeakOption2 => "Weak preference for option 2",
            RawAnswer::StrongOption2 => "Strong preference for option 2",
        }
    }

    /// Scale position, −2 (strongly option 1) to +2 (strongly option 2).
    pub fn toward_option2(self) -> i8 {
        self as i8 - 2
    }

    /// The same strength of preference for the other slot.
    pub fn mirrored(self) -> RawAnswer {
        RawAnswer::ALL[4 - self as usize]
    }

    /// Accepts the labels (case-insensitive, "option2" or "option 2") and
    /// snake-case ids such as `weak_option2`.
    pub fn parse(s: &str) -> Option<Self> {
        let norm: String = s
            .trim()
            .to_ascii_lowercase()
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect();
        Some(match norm.as_str() {
            "strongpreferenceforoption1" | "strongoption1" => RawAnswer::StrongOption1,
            "weakpreferenceforoption1" | "weakoption1" => RawAnswer::WeakOption1,
            "nopreference" => RawAnswer::NoPreference,
            "weakpreferenceforoption2" | "weakoption2" => RawAnswer::WeakOption2,
            "strongpreferenceforoption2" | "strongoption2" => RawAnswer::StrongOption2,
            _ => return None,
        })
    }
}

impl fmt::Display for RawAnswer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl TryFrom<String> for RawAnswer {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        RawAnswer::parse(&s).ok_or_else(|| format!("unknown answer {s:?}"))
    }
}

impl From<RawAnswer> for String {
    fn from(r: RawAnswer) -> String {
        r.label().to_string()
    }
}

/// Displayed position of a system in a head-to-head pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum OptionSlot {
    Option1,
    Option2,
}

impl TryFrom<u8> for OptionSlot {
    type Error = String;
    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            1 => Ok(OptionSlot::Option1),
            2 => Ok(OptionSlot::Option2),
            _ => Err(format!("option slot must be 1 or 2, got {v}")),
        }
    }
}

impl From<OptionSlot> for u8 {
    fn from(s: OptionSlot) -> u8 {
        match s {
            OptionSlot::Option1 => 1,
            OptionSlot::Option2 => 2,
        }
    }
}

/// Oriented score in [−2, 2]: positive favours the treatment system.
pub fn numeric_score(raw: RawAnswer, treatment: OptionSlot) -> i8 {
    match treatment {
        OptionSlot::Option2 => raw.toward_option2(),
        OptionSlot::Option1 => -raw.toward_option2(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ListenerRating {
    pub listener_id: String,
    pub comparison_id: String,
    pub question: Question,
    pub raw: RawAnswer,
    /// Slot in which the treatment system was played to this listener.
    pub treatment_option: OptionSlot,
    pub numeric: i8,
}

impl ListenerRating {
    pub fn new(
        listener_id: impl Into<String>,
        comparison_id: impl Into<String>,
        question: Question,
        raw: RawAnswer,
        treatment_option: OptionSlot,
    ) -> Self {
        ListenerRating {
            listener_id: listener_id.into(),
            comparison_id: comparison_id.into(),
            question,
            raw,
            treatment_option,
            numeric: numeric_score(raw, treatment_option),
        }
    }
}

/// A rating as submitted; `numeric` is optional and checked when present.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatingSubmission {
    pub listener_id: String,
    pub comparison_id: String,
    pub question: Question,
    pub raw: RawAnswer,
    pub treatment_option: OptionSlot,
    #[serde(default)]
    pub numeric: Option<i8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum System {
    Radio,
    Steering,
    Erratic,
    Coherent,
}

impl System {
    pub fn name(self) -> &'static str {
        match self {
            System::Radio => "radio",
            System::Steering => "steering",
            System::Erratic => "erratic",
            System::Coherent => "coherent",
        }
    }

    fn role_in(self, kind: ComparisonKind) -> Option<bool> {
        match (kind, self) {
            (ComparisonKind::Interface, System::Steering) | (ComparisonKind::Model, System::Coherent) => Some(true),
            (ComparisonKind::Interface, System::Radio) | (ComparisonKind::Model, System::Erratic) => Some(false),
            _ => None,
        }
    }

    pub fn is_treatment_in(self, kind: ComparisonKind) -> bool {
        self.role_in(kind) == Some(true)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    Expressing,
    Communicating,
    MusicalCoherence,
    Ownership,
    Control,
    Efficacy,
}

impl Measure {
    pub const ALL: [Measure; 6] = [
        Measure::Expressing,
        Measure::Communicating,
        Measure::MusicalCoherence,
        Measure::Ownership,
        Measure::Control,
        Measure::Efficacy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Measure::Expressing => "expressing",
            Measure::Communicating => "communicating",
            Measure::MusicalCoherence => "musical_coherence",
            Measure::Ownership => "ownership",
            Measure::Control => "control",
            Measure::Efficacy => "efficacy",
        }
    }
}

pub const COMPOSER_SCALE: std::ops::RangeInclusive<u8> = 1..=7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComposerRatings {
    pub expressing: u8,
    pub communicating: u8,
    pub musical_coherence: u8,
    pub ownership: u8,
    pub control: u8,
    pub efficacy: u8,
}

impl ComposerRatings {
    pub fn get(&self, m: Measure) -> u8 {
        match m {
            Measure::Expressing => self.expressing,
            Measure::Communicating => self.communicating,
            Measure::MusicalCoherence => self.musical_coherence,
            Measure::Ownership => self.ownership,
            Measure::Control => self.control,
            Measure::Efficacy => self.efficacy,
        }
    }

    pub fn uniform(v: u8) -> Self {
        ComposerRatings {
            expressing: v,
            communicating: v,
            musical_coherence: v,
            ownership: v,
            control: v,
            efficacy: v,
        }
    }
}

/// A composer's questionnaire about one of their two compositions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComposerReport {
    pub composer_id: String,
    pub kind: ComparisonKind,
    pub system: System,
    pub ratings: ComposerRatings,
}

impl ComposerReport {
    pub fn validate(&self) -> Result<(), StudyError> {
        if self.system.role_in(self.kind).is_none() {
            return Err(StudyError::SystemMismatch {
                system: self.system.name().into(),
                kind: self.kind.name().into(),
            });
        }
        for m in Measure::ALL {
            let v = self.ratings.get(m);
            if !COMPOSER_SCALE.contains(&v) {
                return Err(StudyError::RatingOutOfRange {
                    measure: m.name().into(),
                    value: v,
                });
            }
        }
        Ok(())
    }
}

/// One listened-to pair: the two compositions a composer made for a card.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Comparison {
    pub id: String,
    pub composer_id: String,
    pub kind: ComparisonKind,
    pub card_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub treatment_session: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_session: Option<String>,
}

impl From<&ComparisonAssignment> for Comparison {
    fn from(a: &ComparisonAssignment) -> Self {
        Comparison {
            id: a.comparison_id(),
            composer_id: a.composer_id.clone(),
            kind: a.kind,
            card_id: a.card_id.clone(),
            treatment_session: None,
            baseline_session: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recorded {
    New,
    Duplicate,
}

/// Flat rating row, the shape of `ratings.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingRow {
    pub listener_id: String,
    pub comparison_id: String,
    pub kind: ComparisonKind,
    pub card: String,
    pub question: Question,
    pub raw: RawAnswer,
    pub numeric: i8,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Journal {
    Comparison(Comparison),
    Presentation {
        listener_id: String,
        comparison_id: String,
        treatment_option: OptionSlot,
    },
    Rating(ListenerRating),
    ComposerReport(ComposerReport),
}

/// Comparisons, listener ratings and composer reports. Optionally backed by
/// an append-only JSON-lines journal that is replayed on open.
#[derive(Debug, Default)]
pub struct RatingStore {
    comparisons: BTreeMap<String, Comparison>,
    presentations: BTreeMap<(String, String), OptionSlot>,
    ratings: BTreeMap<(String, String, Question), ListenerRating>,
    composer_reports: BTreeMap<(String, ComparisonKind, System), ComposerReport>,
    journal: Option<PathBuf>,
}

fn io(path: &Path, e: std::io::Error) -> StudyError {
    StudyError::Io(format!("{}: {e}", path.display()))
}

impl RatingStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Opens (or creates) a journal-backed store.
    pub fn open(journal: &Path) -> Result<Self, StudyError> {
        let mut store = RatingStore::new();
        if journal.exists() {
            let file = File::open(journal).map_err(|e| io(journal, e))?;
            for (n, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| io(journal, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let entry: Journal = serde_json::from_str(&line)
                    .map_err(|e| StudyError::Parse(format!("{} line {}: {e}", journal.display(), n + 1)))?;
                store.apply(entry)?;
            }
        } else if let Some(parent) = journal.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| io(parent, e))?;
        }
        store.journal = Some(journal.to_path_buf());
        Ok(store)
    }

    fn apply(&mut self, entry: Journal) -> Result<(), StudyError> {
        match entry {
            Journal::Comparison(c) => self.insert_comparison(c).map(|_| ()),
            Journal::Presentation {
                listener_id,
                comparison_id,
                treatment_option,
            } => {
                self.presentations
                    .insert((listener_id, comparison_id), treatment_option);
                Ok(())
            }
            Journal::Rating(r) => self.insert_rating(r).map(|_| ()),
            Journal::ComposerReport(r) => self.insert_composer_report(r).map(|_| ()),
        }
    }

    fn append(&self, entry: &Journal) -> Result<(), StudyError> {
        if let Some(path) = &self.journal {
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| io(path, e))?;
            let mut line = serde_json::to_string(entry).expect("journal entries serialize");
            line.push('\n');
            f.write_all(line.as_bytes()).map_err(|e| io(path, e))?;
        }
        Ok(())
    }

    fn insert_comparison(&mut self, c: Comparison) -> Result<Recorded, StudyError> {
        match self.comparisons.get(&c.id) {
            Some(existing) if *existing == c => Ok(Recorded::Duplicate),
            Some(_) => Err(StudyError::Conflict(format!(
                "comparison {} already registered differently",
                c.id
            ))),
            None => {
                self.comparisons.insert(c.id.clone(), c);
                Ok(Recorded::New)
            }
        }
    }

    pub fn register_comparison(&mut self, c: Comparison) -> Result<Recorded, StudyError> {
        let result = self.insert_comparison(c.clone())?;
        if result == Recorded::New {
            self.append(&Journal::Comparison(c))?;
        }
        Ok(result)
    }

    pub fn comparison(&self, id: &str) -> Option<&Comparison> {
        self.comparisons.get(id)
    }

    pub fn comparisons(&self) -> impl Iterator<Item = &Comparison> {
        self.comparisons.values()
    }

    /// Slot of the treatment for this listener: the logged one, or a fresh
    /// pseudo-random draw keyed by (listener, comparison), which is logged.
    pub fn present(&mut self, listener_id: &str, comparison_id: &str) -> Result<OptionSlot, StudyError> {
        if !self.comparisons.contains_key(comparison_id) {
            return Err(StudyError::UnknownComparison(comparison_id.into()));
        }
        let key = (listener_id.to_string(), comparison_id.to_string());
        if let Some(&slot) = self.presentations.get(&key) {
            return Ok(slot);
        }
        let mut h = Sha256::new();
        h.update(listener_id.as_bytes());
        h.update([0]);
        h.update(comparison_id.as_bytes());
        let slot = if h.finalize()[0] & 1 == 0 {
            OptionSlot::Option1
        } else {
            OptionSlot::Option2
        };
        self.presentations.insert(key, slot);
        self.append(&Journal::Presentation {
            listener_id: listener_id.into(),
            comparison_id: comparison_id.into(),
            treatment_option: slot,
        })?;
        Ok(slot)
    }

    fn insert_rating(&mut self, r: ListenerRating) -> Result<Recorded, StudyError> {
        if !self.comparisons.contains_key(&r.comparison_id) {
            return Err(StudyError::UnknownComparison(r.comparison_id.clone()));
        }
        if r.numeric != numeric_score(r.raw, r.treatment_option) {
            return Err(StudyError::OrderingMismatch(format!(
                "{:?} with the treatment as option {} is {}, not {}",
                r.raw.label(),
                u8::from(r.treatment_option),
                numeric_score(r.raw, r.treatment_option),
                r.numeric
            )));
        }
        let pkey = (r.listener_id.clone(), r.comparison_id.clone());
        match self.presentations.get(&pkey) {
            Some(&slot) if slot != r.treatment_option => {
                return Err(StudyError::OrderingMismatch(format!(
                    "listener {} was shown the treatment as option {}",
                    r.listener_id,
                    u8::from(slot)
                )))
            }
            Some(_) => {}
            None => {
                self.presentations.insert(pkey, r.treatment_option);
            }
        }
        let key = (r.listener_id.clone(), r.comparison_id.clone(), r.question);
        match self.ratings.get(&key) {
            Some(existing) if *existing == r => Ok(Recorded::Duplicate),
            Some(_) => Err(StudyError::Conflict(format!(
                "listener {} already answered {} for {}",
                r.listener_id,
                r.question.name(),
                r.comparison_id
            ))),
            None => {
                self.ratings.insert(key, r);
                Ok(Recorded::New)
            }
        }
    }

    /// Stores a rating; resubmitting an identical rating is a no-op.
    pub fn record_rating(&mut self, r: ListenerRating) -> Result<Recorded, StudyError> {
        let result = self.insert_rating(r.clone())?;
        if result == Recorded::New {
            self.append(&Journal::Rating(r))?;
        }
        Ok(result)
    }

    pub fn submit_rating(&mut self, s: RatingSubmission) -> Result<(ListenerRating, Recorded), StudyError> {
        let mut rating = ListenerRating::new(s.listener_id, s.comparison_id, s.question, s.raw, s.treatment_option);
        if let Some(n) = s.numeric {
            rating.numeric = n;
        }
        let recorded = self.record_rating(rating.clone())?;
        Ok((rating, recorded))
    }

    pub fn ratings(&self) -> impl Iterator<Item = &ListenerRating> {
        self.ratings.values()
    }

    pub fn rating_count(&self) -> usize {
        self.ratings.len()
    }

    fn insert_composer_report(&mut self, r: ComposerReport) -> Result<Recorded, StudyError> {
        r.validate()?;
        let key = (r.composer_id.clone(), r.kind, r.system);
        match self.composer_reports.get(&key) {
            Some(existing) if *existing == r => Ok(Recorded::Duplicate),
            Some(_) => Err(StudyError::Conflict(format!(
                "composer {} already reported on {}",
                r.composer_id,
                r.system.name()
            ))),
            None => {
                self.composer_reports.insert(key, r);
                Ok(Recorded::New)
            }
        }
    }

    pub fn record_composer_report(&mut self, r: ComposerReport) -> Result<Recorded, StudyError> {
        let result = self.insert_composer_report(r.clone())?;
        if result == Recorded::New {
            self.append(&Journal::ComposerReport(r))?;
        }
        Ok(result)
    }

    pub fn composer_reports(&self) -> impl Iterator<Item = &ComposerReport> {
        self.composer_reports.values()
    }

    /// Ratings joined with their comparison, ordered by (listener,
    /// comparison, question).
    pub fn rating_rows(&self) -> Vec<RatingRow> {
        self.ratings
            .values()
            .filter_map(|r| {
                let c = self.comparisons.get(&r.comparison_id)?;
                Some(RatingRow {
                    listener_id: r.listener_id.clone(),
                    comparison_id: r.comparison_id.clone(),
                    kind: c.kind,
                    card: c.card_id.clone(),
                    question: r.question,
                    raw: r.raw,
                    numeric: r.numeric,
                })
            })
            .collect()
    }
}
