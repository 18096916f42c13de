//! Timed performance events for polyphonic piano music.
//!
//! The vocabulary is fixed at 388 events: 128 note-ons, 128 note-offs,
//! 100 time shifts on a 10 ms grid (10..=1000 ms) and 32 velocity bins.
//! Each event has a stable integer id used by the generator and by the
//! on-disk forest format.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Time grid resolution in milliseconds.
pub const TIME_STEP_MS: u32 = 10;
/// Longest single time shift.
pub const MAX_SHIFT_MS: u32 = 1000;
pub const VELOCITY_BINS: u8 = 32;
/// Velocity bin assumed before any `SetVelocity` has been seen.
pub const DEFAULT_VELOCITY_BIN: u8 = 16;
pub const VOCAB_SIZE: usize = 128 + 128 + 100 + 32;

/// Length of one forest chunk.
pub const CHUNK_MS: u32 = 5000;
/// Length of a complete three-chunk phrase.
pub const PHRASE_MS: u32 = 3 * CHUNK_MS;
pub const CHUNKS_PER_PHRASE: usize = 3;

const NOTE_OFF_BASE: u16 = 128;
const SHIFT_BASE: u16 = 256;
const VELOCITY_BASE: u16 = 356;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EventError {
    #[error("pitch {0} is outside 0..=127")]
    InvalidPitch(u8),
    #[error("time shift of {0} ms is not a multiple of 10 in 10..=1000")]
    InvalidTimeShift(u32),
    #[error("velocity bin {0} is outside 0..=31")]
    InvalidVelocity(u8),
    #[error("event id {0} is outside the vocabulary")]
    InvalidEventId(u16),
    #[error("malformed sequence: note-off for pitch {pitch} at event {index} with no sounding note")]
    MalformedSequence { index: usize, pitch: u8 },
    #[error("a phrase holds 1 to 3 chunks, got {0}")]
    InvalidPhraseLength(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum PerformanceEvent {
    NoteOn(u8),
    NoteOff(u8),
    /// Duration in milliseconds.
    TimeShift(u32),
    SetVelocity(u8),
}

impl PerformanceEvent {
    pub fn note_on(pitch: u8) -> Result<Self, EventError> {
        let ev = PerformanceEvent::NoteOn(pitch);
        ev.validate().map(|_| ev)
    }

    pub fn note_off(pitch: u8) -> Result<Self, EventError> {
        let ev = PerformanceEvent::NoteOff(pitch);
        ev.validate().map(|_| ev)
    }

    pub fn time_shift(ms: u32) -> Result<Self, EventError> {
        let ev = PerformanceEvent::TimeShift(ms);
        ev.validate().map(|_| ev)
    }

    pub fn set_velocity(bin: u8) -> Result<Self, EventError> {
        let ev = PerformanceEvent::SetVelocity(bin);
        ev.validate().map(|_| ev)
    }

    pub fn validate(&self) -> Result<(), EventError> {
        match *self {
            PerformanceEvent::NoteOn(p) | PerformanceEvent::NoteOff(p) if p > 127 => Err(EventError::InvalidPitch(p)),
            PerformanceEvent::TimeShift(ms) if ms == 0 || ms > MAX_SHIFT_MS || ms % TIME_STEP_MS != 0 => {
                Err(EventError::InvalidTimeShift(ms))
            }
            PerformanceEvent::SetVelocity(b) if b >= VELOCITY_BINS => Err(EventError::InvalidVelocity(b)),
            _ => Ok(()),
        }
    }

    /// Vocabulary index. Only meaningful for valid events.
    pub fn id(&self) -> u16 {
        match *self {
            PerformanceEvent::NoteOn(p) => u16::from(p),
            PerformanceEvent::NoteOff(p) => NOTE_OFF_BASE + u16::from(p),
            PerformanceEvent::TimeShift(ms) => SHIFT_BASE + (ms / TIME_STEP_MS) as u16 - 1,
            PerformanceEvent::SetVelocity(b) => VELOCITY_BASE + u16::from(b),
        }
    }

    pub fn from_id(id: u16) -> Result<Self, EventError> {
        Ok(match id {
            0..=127 => PerformanceEvent::NoteOn(id as u8),
            128..=255 => PerformanceEvent::NoteOff((id - NOTE_OFF_BASE) as u8),
            256..=355 => PerformanceEvent::TimeShift(u32::from(id - SHIFT_BASE + 1) * TIME_STEP_MS),
            356..=387 => PerformanceEvent::SetVelocity((id - VELOCITY_BASE) as u8),
            _ => return Err(EventError::InvalidEventId(id)),
        })
    }

    pub fn shift_ms(&self) -> u32 {
        match *self {
            PerformanceEvent::TimeShift(ms) => ms,
            _ => 0,
        }
    }
}

impl fmt::Display for PerformanceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PerformanceEvent::NoteOn(p) => write!(f, "ON({p})"),
            PerformanceEvent::NoteOff(p) => write!(f, "OFF({p})"),
            PerformanceEvent::TimeShift(ms) => write!(f, "SHIFT({ms})"),
            PerformanceEvent::SetVelocity(b) => write!(f, "VEL({b})"),
        }
    }
}

/// Notes still sounding at a sequence boundary, plus the current velocity.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Carry {
    /// pitch -> velocity bin of the note that is sounding.
    pub sounding: BTreeMap<u8, u8>,
    /// Velocity bin in effect; `None` means nothing has set it yet.
    pub velocity: Option<u8>,
}

impl Carry {
    pub fn is_sounding(&self, pitch: u8) -> bool {
        self.sounding.contains_key(&pitch)
    }

    pub fn velocity_bin(&self) -> u8 {
        self.velocity.unwrap_or(DEFAULT_VELOCITY_BIN)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Note {
    pub onset_ms: u32,
    pub duration_ms: u32,
    pub pitch: u8,
    pub velocity: u8,
}

impl Note {
    pub fn end_ms(&self) -> u32 {
        self.onset_ms + self.duration_ms
    }
}

/// Notes sorted by `(onset, pitch, duration, velocity)`; every duration is positive.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct NoteList {
    pub notes: Vec<Note>,
}

impl NoteList {
    pub fn len(&self) -> usize {
        self.notes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.notes.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Note> {
        self.notes.iter()
    }
}

/// A note started inside a scanned sequence, including zero-length ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ScannedNote {
    pub note: Note,
    /// Still sounding when the sequence ended.
    pub truncated: bool,
}

pub(crate) struct Scan {
    pub notes: Vec<ScannedNote>,
    pub carry_out: Carry,
}

/// Walks the sequence pairing note-ons with note-offs. A note-on for a
/// pitch that is already sounding closes the earlier note first.
pub(crate) fn scan(events: &[PerformanceEvent], carried_in: &Carry) -> Result<Scan, EventError> {
    let mut now = 0u32;
    let mut velocity = carried_in.velocity;
    // pitch -> (index into notes, or None for a carried-in note, velocity)
    let mut open: BTreeMap<u8, (Option<usize>, u8)> =
        carried_in.sounding.iter().map(|(&p, &v)| (p, (None, v))).collect();
    let mut notes: Vec<ScannedNote> = Vec::new();

    for (index, ev) in events.iter().enumerate() {
        ev.validate()?;
        match *ev {
            PerformanceEvent::TimeShift(ms) => now += ms,
            PerformanceEvent::SetVelocity(b) => velocity = Some(b),
            PerformanceEvent::NoteOn(pitch) => {
                if let Some((Some(i), _)) = open.remove(&pitch) {
                    let n = &mut notes[i].note;
                    n.duration_ms = now - n.onset_ms;
                }
                let vel = velocity.unwrap_or(DEFAULT_VELOCITY_BIN);
                notes.push(ScannedNote {
                    note: Note {
                        onset_ms: now,
                        duration_ms: 0,
                        pitch,
                        velocity: vel,
                    },
                    truncated: false,
                });
                open.insert(pitch, (Some(notes.len() - 1), vel));
            }
            PerformanceEvent::NoteOff(pitch) => match open.remove(&pitch) {
                Some((Some(i), _)) => {
                    let n = &mut notes[i].note;
                    n.duration_ms = now - n.onset_ms;
                }
                Some((None, _)) => {}
                None => return Err(EventError::MalformedSequence { index, pitch }),
            },
        }
    }

    let mut sounding = BTreeMap::new();
    for (pitch, (slot, vel)) in open {
        if let Some(i) = slot {
            let n = &mut notes[i];
            n.note.duration_ms = now - n.note.onset_ms;
            n.truncated = true;
        }
        sounding.insert(pitch, vel);
    }

    Ok(Scan {
        notes,
        carry_out: Carry { sounding, velocity },
    })
}

/// Converts an event sequence to notes. Notes still sounding at the end are
/// cut at the sequence end and reported in the returned carry; zero-length
/// notes are dropped from the list.
pub fn events_to_notes(events: &[PerformanceEvent], carried_in: &Carry) -> Result<(NoteList, Carry), EventError> {
    let scan = scan(events, carried_in)?;
    let mut notes: Vec<Note> = scan
        .notes
        .into_iter()
        .map(|s| s.note)
        .filter(|n| n.duration_ms > 0)
        .collect();
    notes.sort_unstable();
    Ok((NoteList { notes }, scan.carry_out))
}

pub fn total_shift_ms(events: &[PerformanceEvent]) -> u32 {
    events.iter().map(PerformanceEvent::shift_ms).sum()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    events: Vec<PerformanceEvent>,
    duration_ms: u32,
}

impl Chunk {
    /// Validates the vocabulary; note pairing is only checked by
    /// [`Chunk::validate_in_context`] since a chunk may release notes
    /// carried over from its prefix.
    pub fn new(events: Vec<PerformanceEvent>) -> Result<Self, EventError> {
        for ev in &events {
            ev.validate()?;
        }
        let duration_ms = total_shift_ms(&events);
        Ok(Chunk { events, duration_ms })
    }

    pub fn events(&self) -> &[PerformanceEvent] {
        &self.events
    }

    pub fn duration_ms(&self) -> u32 {
        self.duration_ms
    }

    pub fn into_events(self) -> Vec<PerformanceEvent> {
        self.events
    }

    pub fn validate_in_context(&self, carried_in: &Carry) -> Result<Carry, EventError> {
        scan(&self.events, carried_in).map(|s| s.carry_out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phrase {
    chunks: Vec<Chunk>,
    total_duration_ms: u32,
}

impl Phrase {
    /// Builds a phrase of 1 to 3 chunks whose concatenation is a valid
    /// sequence from silence.
    pub fn new(chunks: Vec<Chunk>) -> Result<Self, EventError> {
        if chunks.is_empty() || chunks.len() > CHUNKS_PER_PHRASE {
            return Err(EventError::InvalidPhraseLength(chunks.len()));
        }
        let mut carry = Carry::default();
        for c in &chunks {
            carry = c.validate_in_context(&carry)?;
        }
        let total_duration_ms = chunks.iter().map(Chunk::duration_ms).sum();
        Ok(Phrase {
            chunks,
            total_duration_ms,
        })
    }

    pub fn chunks(&self) -> &[Chunk] {
        &self.chunks
    }

    pub fn total_duration_ms(&self) -> u32 {
        self.total_duration_ms
    }

    pub fn is_complete(&self) -> bool {
        self.chunks.len() == CHUNKS_PER_PHRASE && self.total_duration_ms == PHRASE_MS
    }

    pub fn events(&self) -> Vec<PerformanceEvent> {
        self.chunks.iter().flat_map(|c| c.events().iter().copied()).collect()
    }

    pub fn to_notes(&self) -> NoteList {
        // Construction guarantees a well-formed sequence.
        events_to_notes(&self.events(), &Carry::default())
            .map(|(notes, _)| notes)
            .unwrap_or_default()
    }
}
