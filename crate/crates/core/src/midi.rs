//! Standard MIDI File import and export.
//!
//! Import accepts formats 0 and 1 (metrical or SMPTE timing, with tempo
//! maps) and quantizes onto the event vocabulary. Export always writes a
//! single-track format 0 file at 480 ticks per quarter and 120 BPM, so one
//! tick is 25/24 ms and 10 ms is 9.6 ticks.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::events::{events_to_notes, Carry, NoteList, PerformanceEvent, Phrase, MAX_SHIFT_MS, TIME_STEP_MS};

pub const EXPORT_PPQ: u16 = 480;
/// Microseconds per quarter note at 120 BPM.
pub const EXPORT_TEMPO_US: u32 = 500_000;
const DEFAULT_TEMPO_US: u32 = 500_000;
const EXPORT_NOTE_OFF_VELOCITY: u8 = 0x40;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MidiError {
    #[error("malformed MIDI file at byte {offset}: {reason}")]
    Parse { offset: usize, reason: String },
    #[error("unsupported SMF format {0}; only formats 0 and 1 can be imported")]
    UnsupportedFormat(u16),
}

fn parse_err(offset: usize, reason: impl Into<String>) -> MidiError {
    MidiError::Parse {
        offset,
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Timing {
    Metrical(u16),
    /// frames per second (29 means 29.97 drop-frame), ticks per frame
    Timecode(u8, u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Message {
    NoteOn { key: u8, velocity: u8 },
    NoteOff { key: u8 },
    Tempo(u32),
    EndOfTrack,
    Other,
}

#[derive(Debug, Clone, Copy)]
struct TimedMessage {
    tick: u64,
    message: Message,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], MidiError> {
        if self.remaining() < n {
            return Err(parse_err(self.pos, format!("unexpected end of data, needed {n} bytes")));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, MidiError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, MidiError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn vlq(&mut self) -> Result<u32, MidiError> {
        let start = self.pos;
        let mut value = 0u32;
        for _ in 0..4 {
            let b = self.u8()?;
            value = (value << 7) | u32::from(b & 0x7f);
            if b & 0x80 == 0 {
                return Ok(value);
            }
        }
        Err(parse_err(start, "variable-length quantity longer than 4 bytes"))
    }
}

fn parse_track(data: &[u8], base: usize) -> Result<Vec<TimedMessage>, MidiError> {
    parse_track_body(data).map_err(|e| match e {
        MidiError::Parse { offset, reason } => MidiError::Parse {
            offset: offset + base,
            reason,
        },
        other => other,
    })
}

fn parse_track_body(data: &[u8]) -> Result<Vec<TimedMessage>, MidiError> {
    let mut r = Reader::new(data);
    let mut tick = 0u64;
    let mut running: Option<u8> = None;
    let mut out = Vec::new();

    while r.remaining() > 0 {
        let delta = r.vlq()?;
        tick += u64::from(delta);
        let first = r.u8()?;
        let message = match first {
            0xff => {
                let kind = r.u8()?;
                let len = r.vlq()? as usize;
                let payload = r.take(len)?;
                match kind {
                    0x51 if len == 3 => Message::Tempo(
                        (u32::from(payload[0]) << 16) | (u32::from(payload[1]) << 8) | u32::from(payload[2]),
                    ),
                    0x2f => Message::EndOfTrack,
                    _ => Message::Other,
                }
            }
            0xf0 | 0xf7 => {
                let len = r.vlq()? as usize;
                r.take(len)?;
                Message::Other
            }
            0xf1..=0xfe => {
                return Err(parse_err(
                    r.pos - 1,
                    format!("system message 0x{first:02x} inside a track"),
                ));
            }
            _ => {
                let (status, data0) = if first & 0x80 != 0 {
                    running = Some(first);
                    (first, r.u8()?)
                } else {
                    match running {
                        Some(s) => (s, first),
                        None => {
                            return Err(parse_err(r.pos - 1, "data byte without running status"));
                        }
                    }
                };
                let two_bytes = !matches!(status & 0xf0, 0xc0 | 0xd0);
                let data1 = if two_bytes { Some(r.u8()?) } else { None };
                if data0 > 0x7f || data1.is_some_and(|d| d > 0x7f) {
                    return Err(parse_err(r.pos - 1, "data byte with the high bit set"));
                }
                match (status & 0xf0, data1) {
                    (0x90, Some(v)) if v > 0 => Message::NoteOn {
                        key: data0,
                        velocity: v,
                    },
                    (0x90, Some(_)) | (0x80, Some(_)) => Message::NoteOff { key: data0 },
                    _ => Message::Other,
                }
            }
        };
        let end = message == Message::EndOfTrack;
        out.push(TimedMessage { tick, message });
        if end {
            break;
        }
    }
    Ok(out)
}

fn parse_smf(bytes: &[u8]) -> Result<(Timing, Vec<Vec<TimedMessage>>), MidiError> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != b"MThd" {
        return Err(parse_err(0, "missing MThd header"));
    }
    let header_len = r.u32()? as usize;
    if header_len < 6 {
        return Err(parse_err(4, format!("header length {header_len} is shorter than 6")));
    }
    let header = r.take(header_len)?;
    let format = u16::from_be_bytes([header[0], header[1]]);
    let ntracks = u16::from_be_bytes([header[2], header[3]]);
    let division = u16::from_be_bytes([header[4], header[5]]);
    match format {
        0 | 1 => {}
        2 => return Err(MidiError::UnsupportedFormat(2)),
        other => return Err(parse_err(8, format!("unknown SMF format {other}"))),
    }
    if format == 0 && ntracks != 1 {
        return Err(parse_err(10, format!("format 0 file declares {ntracks} tracks")));
    }
    let timing = if division & 0x8000 == 0 {
        if division == 0 {
            return Err(parse_err(12, "zero ticks per quarter note"));
        }
        Timing::Metrical(division)
    } else {
        let fps = (-((division >> 8) as u8 as i8)) as u8;
        let ticks_per_frame = (division & 0xff) as u8;
        if !matches!(fps, 24 | 25 | 29 | 30) || ticks_per_frame == 0 {
            return Err(parse_err(12, format!("invalid SMPTE division 0x{division:04x}")));
        }
        Timing::Timecode(fps, ticks_per_frame)
    };

    let mut tracks = Vec::with_capacity(usize::from(ntracks));
    while tracks.len() < usize::from(ntracks) {
        let chunk_start = r.pos;
        let id = r.take(4)?;
        let len = r.u32()? as usize;
        let body_start = r.pos;
        let body = r.take(len).map_err(|_| {
            parse_err(
                chunk_start,
                format!("chunk declares {len} bytes but the file ends early"),
            )
        })?;
        if id == b"MTrk" {
            tracks.push(parse_track(body, body_start)?);
        }
    }
    Ok((timing, tracks))
}

/// Maps absolute ticks to milliseconds rounded to the 10 ms grid.
struct TimeMap {
    timing: Timing,
    /// (start tick, accumulated microseconds * ppq at start, tempo)
    segments: Vec<(u64, u128, u32)>,
}

impl TimeMap {
    fn new(timing: Timing, mut tempos: Vec<(u64, u32)>) -> Self {
        tempos.sort_by_key(|&(tick, _)| tick);
        let mut segments = vec![(0u64, 0u128, DEFAULT_TEMPO_US)];
        for (tick, tempo) in tempos {
            let &(start, acc, current) = segments.last().expect("non-empty");
            let acc_here = acc + u128::from(tick - start) * u128::from(current);
            if tick == start {
                segments.pop();
            }
            segments.push((tick, acc_here, tempo));
        }
        TimeMap { timing, segments }
    }

    fn quantized_ms(&self, tick: u64) -> u64 {
        let step = u128::from(TIME_STEP_MS);
        match self.timing {
            Timing::Metrical(ppq) => {
                let idx = self.segments.partition_point(|&(start, _, _)| start <= tick) - 1;
                let (start, acc, tempo) = self.segments[idx];
                let num = acc + u128::from(tick - start) * u128::from(tempo);
                let denom = u128::from(ppq) * 1000 * step;
                ((num + denom / 2) / denom * step) as u64
            }
            Timing::Timecode(fps, tpf) => {
                let frames_per_sec = if fps == 29 { 30_000.0 / 1001.0 } else { f64::from(fps) };
                let ms = tick as f64 * 1000.0 / (frames_per_sec * f64::from(tpf));
                ((ms / f64::from(TIME_STEP_MS)).round() as u64) * u64::from(TIME_STEP_MS)
            }
        }
    }
}

fn push_shifts(out: &mut Vec<PerformanceEvent>, mut gap_ms: u64) {
    while gap_ms > 0 {
        let step = gap_ms.min(u64::from(MAX_SHIFT_MS));
        out.push(PerformanceEvent::TimeShift(step as u32));
        gap_ms -= step;
    }
}

/// MIDI velocity (1..=127) to one of 32 equal bins.
pub fn velocity_to_bin(velocity: u8) -> u8 {
    velocity.min(127) / 4
}

/// Centre of a velocity bin; never 0, so it never reads as a note-off.
pub fn bin_to_velocity(bin: u8) -> u8 {
    bin.min(31) * 4 + 2
}

/// Parses an SMF and quantizes it onto the event vocabulary. Channels are
/// merged; note-offs for pitches that are not sounding are dropped.
pub fn import_midi(bytes: &[u8]) -> Result<Vec<PerformanceEvent>, MidiError> {
    let (timing, tracks) = parse_smf(bytes)?;

    let tempos = tracks
        .iter()
        .flatten()
        .filter_map(|m| match m.message {
            Message::Tempo(t) => Some((m.tick, t)),
            _ => None,
        })
        .collect();
    let map = TimeMap::new(timing, tempos);

    let end_tick = tracks
        .iter()
        .filter_map(|t| t.last().map(|m| m.tick))
        .max()
        .unwrap_or(0);

    let mut merged: Vec<TimedMessage> = tracks
        .into_iter()
        .flatten()
        .filter(|m| matches!(m.message, Message::NoteOn { .. } | Message::NoteOff { .. }))
        .collect();
    // Stable: keeps file order within a tick and track order across tracks.
    merged.sort_by_key(|m| m.tick);

    let mut out = Vec::new();
    let mut now = 0u64;
    let mut velocity: Option<u8> = None;
    let mut sounding = BTreeSet::new();
    for m in merged {
        let at = map.quantized_ms(m.tick);
        match m.message {
            Message::NoteOn { key, velocity: v } => {
                push_shifts(&mut out, at - now);
                now = at;
                let bin = velocity_to_bin(v);
                if velocity != Some(bin) {
                    out.push(PerformanceEvent::SetVelocity(bin));
                    velocity = Some(bin);
                }
                out.push(PerformanceEvent::NoteOn(key));
                sounding.insert(key);
            }
            Message::NoteOff { key } if sounding.remove(&key) => {
                push_shifts(&mut out, at - now);
                now = at;
                out.push(PerformanceEvent::NoteOff(key));
            }
            _ => {}
        }
    }
    let end = map.quantized_ms(end_tick).max(now);
    push_shifts(&mut out, end - now);
    Ok(out)
}

/// Milliseconds to export ticks (0.96 ticks per ms), rounded to nearest.
pub fn ms_to_export_tick(ms: u32) -> u32 {
    ((u64::from(ms) * 96 + 50) / 100) as u32
}

fn write_vlq(out: &mut Vec<u8>, mut value: u32) {
    let mut buf = [0u8; 4];
    let mut n = 0;
    loop {
        buf[n] = (value & 0x7f) as u8;
        n += 1;
        value >>= 7;
        if value == 0 {
            break;
        }
    }
    for i in (0..n).rev() {
        out.push(if i > 0 { buf[i] | 0x80 } else { buf[i] });
    }
}

/// Writes notes as a format 0 SMF whose end-of-track sits at `total_ms`.
pub fn export_notes(notes: &NoteList, total_ms: u32) -> Vec<u8> {
    // (tick, 0 = off / 1 = on, pitch, velocity)
    let mut timeline: Vec<(u32, u8, u8, u8)> = Vec::with_capacity(notes.len() * 2);
    for n in notes.iter() {
        timeline.push((ms_to_export_tick(n.onset_ms), 1, n.pitch, bin_to_velocity(n.velocity)));
        timeline.push((ms_to_export_tick(n.end_ms()), 0, n.pitch, EXPORT_NOTE_OFF_VELOCITY));
    }
    timeline.sort_unstable();

    let mut track = Vec::new();
    track.extend_from_slice(&[0x00, 0xff, 0x51, 0x03]);
    track.extend_from_slice(&EXPORT_TEMPO_US.to_be_bytes()[1..]);
    let mut last = 0u32;
    for (tick, kind, pitch, vel) in timeline {
        write_vlq(&mut track, tick - last);
        last = tick;
        let status = if kind == 1 { 0x90 } else { 0x80 };
        track.extend_from_slice(&[status, pitch, vel]);
    }
    let end = ms_to_export_tick(total_ms).max(last);
    write_vlq(&mut track, end - last);
    track.extend_from_slice(&[0xff, 0x2f, 0x00]);

    let mut out = Vec::with_capacity(track.len() + 22);
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&0u16.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&EXPORT_PPQ.to_be_bytes());
    out.extend_from_slice(b"MTrk");
    out.extend_from_slice(&(track.len() as u32).to_be_bytes());
    out.extend_from_slice(&track);
    out
}

pub fn export_midi(phrase: &Phrase) -> Vec<u8> {
    export_notes(&phrase.to_notes(), phrase.total_duration_ms())
}

/// Converts an imported sequence to notes, for comparisons after a round trip.
pub fn import_notes(bytes: &[u8]) -> Result<NoteList, MidiError> {
    let events = import_midi(bytes)?;
    let (notes, _) = events_to_notes(&events, &Carry::default()).map_err(|e| parse_err(0, e.to_string()))?;
    Ok(notes)
}
