//! Corpus loading and a small procedural piano corpus.
//!
//! The procedural corpus exists so the whole pipeline can run without any
//! MIDI files on disk: sections vary key, pulse, register, chord density and
//! chromaticism so the trained model produces chunks with spread-out features.

use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::Rng;
use thiserror::Error;

use crate::events::PerformanceEvent;
use crate::midi::{import_midi, MidiError};
use crate::seed::RngSeed;

const MAJOR: [u8; 7] = [0, 2, 4, 5, 7, 9, 11];
const MINOR: [u8; 7] = [0, 2, 3, 5, 7, 8, 10];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Midi { path: PathBuf, source: MidiError },
}

/// Imports every `.mid`/`.midi` file directly under `dir`, in file-name order.
pub fn load_midi_dir(dir: &Path) -> Result<Vec<Vec<PerformanceEvent>>, CorpusError> {
    let io = |source| CorpusError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("mid") || e.eq_ignore_ascii_case("midi"))
        })
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|path| {
            let bytes = std::fs::read(&path).map_err(|source| CorpusError::Io {
                path: path.clone(),
                source,
            })?;
            import_midi(&bytes).map_err(|source| CorpusError::Midi { path, source })
        })
        .collect()
}

fn shift(out: &mut Vec<PerformanceEvent>, mut ms: u32) {
    while ms > 0 {
        let step = ms.min(1000);
        out.push(PerformanceEvent::TimeShift(step));
        ms -= step;
    }
}

/// `pieces` procedurally generated sequences of roughly 30 seconds each.
pub fn synthetic_corpus(seed: RngSeed, pieces: usize) -> Vec<Vec<PerformanceEvent>> {
    (0..pieces).map(|i| synthetic_piece(seed.derive(&[i as u32]))).collect()
}

fn synthetic_piece(seed: RngSeed) -> Vec<PerformanceEvent> {
    let mut rng = seed.rng();
    let mut out = Vec::new();
    let mut tonic: u8 = rng.random_range(0..12);
    let mut minor = rng.random_bool(0.4);

    for _section in 0..6 {
        if rng.random_bool(0.3) {
            tonic = (tonic + [5u8, 7, 9, 3].choose(&mut rng).copied().unwrap_or(7)) % 12;
            minor = !minor;
        }
        let scale = if minor { MINOR } else { MAJOR };
        let pulse = *[120u32, 180, 250, 330, 500, 700].choose(&mut rng).unwrap();
        let base_octave: u8 = rng.random_range(3..=6);
        let chord_prob = rng.random_range(0.0..0.6);
        let chroma_prob = rng.random_range(0.0..0.25);
        let velocity: u8 = rng.random_range(8..28);
        out.push(PerformanceEvent::SetVelocity(velocity));

        let steps = (5000 / pulse).max(4);
        let mut degree: i32 = rng.random_range(0..7);
        for _ in 0..steps {
            degree = (degree + rng.random_range(-2..=2)).clamp(0, 13);
            let octave = base_octave as i32 + degree / 7;
            let mut pitch = 12 * octave + tonic as i32 + scale[(degree % 7) as usize] as i32;
            if rng.random_bool(chroma_prob) {
                pitch += 1;
            }
            let pitch = pitch.clamp(21, 108) as u8;
            let mut held = vec![pitch];
            if rng.random_bool(chord_prob) {
                // stacked thirds below the melody, occasionally a clash
                let third = if rng.random_bool(0.15) {
                    1
                } else {
                    [3u8, 4].choose(&mut rng).copied().unwrap()
                };
                held.push(pitch.saturating_sub(third).max(21));
                held.push(pitch.saturating_sub(7).max(21));
                held.push(pitch.saturating_sub(12).max(21));
            }
            held.sort_unstable();
            held.dedup();
            for &p in &held {
                out.push(PerformanceEvent::NoteOn(p));
            }
            let legato = rng.random_range(0.5..1.0);
            let on_ms = ((pulse as f64 * legato / 10.0).round() as u32).max(1) * 10;
            shift(&mut out, on_ms);
            for &p in &held {
                out.push(PerformanceEvent::NoteOff(p));
            }
            shift(&mut out, pulse.saturating_sub(on_ms));
        }
        if rng.random_bool(0.3) {
            shift(&mut out, rng.random_range(1..=8) * 100);
        }
    }
    out
}
