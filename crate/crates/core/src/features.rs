//! Per-chunk musical features, population-quantile bins, and labels
//! relative to a parent chunk.
//!
//! Features only look at notes that start inside the chunk. Notes carried
//! over from the prefix are context for validation, not content.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::{scan, Carry, Chunk, EventError, PerformanceEvent};

/// Dissonance weight by interval class (semitones mod 12).
pub const DISSONANCE_WEIGHTS: [f64; 12] = [0.0, 1.0, 0.8, 0.3, 0.2, 0.1, 0.9, 0.0, 0.2, 0.3, 0.8, 1.0];

/// Krumhansl-Kessler probe-tone profiles, tonic first.
pub const MAJOR_PROFILE: [f64; 12] = [6.35, 2.23, 3.48, 2.33, 4.38, 4.09, 2.52, 5.19, 2.39, 3.66, 2.29, 2.88];
pub const MINOR_PROFILE: [f64; 12] = [6.33, 2.68, 3.52, 5.38, 2.60, 3.53, 2.54, 4.75, 3.98, 2.69, 3.34, 3.17];

pub const BIN_COUNT: usize = 5;
/// Relative margin as a fraction of the population interquartile range.
pub const RELATIVE_MARGIN_FRACTION: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("depth {depth} has {population} nodes; quantile bins need at least 5")]
    DegeneratePopulation { depth: u8, population: usize },
    #[error("relative labels are undefined for a depth-1 chunk")]
    RelativeAtRoot,
    #[error("no bin edges for depth {0}")]
    MissingDepth(u8),
    #[error(transparent)]
    Event(#[from] EventError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Major,
    Minor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Key {
    /// Pitch class 0..=11, C = 0.
    pub tonic: u8,
    pub mode: Mode,
}

impl fmt::Display for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const NAMES: [&str; 12] = ["C", "C#", "D", "Eb", "E", "F", "F#", "G", "Ab", "A", "Bb", "B"];
        let m = match self.mode {
            Mode::Major => "major",
            Mode::Minor => "minor",
        };
        write!(f, "{} {}", NAMES[usize::from(self.tonic % 12)], m)
    }
}

/// Binned, continuous feature dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    Tempo,
    Pitch,
    PitchDiversity,
    Dissonance,
}

impl Dimension {
    pub const ALL: [Dimension; 4] = [
        Dimension::Tempo,
        Dimension::Pitch,
        Dimension::PitchDiversity,
        Dimension::Dissonance,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Dimension::Tempo => "tempo",
            Dimension::Pitch => "pitch",
            Dimension::PitchDiversity => "pitch_diversity",
            Dimension::Dissonance => "dissonance",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    /// Note onsets per second.
    pub tempo: f64,
    /// Mean note-on pitch; 0 for a chunk without notes.
    pub pitch_mean: f64,
    /// Distinct note-on pitches.
    pub pitch_diversity: u32,
    /// Overlap-weighted mean interval dissonance, in [0, 1].
    pub dissonance: f64,
    pub key: Option<Key>,
}

impl FeatureVector {
    pub fn value(&self, dim: Dimension) -> f64 {
        match dim {
            Dimension::Tempo => self.tempo,
            Dimension::Pitch => self.pitch_mean,
            Dimension::PitchDiversity => f64::from(self.pitch_diversity),
            Dimension::Dissonance => self.dissonance,
        }
    }
}

pub fn extract_features(chunk: &Chunk, carried_in: &Carry) -> Result<FeatureVector, FeatureError> {
    extract_from_events(chunk.events(), chunk.duration_ms(), carried_in)
}

pub(crate) fn extract_from_events(
    events: &[PerformanceEvent],
    duration_ms: u32,
    carried_in: &Carry,
) -> Result<FeatureVector, FeatureError> {
    let scanned = scan(events, carried_in)?;
    let notes: Vec<_> = scanned.notes.iter().map(|s| s.note).collect();

    let onsets = notes.len();
    let tempo = if duration_ms == 0 {
        0.0
    } else {
        onsets as f64 / (f64::from(duration_ms) / 1000.0)
    };
    let pitch_mean = if onsets == 0 {
        0.0
    } else {
        notes.iter().map(|n| f64::from(n.pitch)).sum::<f64>() / onsets as f64
    };
    let mut distinct = [false; 128];
    for n in &notes {
        distinct[usize::from(n.pitch)] = true;
    }
    let pitch_diversity = distinct.iter().filter(|&&d| d).count() as u32;

    let mut weighted = 0.0;
    let mut overlap_total = 0.0;
    for (i, a) in notes.iter().enumerate() {
        for b in &notes[i + 1..] {
            let overlap = a.end_ms().min(b.end_ms()).saturating_sub(a.onset_ms.max(b.onset_ms));
            if overlap > 0 {
                let ic = usize::from(a.pitch.abs_diff(b.pitch) % 12);
                weighted += f64::from(overlap) * DISSONANCE_WEIGHTS[ic];
                overlap_total += f64::from(overlap);
            }
        }
    }
    let dissonance = if overlap_total > 0.0 {
        (weighted / overlap_total).clamp(0.0, 1.0)
    } else {
        0.0
    };

    let key = if onsets == 0 {
        None
    } else {
        let mut hist = [0.0f64; 12];
        for n in &notes {
            hist[usize::from(n.pitch % 12)] += f64::from(n.duration_ms);
        }
        if hist.iter().all(|&h| h == 0.0) {
            // every note has zero length; fall back to onset counts
            for n in &notes {
                hist[usize::from(n.pitch % 12)] += 1.0;
            }
        }
        Some(estimate_key(&hist))
    };

    Ok(FeatureVector {
        tempo,
        pitch_mean,
        pitch_diversity,
        dissonance,
        key,
    })
}

fn pearson(x: &[f64; 12], y: &[f64; 12]) -> f64 {
    let mx = x.iter().sum::<f64>() / 12.0;
    let my = y.iter().sum::<f64>() / 12.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..12 {
        let dx = x[i] - mx;
        let dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// Krumhansl-Schmuckler key finding: the rotation of the major or minor
/// profile that correlates best with the pitch-class histogram. Ties go to
/// major, then to the lower tonic.
pub fn estimate_key(histogram: &[f64; 12]) -> Key {
    let mut best = (
        f64::NEG_INFINITY,
        Key {
            tonic: 0,
            mode: Mode::Major,
        },
    );
    for (mode, profile) in [(Mode::Major, &MAJOR_PROFILE), (Mode::Minor, &MINOR_PROFILE)] {
        for tonic in 0..12u8 {
            let rotated: [f64; 12] = std::array::from_fn(|pc| profile[(pc + 12 - usize::from(tonic)) % 12]);
            let r = pearson(histogram, &rotated);
            if r > best.0 {
                best = (r, Key { tonic, mode });
            }
        }
    }
    best.1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bin {
    VeryLow,
    Low,
    Mid,
    High,
    VeryHigh,
}

impl Bin {
    pub const ALL: [Bin; BIN_COUNT] = [Bin::VeryLow, Bin::Low, Bin::Mid, Bin::High, Bin::VeryHigh];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Bin {
        Bin::ALL[i.min(BIN_COUNT - 1)]
    }
}

/// Quintile cut points and margins for one dimension at one depth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionBins {
    pub edges: [f64; 4],
    /// Half-width of the "same" band for relative labels.
    pub epsilon: f64,
    pub min: f64,
    pub max: f64,
}

impl DimensionBins {
    /// Nearest-rank quintiles over `values`.
    pub fn from_population(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let edges = std::array::from_fn(|i| nearest_rank(&sorted, (i + 1) as f64 / 5.0));
        let iqr = nearest_rank(&sorted, 0.75) - nearest_rank(&sorted, 0.25);
        Some(DimensionBins {
            edges,
            epsilon: RELATIVE_MARGIN_FRACTION * iqr,
            min: sorted[0],
            max: sorted[sorted.len() - 1],
        })
    }

    /// Bin for a value. A value equal to a run of tied edges lands in the
    /// middle of the bins that run spans, so an all-equal population is `Mid`.
    pub fn bin_of(&self, value: f64) -> Bin {
        let below = self.edges.iter().filter(|&&e| e < value).count();
        let at_or_below = self.edges.iter().filter(|&&e| e <= value).count();
        Bin::from_index((below + at_or_below) / 2)
    }

    /// Closed value interval whose members map to `bin`, as far as the edges
    /// alone determine it.
    pub fn bin_interval(&self, bin: Bin) -> (f64, f64) {
        let i = bin.index();
        let lo = if i == 0 { f64::NEG_INFINITY } else { self.edges[i - 1] };
        let hi = if i == BIN_COUNT - 1 {
            f64::INFINITY
        } else {
            self.edges[i]
        };
        (lo, hi)
    }

    pub fn range(&self) -> f64 {
        self.max - self.min
    }
}

/// Nearest-rank quantile: the smallest value with at least `q` of the
/// population at or below it.
fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthBins {
    pub depth: u8,
    pub population: usize,
    pub dimensions: BTreeMap<Dimension, DimensionBins>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BinEdges {
    pub depths: Vec<DepthBins>,
}

impl BinEdges {
    /// Builds edges from per-depth feature populations (index 0 = depth 1).
    pub fn from_populations(populations: &[Vec<FeatureVector>]) -> Result<Self, FeatureError> {
        let mut depths = Vec::with_capacity(populations.len());
        for (i, pop) in populations.iter().enumerate() {
            let depth = (i + 1) as u8;
            if pop.len() < BIN_COUNT {
                return Err(FeatureError::DegeneratePopulation {
                    depth,
                    population: pop.len(),
                });
            }
            let dimensions = Dimension::ALL
                .iter()
                .map(|&dim| {
                    let values: Vec<f64> = pop.iter().map(|f| f.value(dim)).collect();
                    (dim, DimensionBins::from_population(&values).expect("non-empty"))
                })
                .collect();
            depths.push(DepthBins {
                depth,
                population: pop.len(),
                dimensions,
            });
        }
        Ok(BinEdges { depths })
    }

    pub fn dimension(&self, depth: u8, dim: Dimension) -> Result<&DimensionBins, FeatureError> {
        self.depths
            .iter()
            .find(|d| d.depth == depth)
            .and_then(|d| d.dimensions.get(&dim))
            .ok_or(FeatureError::MissingDepth(depth))
    }

    pub fn bin_of(&self, value: f64, dim: Dimension, depth: u8) -> Result<Bin, FeatureError> {
        Ok(self.dimension(depth, dim)?.bin_of(value))
    }

    pub fn epsilon(&self, dim: Dimension, depth: u8) -> Result<f64, FeatureError> {
        Ok(self.dimension(depth, dim)?.epsilon)
    }
}

pub fn compute_bin_edges(forest: &crate::forest::Forest) -> Result<BinEdges, FeatureError> {
    let populations: Vec<Vec<FeatureVector>> = (1..=3u8).map(|d| forest.depth_features(d)).collect();
    BinEdges::from_populations(&populations)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Lower,
    Same,
    Higher,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyRelation {
    SameKey,
    DifferentKey,
    NoKey,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelativeLabel {
    pub directions: BTreeMap<Dimension, Direction>,
    pub key_relation: KeyRelation,
}

pub fn direction(child: f64, parent: f64, epsilon: f64) -> Direction {
    let diff = child - parent;
    if diff > epsilon {
        Direction::Higher
    } else if diff < -epsilon {
        Direction::Lower
    } else {
        Direction::Same
    }
}

pub fn key_relation(child: Option<Key>, parent: Option<Key>) -> KeyRelation {
    match (child, parent) {
        (Some(c), Some(p)) if c == p => KeyRelation::SameKey,
        (Some(_), Some(_)) => KeyRelation::DifferentKey,
        _ => KeyRelation::NoKey,
    }
}

/// Labels `child` against `parent` using margins of the child's depth.
pub fn relative_label(
    child: &FeatureVector,
    child_depth: u8,
    parent: &FeatureVector,
    edges: &BinEdges,
) -> Result<RelativeLabel, FeatureError> {
    if child_depth < 2 {
        return Err(FeatureError::RelativeAtRoot);
    }
    let mut directions = BTreeMap::new();
    for dim in Dimension::ALL {
        let eps = edges.epsilon(dim, child_depth)?;
        directions.insert(dim, direction(child.value(dim), parent.value(dim), eps));
    }
    Ok(RelativeLabel {
        directions,
        key_relation: key_relation(child.key, parent.key),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{Chunk, PerformanceEvent::*};
    use proptest::prelude::*;

    fn held(pitches: &[u8], ms: u32) -> Chunk {
        let mut ev: Vec<_> = pitches.iter().map(|&p| NoteOn(p)).collect();
        let mut left = ms;
        while left > 0 {
            let s = left.min(1000);
            ev.push(TimeShift(s));
            left -= s;
        }
        ev.extend(pitches.iter().map(|&p| NoteOff(p)));
        Chunk::new(ev).unwrap()
    }

    fn scale(pitches: &[u8], step: u32) -> Chunk {
        let mut ev = Vec::new();
        for &p in pitches {
            ev.extend([NoteOn(p), TimeShift(step), NoteOff(p)]);
        }
        Chunk::new(ev).unwrap()
    }

    #[test]
    fn silent_chunk() {
        let c = Chunk::new(vec![TimeShift(1000); 5]).unwrap();
        let f = extract_features(&c, &Carry::default()).unwrap();
        assert_eq!(f.tempo, 0.0);
        assert_eq!(f.pitch_diversity, 0);
        assert_eq!(f.dissonance, 0.0);
        assert_eq!(f.key, None);
    }

    #[test]
    fn c_major_triad() {
        let f = extract_features(&held(&[60, 64, 67], 5000), &Carry::default()).unwrap();
        // weights for intervals 4, 7, 3 with equal overlap
        assert!((f.dissonance - (0.2 + 0.0 + 0.3) / 3.0).abs() < 1e-12);
        assert!((f.dissonance - 0.1667).abs() < 1e-4);
        assert_eq!(
            f.key,
            Some(Key {
                tonic: 0,
                mode: Mode::Major
            })
        );
        assert_eq!(f.pitch_diversity, 3);
        assert!((f.pitch_mean - 191.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn ten_onsets_in_five_seconds() {
        let pitches: Vec<u8> = (60..70).collect();
        let f = extract_features(&scale(&pitches, 500), &Carry::default()).unwrap();
        assert_eq!(f.tempo, 2.0);
        assert_eq!(f.dissonance, 0.0);
    }

    #[test]
    fn scales_give_expected_keys() {
        let c_major = scale(&[60, 62, 64, 65, 67, 69, 71, 72], 500);
        let a_minor = scale(&[57, 59, 60, 62, 64, 65, 67, 69], 500);
        let fc = extract_features(&c_major, &Carry::default()).unwrap();
        let fa = extract_features(&a_minor, &Carry::default()).unwrap();
        assert_eq!(
            fc.key,
            Some(Key {
                tonic: 0,
                mode: Mode::Major
            })
        );
        assert_eq!(
            fa.key,
            Some(Key {
                tonic: 9,
                mode: Mode::Minor
            })
        );
    }

    #[test]
    fn carried_notes_do_not_count_as_content() {
        let mut carry = Carry::default();
        carry.sounding.insert(61, 10);
        let c = Chunk::new(vec![TimeShift(500), NoteOff(61), TimeShift(1000)]).unwrap();
        let f = extract_features(&c, &carry).unwrap();
        assert_eq!(f.pitch_diversity, 0);
        assert_eq!(f.key, None);
        assert!(extract_features(&c, &Carry::default()).is_err());
    }

    #[test]
    fn quintiles_of_one_to_five() {
        let bins = DimensionBins::from_population(&[3.0, 1.0, 5.0, 2.0, 4.0]).unwrap();
        assert_eq!(bins.edges, [1.0, 2.0, 3.0, 4.0]);
        let got: Vec<Bin> = [1.0, 2.0, 3.0, 4.0, 5.0].iter().map(|&v| bins.bin_of(v)).collect();
        assert_eq!(got, Bin::ALL.to_vec());
        assert_eq!(bins.bin_of(0.5), Bin::VeryLow);
        assert_eq!(bins.bin_of(9.0), Bin::VeryHigh);
    }

    #[test]
    fn all_equal_population_is_mid() {
        let bins = DimensionBins::from_population(&[2.5; 20]).unwrap();
        assert_eq!(bins.edges, [2.5; 4]);
        assert_eq!(bins.bin_of(2.5), Bin::Mid);
        assert_eq!(bins.epsilon, 0.0);
    }

    #[test]
    fn hundred_distinct_values_fill_bins_evenly() {
        let values: Vec<f64> = (0..100).map(|i| ((i * 37) % 100) as f64 * 0.1).collect();
        let bins = DimensionBins::from_population(&values).unwrap();
        let mut counts = [0usize; 5];
        for v in &values {
            counts[bins.bin_of(*v).index()] += 1;
        }
        assert_eq!(counts, [20; 5]);
    }

    #[test]
    fn degenerate_population() {
        let f = extract_features(&held(&[60], 100), &Carry::default()).unwrap();
        let err = BinEdges::from_populations(&[vec![f; 4]]).unwrap_err();
        assert_eq!(
            err,
            FeatureError::DegeneratePopulation {
                depth: 1,
                population: 4
            }
        );
    }

    #[test]
    fn relative_labels() {
        assert_eq!(direction(3.0, 2.0, 0.1), Direction::Higher);
        assert_eq!(direction(2.0, 3.0, 0.1), Direction::Lower);
        assert_eq!(direction(2.05, 2.0, 0.1), Direction::Same);
        assert_eq!(direction(2.5, 2.0, 0.5), Direction::Same);
        assert_eq!(direction(1.5, 2.0, 0.5), Direction::Same);
        let c = Some(Key {
            tonic: 0,
            mode: Mode::Major,
        });
        let g = Some(Key {
            tonic: 7,
            mode: Mode::Major,
        });
        let cm = Some(Key {
            tonic: 0,
            mode: Mode::Minor,
        });
        assert_eq!(key_relation(c, g), KeyRelation::DifferentKey);
        assert_eq!(key_relation(c, cm), KeyRelation::DifferentKey);
        assert_eq!(key_relation(c, c), KeyRelation::SameKey);
        assert_eq!(key_relation(None, c), KeyRelation::NoKey);

        let f = extract_features(&held(&[60], 100), &Carry::default()).unwrap();
        let edges = BinEdges::from_populations(&[vec![f.clone(); 5], vec![f.clone(); 5]]).unwrap();
        assert_eq!(relative_label(&f, 1, &f, &edges), Err(FeatureError::RelativeAtRoot));
        let label = relative_label(&f, 2, &f, &edges).unwrap();
        assert!(label.directions.values().all(|&d| d == Direction::Same));
        assert_eq!(label.key_relation, KeyRelation::SameKey);
    }

    proptest! {
        #[test]
        fn bin_of_is_monotone(values in prop::collection::vec(-50.0f64..50.0, 5..60), a in -60.0f64..60.0, b in -60.0f64..60.0) {
            let bins = DimensionBins::from_population(&values).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(bins.bin_of(lo) <= bins.bin_of(hi));
        }

        #[test]
        fn tie_groups_bound_bin_imbalance(values in prop::collection::vec(0u8..12, 5..120)) {
            let values: Vec<f64> = values.into_iter().map(f64::from).collect();
            let n = values.len();
            let bins = DimensionBins::from_population(&values).unwrap();
            let mut counts = [0usize; 5];
            for v in &values {
                counts[bins.bin_of(*v).index()] += 1;
            }
            let tie = |e: f64| values.iter().filter(|&&v| v == e).count();
            let tie_slack: usize = bins.edges.iter().map(|&e| tie(e)).sum();
            for c in counts {
                prop_assert!(c + 1 + tie_slack >= n / 5);
                prop_assert!(c <= n.div_ceil(5) + 1 + tie_slack);
            }
        }

        #[test]
        fn direction_is_antisymmetric(a in -10.0f64..10.0, b in -10.0f64..10.0, eps in 0.0f64..2.0) {
            let ab = direction(a, b, eps);
            let ba = direction(b, a, eps);
            prop_assert_eq!(ab == Direction::Lower, ba == Direction::Higher);
            prop_assert_eq!(ab == Direction::Same, ba == Direction::Same);
        }

        #[test]
        fn dissonance_bounded_and_octave_invariant(
            notes in prop::collection::vec((30u8..90, 0u32..40, 1u32..40), 1..12),
            octaves in 0u8..3,
        ) {
            let build = |shift: u8| {
                let mut timeline: Vec<(u32, bool, u8)> = Vec::new();
                let mut used = std::collections::BTreeSet::new();
                for &(p, on, len) in &notes {
                    if used.insert(p) {
                        timeline.push((on * 10, true, p + shift));
                        timeline.push((on * 10 + len * 10, false, p + shift));
                    }
                }
                timeline.sort_by_key(|&(t, on, p)| (t, on, p));
                let mut ev = Vec::new();
                let mut now = 0;
                for (t, on, p) in timeline {
                    let mut gap = t - now;
                    while gap > 0 { let s = gap.min(1000); ev.push(TimeShift(s)); gap -= s; }
                    now = t;
                    ev.push(if on { NoteOn(p) } else { NoteOff(p) });
                }
                Chunk::new(ev).unwrap()
            };
            let base = extract_features(&build(0), &Carry::default()).unwrap();
            let moved = extract_features(&build(12 * octaves), &Carry::default()).unwrap();
            prop_assert!((0.0..=1.0).contains(&base.dissonance));
            prop_assert!((base.dissonance - moved.dissonance).abs() < 1e-12);
            prop_assert_eq!(base.key.is_none(), base.pitch_diversity == 0);
        }
    }
}
