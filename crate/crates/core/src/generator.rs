//! Autoregressive chunk generation.
//!
//! [`ChunkGenerator`] is the seam between the forest and whatever model
//! produces continuations. The bundled [`GeneratorModel`] is an order-k
//! Markov chain over event ids with additive smoothing, backoff to shorter
//! contexts and temperature.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::events::{Carry, Chunk, EventError, PerformanceEvent, CHUNK_MS, MAX_SHIFT_MS, TIME_STEP_MS, VOCAB_SIZE};
use crate::seed::RngSeed;

/// Hard cap on events in one generated chunk.
pub const MAX_CHUNK_EVENTS: usize = 5000;
/// Consecutive non-time events after which a `TimeShift(10)` is forced.
pub const STALL_LIMIT: usize = 32;

const MODEL_MAGIC: &[u8; 4] = b"CFMK";
const MODEL_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum GeneratorError {
    #[error("corpus contains no events")]
    EmptyCorpus,
    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),
    #[error("corpus sequence {index} is invalid: {source}")]
    InvalidSequence { index: usize, source: EventError },
    #[error("model file is corrupt: {0}")]
    Corrupt(String),
    #[error("model file version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub name: String,
    /// Markov context length.
    pub order: usize,
    /// Additive smoothing constant.
    pub smoothing: f64,
    pub temperature: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            name: "default".to_string(),
            order: 3,
            smoothing: 0.01,
            temperature: 1.0,
        }
    }
}

impl GeneratorSpec {
    /// Longer context, cooler sampling: stands in for the more coherent of two compared models.
    pub fn coherent() -> Self {
        GeneratorSpec {
            name: "coherent".to_string(),
            order: 4,
            temperature: 0.9,
            ..Default::default()
        }
    }

    /// Order-1, hotter sampling: the less coherent comparison model.
    pub fn erratic() -> Self {
        GeneratorSpec {
            name: "erratic".to_string(),
            order: 1,
            temperature: 1.3,
            ..Default::default()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "coherent" => Some(Self::coherent()),
            "erratic" => Some(Self::erratic()),
            "default" => Some(Self::default()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), GeneratorError> {
        if self.order == 0 || self.order > 255 {
            return Err(GeneratorError::InvalidSpec(format!(
                "order must be in 1..=255, got {}",
                self.order
            )));
        }
        if !(self.smoothing > 0.0 && self.smoothing.is_finite()) {
            return Err(GeneratorError::InvalidSpec(format!(
                "smoothing must be > 0, got {}",
                self.smoothing
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(GeneratorError::InvalidSpec(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Anything that can continue a prefix by exactly one chunk.
pub trait ChunkGenerator: Sync {
    fn generate_chunk(&self, prefix: &[PerformanceEvent], seed: RngSeed) -> Chunk;

    /// Stable digest identifying the generator and its parameters.
    fn digest(&self) -> String;

    fn spec(&self) -> &GeneratorSpec;
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct CountTable {
    total: u64,
    /// (event id, count) sorted by id
    next: Vec<(u16, u32)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorModel {
    spec: GeneratorSpec,
    /// Sorted distinct event ids observed in the corpus.
    vocab: Vec<u16>,
    /// Context (length 0..=order) to next-event counts.
    tables: BTreeMap<Vec<u16>, CountTable>,
    /// event id -> position in `vocab`
    vocab_index: Vec<Option<u16>>,
    note_offs_in_vocab: u32,
}

/// Trains on a corpus. Counts are exact k-gram statistics for every context
/// length from 0 to `spec.order`.
pub fn train(corpus: &[Vec<PerformanceEvent>], spec: GeneratorSpec) -> Result<GeneratorModel, GeneratorError> {
    spec.validate()?;
    let mut raw: BTreeMap<Vec<u16>, BTreeMap<u16, u32>> = BTreeMap::new();
    let mut vocab = std::collections::BTreeSet::new();
    for (index, seq) in corpus.iter().enumerate() {
        for ev in seq {
            ev.validate()
                .map_err(|source| GeneratorError::InvalidSequence { index, source })?;
        }
        let ids: Vec<u16> = seq.iter().map(PerformanceEvent::id).collect();
        for (i, &id) in ids.iter().enumerate() {
            vocab.insert(id);
            for len in 0..=spec.order.min(i) {
                let ctx = ids[i - len..i].to_vec();
                *raw.entry(ctx).or_default().entry(id).or_insert(0) += 1;
            }
        }
    }
    if vocab.is_empty() {
        return Err(GeneratorError::EmptyCorpus);
    }
    let tables = raw
        .into_iter()
        .map(|(ctx, counts)| {
            let total = counts.values().map(|&c| u64::from(c)).sum();
            (
                ctx,
                CountTable {
                    total,
                    next: counts.into_iter().collect(),
                },
            )
        })
        .collect();
    Ok(GeneratorModel::assemble(spec, vocab.into_iter().collect(), tables))
}

struct Sounding {
    on: [bool; 128],
    /// sounding pitches whose note-off is in the vocabulary
    legal_offs: u32,
}

impl GeneratorModel {
    fn assemble(spec: GeneratorSpec, vocab: Vec<u16>, tables: BTreeMap<Vec<u16>, CountTable>) -> Self {
        let mut vocab_index = vec![None; VOCAB_SIZE];
        for (i, &id) in vocab.iter().enumerate() {
            vocab_index[usize::from(id)] = Some(i as u16);
        }
        let note_offs_in_vocab = vocab.iter().filter(|&&id| is_note_off(id)).count() as u32;
        GeneratorModel {
            spec,
            vocab,
            tables,
            vocab_index,
            note_offs_in_vocab,
        }
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn vocabulary(&self) -> impl Iterator<Item = PerformanceEvent> + '_ {
        self.vocab
            .iter()
            .map(|&id| PerformanceEvent::from_id(id).expect("vocab holds valid ids"))
    }

    /// Same counts, different sampling parameters. Order is capped at the trained order.
    pub fn with_sampling(&self, temperature: f64, smoothing: f64) -> Result<Self, GeneratorError> {
        let spec = GeneratorSpec {
            temperature,
            smoothing,
            ..self.spec.clone()
        };
        spec.validate()?;
        Ok(GeneratorModel { spec, ..self.clone() })
    }

    /// Raw count for `next` after exactly `context` (no backoff).
    pub fn count(&self, context: &[PerformanceEvent], next: PerformanceEvent) -> u32 {
        let ctx: Vec<u16> = context.iter().map(PerformanceEvent::id).collect();
        self.tables
            .get(ctx.as_slice())
            .and_then(|t| {
                t.next
                    .binary_search_by_key(&next.id(), |&(id, _)| id)
                    .ok()
                    .map(|i| t.next[i].1)
            })
            .unwrap_or(0)
    }

    fn lookup(&self, history: &[u16]) -> &CountTable {
        let max = self.spec.order.min(history.len());
        for len in (0..=max).rev() {
            if let Some(t) = self.tables.get(&history[history.len() - len..]) {
                return t;
            }
        }
        self.tables.get([].as_slice()).expect("unigram table always exists")
    }

    /// Length of the context actually used after backoff.
    pub fn context_len(&self, history: &[PerformanceEvent]) -> usize {
        let ids: Vec<u16> = history.iter().map(PerformanceEvent::id).collect();
        let max = self.spec.order.min(ids.len());
        (0..=max)
            .rev()
            .find(|&len| self.tables.contains_key(&ids[ids.len() - len..]))
            .unwrap_or(0)
    }

    /// Tempered, smoothed distribution over the vocabulary after `history`,
    /// without legality masking. Probabilities sum to 1.
    pub fn next_distribution(&self, history: &[PerformanceEvent]) -> Vec<(PerformanceEvent, f64)> {
        let ids: Vec<u16> = history.iter().map(PerformanceEvent::id).collect();
        let table = self.lookup(&ids);
        let v = self.vocab.len() as f64;
        let alpha = self.spec.smoothing;
        let denom = table.total as f64 + alpha * v;
        let inv_t = 1.0 / self.spec.temperature;
        let mut counts = vec![0u32; self.vocab.len()];
        for &(id, c) in &table.next {
            let i = self.vocab_index[usize::from(id)].expect("counted ids are in vocab");
            counts[usize::from(i)] = c;
        }
        let weights: Vec<f64> = counts
            .iter()
            .map(|&c| ((f64::from(c) + alpha) / denom).powf(inv_t))
            .collect();
        let sum: f64 = weights.iter().sum();
        self.vocab
            .iter()
            .zip(weights)
            .map(|(&id, w)| (PerformanceEvent::from_id(id).expect("valid id"), w / sum))
            .collect()
    }

    fn legal(&self, id: u16, sounding: &Sounding) -> bool {
        !is_note_off(id) || sounding.on[usize::from(id - 128)]
    }

    /// Draws the next event id. Note-offs for pitches that are not sounding
    /// are masked out. Returns `None` when nothing in the vocabulary is legal.
    fn sample_next<R: Rng>(&self, history: &[u16], sounding: &Sounding, rng: &mut R) -> Option<u16> {
        let table = self.lookup(history);
        let v = self.vocab.len();
        let alpha = self.spec.smoothing;
        let denom = table.total as f64 + alpha * v as f64;
        let inv_t = 1.0 / self.spec.temperature;
        let temper = |p: f64| if inv_t == 1.0 { p } else { p.powf(inv_t) };

        let mut seen_sum = 0.0;
        let mut illegal_seen = 0u32;
        for &(id, c) in &table.next {
            if self.legal(id, sounding) {
                seen_sum += temper((f64::from(c) + alpha) / denom);
            } else {
                illegal_seen += 1;
            }
        }
        let unseen = (v - table.next.len()) as u32;
        let illegal_unseen = self.note_offs_in_vocab - sounding.legal_offs - illegal_seen;
        let legal_unseen = unseen - illegal_unseen;
        let base = temper(alpha / denom);
        let total = seen_sum + f64::from(legal_unseen) * base;
        if total <= 0.0 {
            return None;
        }

        let mut u = rng.random::<f64>() * total;
        if u < seen_sum {
            let mut last = None;
            for &(id, c) in &table.next {
                if !self.legal(id, sounding) {
                    continue;
                }
                last = Some(id);
                u -= temper((f64::from(c) + alpha) / denom);
                if u < 0.0 {
                    return Some(id);
                }
            }
            return last;
        }
        if legal_unseen == 0 {
            return table
                .next
                .iter()
                .rev()
                .map(|&(id, _)| id)
                .find(|&id| self.legal(id, sounding));
        }
        let r = (((u - seen_sum) / base) as u32).min(legal_unseen - 1);
        let mut seen_iter = table.next.iter().map(|&(id, _)| id).peekable();
        let mut k = 0u32;
        for &id in &self.vocab {
            if seen_iter.peek() == Some(&id) {
                seen_iter.next();
                continue;
            }
            if !self.legal(id, sounding) {
                continue;
            }
            if k == r {
                return Some(id);
            }
            k += 1;
        }
        unreachable!("legal unseen count matches the vocabulary walk")
    }

    /// Generates exactly one 5000 ms chunk continuing `prefix`.
    ///
    /// Termination: a `TimeShift(10)` is forced after [`STALL_LIMIT`]
    /// consecutive non-time events or whenever no event is legal, and the
    /// longest possible shifts are forced once the [`MAX_CHUNK_EVENTS`]
    /// budget would otherwise be exceeded. A shift crossing the chunk
    /// boundary is clamped to land on it.
    pub fn generate_chunk(&self, prefix: &[PerformanceEvent], seed: RngSeed) -> Chunk {
        let mut rng = seed.rng();
        let carry = crate::events::scan(prefix, &Carry::default())
            .map(|s| s.carry_out)
            .unwrap_or_default();
        let mut sounding = Sounding {
            on: [false; 128],
            legal_offs: 0,
        };
        for &p in carry.sounding.keys() {
            self.note_on(&mut sounding, p);
        }

        let keep = self.spec.order.min(prefix.len());
        let mut history: Vec<u16> = prefix[prefix.len() - keep..].iter().map(PerformanceEvent::id).collect();
        let mut events = Vec::new();
        let mut elapsed = 0u32;
        let mut since_shift = 0usize;

        while elapsed < CHUNK_MS {
            let remaining = CHUNK_MS - elapsed;
            let shifts_needed = remaining.div_ceil(MAX_SHIFT_MS) as usize;
            let id = if events.len() + shifts_needed >= MAX_CHUNK_EVENTS {
                PerformanceEvent::TimeShift(remaining.min(MAX_SHIFT_MS)).id()
            } else if since_shift >= STALL_LIMIT {
                PerformanceEvent::TimeShift(TIME_STEP_MS).id()
            } else {
                self.sample_next(&history, &sounding, &mut rng)
                    .unwrap_or_else(|| PerformanceEvent::TimeShift(TIME_STEP_MS).id())
            };
            let mut ev = PerformanceEvent::from_id(id).expect("valid id");
            match ev {
                PerformanceEvent::TimeShift(ms) => {
                    let ms = ms.min(remaining);
                    ev = PerformanceEvent::TimeShift(ms);
                    elapsed += ms;
                    since_shift = 0;
                }
                PerformanceEvent::NoteOn(p) => {
                    self.note_on(&mut sounding, p);
                    since_shift += 1;
                }
                PerformanceEvent::NoteOff(p) => {
                    sounding.on[usize::from(p)] = false;
                    if self.vocab_index[usize::from(ev.id())].is_some() {
                        sounding.legal_offs -= 1;
                    }
                    since_shift += 1;
                }
                PerformanceEvent::SetVelocity(_) => since_shift += 1,
            }
            events.push(ev);
            history.push(ev.id());
            if history.len() > self.spec.order {
                history.remove(0);
            }
        }
        Chunk::new(events).expect("generated events are in the vocabulary")
    }

    fn note_on(&self, sounding: &mut Sounding, pitch: u8) {
        if !sounding.on[usize::from(pitch)] {
            sounding.on[usize::from(pitch)] = true;
            if self.vocab_index[usize::from(PerformanceEvent::NoteOff(pitch).id())].is_some() {
                sounding.legal_offs += 1;
            }
        }
    }

    /// Versioned binary container; identical models give identical bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        let name = self.spec.name.as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(self.spec.order as u32).to_le_bytes());
        out.extend_from_slice(&self.spec.smoothing.to_le_bytes());
        out.extend_from_slice(&self.spec.temperature.to_le_bytes());
        out.extend_from_slice(&(self.vocab.len() as u32).to_le_bytes());
        for id in &self.vocab {
            out.extend_from_slice(&id.to_le_bytes());
        }
        out.extend_from_slice(&(self.tables.len() as u32).to_le_bytes());
        for (ctx, table) in &self.tables {
            out.push(ctx.len() as u8);
            for id in ctx {
                out.extend_from_slice(&id.to_le_bytes());
            }
            out.extend_from_slice(&(table.next.len() as u32).to_le_bytes());
            for (id, c) in &table.next {
                out.extend_from_slice(&id.to_le_bytes());
                out.extend_from_slice(&c.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, GeneratorError> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != MODEL_MAGIC {
            return Err(GeneratorError::Corrupt("bad magic bytes".into()));
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != MODEL_VERSION {
            return Err(GeneratorError::VersionMismatch {
                found: version,
                expected: MODEL_VERSION,
            });
        }
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| GeneratorError::Corrupt("name is not UTF-8".into()))?;
        let order = r.u32()? as usize;
        let smoothing = f64::from_le_bytes(r.array()?);
        let temperature = f64::from_le_bytes(r.array()?);
        let spec = GeneratorSpec {
            name,
            order,
            smoothing,
            temperature,
        };
        spec.validate()?;

        let vocab_len = r.u32()? as usize;
        if vocab_len == 0 || vocab_len > VOCAB_SIZE {
            return Err(GeneratorError::Corrupt(format!("vocabulary size {vocab_len}")));
        }
        let mut vocab = Vec::with_capacity(vocab_len);
        for _ in 0..vocab_len {
            let id = r.u16()?;
            PerformanceEvent::from_id(id).map_err(|e| GeneratorError::Corrupt(e.to_string()))?;
            if vocab.last().is_some_and(|&last| last >= id) {
                return Err(GeneratorError::Corrupt("vocabulary not strictly sorted".into()));
            }
            vocab.push(id);
        }
        let in_vocab = |id: u16| vocab.binary_search(&id).is_ok();

        let n_tables = r.u32()? as usize;
        let mut tables = BTreeMap::new();
        for _ in 0..n_tables {
            let ctx_len = usize::from(r.u8()?);
            if ctx_len > order {
                return Err(GeneratorError::Corrupt("context longer than model order".into()));
            }
            let mut ctx = Vec::with_capacity(ctx_len);
            for _ in 0..ctx_len {
                let id = r.u16()?;
                if !in_vocab(id) {
                    return Err(GeneratorError::Corrupt(format!("context id {id} outside vocabulary")));
                }
                ctx.push(id);
            }
            let n = r.u32()? as usize;
            let mut next = Vec::with_capacity(n.min(VOCAB_SIZE));
            let mut total = 0u64;
            for _ in 0..n {
                let id = r.u16()?;
                let c = r.u32()?;
                if !in_vocab(id) || next.last().is_some_and(|&(last, _)| last >= id) {
                    return Err(GeneratorError::Corrupt("bad count table".into()));
                }
                total += u64::from(c);
                next.push((id, c));
            }
            if total == 0 {
                return Err(GeneratorError::Corrupt("empty count table".into()));
            }
            tables.insert(ctx, CountTable { total, next });
        }
        if r.pos != bytes.len() {
            return Err(GeneratorError::Corrupt("trailing bytes".into()));
        }
        if !tables.contains_key([].as_slice()) {
            return Err(GeneratorError::Corrupt("missing unigram table".into()));
        }
        Ok(GeneratorModel::assemble(spec, vocab, tables))
    }

    /// Hex SHA-256 of the serialized model.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

impl ChunkGenerator for GeneratorModel {
    fn generate_chunk(&self, prefix: &[PerformanceEvent], seed: RngSeed) -> Chunk {
        GeneratorModel::generate_chunk(self, prefix, seed)
    }

    fn digest(&self) -> String {
        GeneratorModel::digest(self)
    }

    fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }
}

fn is_note_off(id: u16) -> bool {
    (128..256).contains(&id)
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], GeneratorError> {
        if self.bytes.len() - self.pos < n {
            return Err(GeneratorError::Corrupt("unexpected end of model data".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], GeneratorError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8, GeneratorError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, GeneratorError> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32, GeneratorError> {
        Ok(u32::from_le_bytes(self.array()?))
    }
}
