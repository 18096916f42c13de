//! The pre-generated continuation forest.
//!
//! `n1` root chunks, `n2` continuations per root and `n3` continuations per
//! child; every root-to-leaf path is a 15 s phrase. Node seeds and ids are
//! `hash64(forest_seed, path)`, so the forest is a pure function of the
//! generator and the config, independent of build parallelism.
//!
//! # On-disk layout
//!
//! A forest directory holds `manifest.json` and one node file per depth,
//! `nodes-d1.bin`, `nodes-d2.bin`, `nodes-d3.bin`. Node files are a plain
//! concatenation of records in path order, all integers little-endian:
//!
//! ```text
//! [id u64][parent id u64, 0 for roots][depth u8][event count u32][event id u16 * count]
//! ```
//!
//! The manifest records the SHA-256 of each node file, and a digest over the
//! config, generator digest, hash algorithm and file checksums. Bin edges and
//! the build timestamp are stored in the manifest but kept out of the digest.

use std::borrow::Cow;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::events::{scan, Carry, Chunk, PerformanceEvent, Phrase, CHUNK_MS};
use crate::features::{compute_bin_edges, extract_features, BinEdges, FeatureError, FeatureVector};
use crate::generator::{ChunkGenerator, GeneratorSpec};
use crate::seed::{hash64, RngSeed, HASH_ALGORITHM};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
const NODE_HEADER_LEN: usize = 8 + 8 + 1 + 4;
/// Mid-level nodes whose leaves are generated together before being handed
/// to the sink in order.
const LEAF_BATCH: usize = 64;

#[derive(Debug, Error)]
pub enum ForestError {
    #[error("invalid forest config: {0}")]
    InvalidConfig(String),
    #[error("path {0} is outside the forest")]
    OutOfBounds(NodePath),
    #[error("forest format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt forest index: {0}")]
    CorruptIndex(String),
    #[error("generator digest {found} does not match manifest digest {expected}")]
    GeneratorMismatch { found: String, expected: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ForestError + '_ {
    move |source| ForestError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub n1: u32,
    pub n2: u32,
    pub n3: u32,
    pub forest_seed: RngSeed,
}

impl ForestConfig {
    pub const DEFAULT_WIDTH: u32 = 100;

    pub fn new(n1: u32, n2: u32, n3: u32, forest_seed: u64) -> Self {
        ForestConfig {
            n1,
            n2,
            n3,
            forest_seed: RngSeed(forest_seed),
        }
    }

    /// 100 roots, 100 children per root, 100 grandchildren per child.
    pub fn full_size(forest_seed: u64) -> Self {
        Self::new(
            Self::DEFAULT_WIDTH,
            Self::DEFAULT_WIDTH,
            Self::DEFAULT_WIDTH,
            forest_seed,
        )
    }

    pub fn validate(&self) -> Result<(), ForestError> {
        if self.n1 == 0 || self.n2 == 0 || self.n3 == 0 {
            return Err(ForestError::InvalidConfig(format!(
                "dimensions must be positive, got {}/{}/{}",
                self.n1, self.n2, self.n3
            )));
        }
        Ok(())
    }

    /// Nodes at depths 1, 2 and 3.
    pub fn node_counts(&self) -> [u64; 3] {
        let (a, b, c) = (u64::from(self.n1), u64::from(self.n2), u64::from(self.n3));
        [a, a * b, a * b * c]
    }

    pub fn total_nodes(&self) -> u64 {
        self.node_counts().iter().sum()
    }

    /// Distinct root-to-leaf paths, i.e. full phrases.
    pub fn phrase_count(&self) -> u64 {
        self.node_counts()[2]
    }

    fn width(&self, depth: u8) -> u32 {
        match depth {
            1 => self.n1,
            2 => self.n2,
            _ => self.n3,
        }
    }
}

/// Indices from the root: `[i]`, `[i, j]` or `[i, j, k]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodePath(pub Vec<u32>);

impl NodePath {
    pub fn root(i: u32) -> Self {
        NodePath(vec![i])
    }

    pub fn leaf(i: u32, j: u32, k: u32) -> Self {
        NodePath(vec![i, j, k])
    }

    pub fn depth(&self) -> u8 {
        self.0.len() as u8
    }

    pub fn parent(&self) -> Option<NodePath> {
        (self.0.len() > 1).then(|| NodePath(self.0[..self.0.len() - 1].to_vec()))
    }

    pub fn child(&self, index: u32) -> NodePath {
        let mut v = self.0.clone();
        v.push(index);
        NodePath(v)
    }

    pub fn indices(&self) -> &[u32] {
        &self.0
    }
}

impl std::fmt::Display for NodePath {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(u32::to_string).collect();
        write!(f, "({})", parts.join(","))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestNode {
    pub id: u64,
    pub depth: u8,
    pub parent_id: Option<u64>,
    pub path: NodePath,
    pub chunk: Chunk,
    pub features: FeatureVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorInfo {
    pub spec: GeneratorSpec,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeFile {
    pub name: String,
    pub depth: u8,
    pub nodes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: ForestConfig,
    pub generator: GeneratorInfo,
    pub hash_algorithm: String,
    pub chunk_ms: u32,
    pub files: Vec<NodeFile>,
    pub bin_edges: Option<BinEdges>,
    /// Unix seconds; informational only.
    pub built_at: Option<u64>,
    pub digest: String,
}

impl Manifest {
    fn compute_digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"chunkforest-manifest\n");
        h.update(self.format_version.to_le_bytes());
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        h.update(b"\n");
        h.update(self.generator.digest.as_bytes());
        h.update(b"\n");
        h.update(self.hash_algorithm.as_bytes());
        h.update(b"\n");
        for f in &self.files {
            h.update(format!("{}:{}:{}\n", f.name, f.nodes, f.sha256).as_bytes());
        }
        hex::encode(h.finalize())
    }
}

pub fn node_file_name(depth: u8) -> String {
    format!("nodes-d{depth}.bin")
}

fn node_id(config: &ForestConfig, path: &[u32]) -> u64 {
    hash64(config.forest_seed.0, path)
}

fn encode_node(out: &mut Vec<u8>, id: u64, parent: Option<u64>, depth: u8, events: &[PerformanceEvent]) {
    out.extend_from_slice(&id.to_le_bytes());
    out.extend_from_slice(&parent.unwrap_or(0).to_le_bytes());
    out.push(depth);
    out.extend_from_slice(&(events.len() as u32).to_le_bytes());
    for e in events {
        out.extend_from_slice(&e.id().to_le_bytes());
    }
}

struct RawNode {
    id: u64,
    parent: u64,
    depth: u8,
    events: Vec<PerformanceEvent>,
}

fn decode_node(bytes: &[u8]) -> Result<(RawNode, usize), ForestError> {
    let corrupt = |m: &str| ForestError::CorruptIndex(m.to_string());
    if bytes.len() < NODE_HEADER_LEN {
        return Err(corrupt("truncated node header"));
    }
    let id = u64::from_le_bytes(bytes[0..8].try_into().expect("len"));
    let parent = u64::from_le_bytes(bytes[8..16].try_into().expect("len"));
    let depth = bytes[16];
    let count = u32::from_le_bytes(bytes[17..21].try_into().expect("len")) as usize;
    let end = NODE_HEADER_LEN + count * 2;
    if bytes.len() < end {
        return Err(corrupt("truncated node events"));
    }
    let events = bytes[NODE_HEADER_LEN..end]
        .chunks_exact(2)
        .map(|b| PerformanceEvent::from_id(u16::from_le_bytes([b[0], b[1]])))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| ForestError::CorruptIndex(e.to_string()))?;
    Ok((
        RawNode {
            id,
            parent,
            depth,
            events,
        },
        end,
    ))
}

enum LeafStore {
    Eager(Vec<ForestNode>),
    Lazy(LazyLeaves),
}

struct LazyLeaves {
    path: PathBuf,
    /// Byte offset of every leaf record, plus the file length.
    offsets: Vec<u64>,
    file: Mutex<File>,
}

impl LazyLeaves {
    fn read_raw(&self, index: usize) -> Result<RawNode, ForestError> {
        let start = self.offsets[index];
        let len = (self.offsets[index + 1] - start) as usize;
        let mut buf = vec![0u8; len];
        {
            let mut f = self.file.lock().unwrap_or_else(|p| p.into_inner());
            f.seek(SeekFrom::Start(start)).map_err(io_err(&self.path))?;
            f.read_exact(&mut buf).map_err(io_err(&self.path))?;
        }
        decode_node(&buf).map(|(n, _)| n)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadOptions {
    /// Keep depth-3 nodes on disk and decode them on access.
    pub lazy_leaves: bool,
}

pub struct Forest {
    manifest: Manifest,
    roots: Vec<ForestNode>,
    mids: Vec<ForestNode>,
    /// Notes sounding after root + mid, per mid index.
    mid_carry: Vec<Carry>,
    leaves: LeafStore,
}

impl std::fmt::Debug for Forest {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Forest")
            .field("config", &self.manifest.config)
            .field("digest", &self.manifest.digest)
            .field("lazy_leaves", &matches!(self.leaves, LeafStore::Lazy(_)))
            .finish()
    }
}

fn carry_after(prefix: &[PerformanceEvent]) -> Carry {
    scan(prefix, &Carry::default()).map(|s| s.carry_out).unwrap_or_default()
}

fn make_node(config: &ForestConfig, path: Vec<u32>, chunk: Chunk, carry: &Carry) -> Result<ForestNode, ForestError> {
    let features = extract_features(&chunk, carry)?;
    let depth = path.len() as u8;
    let parent_id = (depth > 1).then(|| node_id(config, &path[..path.len() - 1]));
    Ok(ForestNode {
        id: node_id(config, &path),
        depth,
        parent_id,
        path: NodePath(path),
        chunk,
        features,
    })
}

fn concat(a: &[PerformanceEvent], b: &[PerformanceEvent]) -> Vec<PerformanceEvent> {
    let mut v = Vec::with_capacity(a.len() + b.len());
    v.extend_from_slice(a);
    v.extend_from_slice(b);
    v
}

fn mid_index(config: &ForestConfig, i: u32, j: u32) -> usize {
    i as usize * config.n2 as usize + j as usize
}

fn leaf_index(config: &ForestConfig, i: u32, j: u32, k: u32) -> usize {
    mid_index(config, i, j) * config.n3 as usize + k as usize
}

struct Upper {
    roots: Vec<ForestNode>,
    mids: Vec<ForestNode>,
    mid_carry: Vec<Carry>,
}

fn build_upper<G: ChunkGenerator + ?Sized>(model: &G, config: &ForestConfig) -> Result<Upper, ForestError> {
    let seed = config.forest_seed;
    let roots: Vec<ForestNode> = (0..config.n1)
        .into_par_iter()
        .map(|i| {
            let chunk = model.generate_chunk(&[], seed.derive(&[i]));
            make_node(config, vec![i], chunk, &Carry::default())
        })
        .collect::<Result<_, _>>()?;
    let root_carry: Vec<Carry> = roots.iter().map(|r| carry_after(r.chunk.events())).collect();
    let mids: Vec<ForestNode> = (0..config.n1 * config.n2)
        .into_par_iter()
        .map(|m| {
            let (i, j) = (m / config.n2, m % config.n2);
            let root = &roots[i as usize];
            let chunk = model.generate_chunk(root.chunk.events(), seed.derive(&[i, j]));
            make_node(config, vec![i, j], chunk, &root_carry[i as usize])
        })
        .collect::<Result<_, _>>()?;
    let mid_carry = mids
        .par_iter()
        .map(|m| {
            let root = &roots[m.path.0[0] as usize];
            carry_after(&concat(root.chunk.events(), m.chunk.events()))
        })
        .collect();
    Ok(Upper { roots, mids, mid_carry })
}

/// Generates leaves batch by batch, in path order, handing each to `sink`.
fn build_leaves<G, F>(model: &G, config: &ForestConfig, upper: &Upper, mut sink: F) -> Result<(), ForestError>
where
    G: ChunkGenerator + ?Sized,
    F: FnMut(ForestNode) -> Result<(), ForestError>,
{
    let seed = config.forest_seed;
    let n_mids = upper.mids.len();
    let mut start = 0;
    while start < n_mids {
        let end = (start + LEAF_BATCH).min(n_mids);
        let batch: Vec<Vec<ForestNode>> = (start..end)
            .into_par_iter()
            .map(|m| {
                let mid = &upper.mids[m];
                let (i, j) = (mid.path.0[0], mid.path.0[1]);
                let prefix = concat(upper.roots[i as usize].chunk.events(), mid.chunk.events());
                (0..config.n3)
                    .map(|k| {
                        let chunk = model.generate_chunk(&prefix, seed.derive(&[i, j, k]));
                        make_node(config, vec![i, j, k], chunk, &upper.mid_carry[m])
                    })
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<_, _>>()?;
        for node in batch.into_iter().flatten() {
            sink(node)?;
        }
        start = end;
    }
    Ok(())
}

fn node_file_entry(depth: u8, nodes: u64, hasher: Sha256) -> NodeFile {
    NodeFile {
        name: node_file_name(depth),
        depth,
        nodes,
        sha256: hex::encode(hasher.finalize()),
    }
}

fn hash_nodes<'a>(nodes: impl Iterator<Item = &'a ForestNode>) -> (u64, Sha256) {
    let mut hasher = Sha256::new();
    let mut buf = Vec::new();
    let mut n = 0;
    for node in nodes {
        buf.clear();
        encode_node(&mut buf, node.id, node.parent_id, node.depth, node.chunk.events());
        hasher.update(&buf);
        n += 1;
    }
    (n, hasher)
}

fn new_manifest<G: ChunkGenerator + ?Sized>(model: &G, config: ForestConfig, files: Vec<NodeFile>) -> Manifest {
    let mut manifest = Manifest {
        format_version: FORMAT_VERSION,
        config,
        generator: GeneratorInfo {
            spec: model.spec().clone(),
            digest: model.digest(),
        },
        hash_algorithm: HASH_ALGORITHM.to_string(),
        chunk_ms: CHUNK_MS,
        files,
        bin_edges: None,
        built_at: None,
        digest: String::new(),
    };
    manifest.digest = manifest.compute_digest();
    manifest
}

/// Builds the whole forest in memory. Bin edges are left unset; see
/// [`Forest::index_features`].
pub fn build_forest<G: ChunkGenerator + ?Sized>(model: &G, config: ForestConfig) -> Result<Forest, ForestError> {
    config.validate()?;
    let upper = build_upper(model, &config)?;
    let mut leaves = Vec::with_capacity(config.node_counts()[2] as usize);
    build_leaves(model, &config, &upper, |n| {
        leaves.push(n);
        Ok(())
    })?;
    let files = vec![
        {
            let (n, h) = hash_nodes(upper.roots.iter());
            node_file_entry(1, n, h)
        },
        {
            let (n, h) = hash_nodes(upper.mids.iter());
            node_file_entry(2, n, h)
        },
        {
            let (n, h) = hash_nodes(leaves.iter());
            node_file_entry(3, n, h)
        },
    ];
    Ok(Forest {
        manifest: new_manifest(model, config, files),
        roots: upper.roots,
        mids: upper.mids,
        mid_carry: upper.mid_carry,
        leaves: LeafStore::Eager(leaves),
    })
}

struct NodeWriter {
    path: PathBuf,
    out: BufWriter<File>,
    hasher: Sha256,
    nodes: u64,
    buf: Vec<u8>,
}

impl NodeWriter {
    fn create(path: PathBuf) -> Result<Self, ForestError> {
        let file = File::create(&path).map_err(io_err(&path))?;
        Ok(NodeWriter {
            path,
            out: BufWriter::new(file),
            hasher: Sha256::new(),
            nodes: 0,
            buf: Vec::new(),
        })
    }

    fn write(&mut self, node: &ForestNode) -> Result<(), ForestError> {
        self.buf.clear();
        encode_node(&mut self.buf, node.id, node.parent_id, node.depth, node.chunk.events());
        self.hasher.update(&self.buf);
        self.out.write_all(&self.buf).map_err(io_err(&self.path))?;
        self.nodes += 1;
        Ok(())
    }

    fn finish(mut self, depth: u8) -> Result<NodeFile, ForestError> {
        self.out.flush().map_err(io_err(&self.path))?;
        self.out.get_ref().sync_all().map_err(io_err(&self.path))?;
        Ok(node_file_entry(depth, self.nodes, self.hasher))
    }
}

fn staging_dir(dir: &Path) -> PathBuf {
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "forest".into());
    dir.with_file_name(format!(".{name}.partial-{}", std::process::id()))
}

/// Writes into a staging directory next to `dir`, then swaps it into place.
/// On failure the staging directory is removed.
fn write_atomically<T>(dir: &Path, f: impl FnOnce(&Path) -> Result<T, ForestError>) -> Result<T, ForestError> {
    let staging = staging_dir(dir);
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(io_err(&staging))?;
    }
    if let Some(parent) = dir.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::create_dir(&staging).map_err(io_err(&staging))?;
    let result = f(&staging).and_then(|value| {
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(io_err(dir))?;
        }
        fs::rename(&staging, dir).map_err(io_err(dir))?;
        Ok(value)
    });
    if result.is_err() {
        let _ = fs::remove_dir_all(&staging);
    }
    result
}

fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<(), ForestError> {
    let path = dir.join(MANIFEST_FILE);
    let tmp = dir.join(format!(".{MANIFEST_FILE}.tmp"));
    let json = serde_json::to_vec_pretty(manifest)?;
    fs::write(&tmp, json).map_err(io_err(&tmp))?;
    fs::rename(&tmp, &path).map_err(io_err(&path))
}

/// Builds straight to disk without holding the leaves in memory. The files
/// are byte-identical to `save_forest(build_forest(..))`.
pub fn build_forest_to_dir<G: ChunkGenerator + ?Sized>(
    model: &G,
    config: ForestConfig,
    dir: &Path,
    built_at: Option<u64>,
) -> Result<Manifest, ForestError> {
    config.validate()?;
    write_atomically(dir, |staging| {
        let upper = build_upper(model, &config)?;
        let mut files = Vec::new();
        for (depth, nodes) in [(1u8, &upper.roots), (2, &upper.mids)] {
            let mut w = NodeWriter::create(staging.join(node_file_name(depth)))?;
            for n in nodes.iter() {
                w.write(n)?;
            }
            files.push(w.finish(depth)?);
        }
        let mut w = NodeWriter::create(staging.join(node_file_name(3)))?;
        build_leaves(model, &config, &upper, |n| w.write(&n))?;
        files.push(w.finish(3)?);
        let mut manifest = new_manifest(model, config, files);
        manifest.built_at = built_at;
        write_manifest(staging, &manifest)?;
        Ok(manifest)
    })
}

pub fn save_forest(forest: &Forest, dir: &Path) -> Result<(), ForestError> {
    write_atomically(dir, |staging| {
        for depth in 1..=3u8 {
            let mut w = NodeWriter::create(staging.join(node_file_name(depth)))?;
            match depth {
                1 => forest.roots.iter().try_for_each(|n| w.write(n))?,
                2 => forest.mids.iter().try_for_each(|n| w.write(n))?,
                _ => forest.for_each_leaf(|n| w.write(&n))?,
            }
            let entry = w.finish(depth)?;
            let expected = &forest.manifest.files[usize::from(depth) - 1];
            if entry.sha256 != expected.sha256 {
                return Err(ForestError::CorruptIndex(format!(
                    "{} no longer matches its manifest checksum",
                    entry.name
                )));
            }
        }
        write_manifest(staging, &forest.manifest)
    })
}

/// Rewrites only `manifest.json` (after indexing bin edges, for example).
pub fn save_manifest(forest: &Forest, dir: &Path) -> Result<(), ForestError> {
    write_manifest(dir, &forest.manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, ForestError> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    let value: serde_json::Value = serde_json::from_slice(&bytes)?;
    let found = value.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != FORMAT_VERSION {
        return Err(ForestError::VersionMismatch {
            found,
            expected: FORMAT_VERSION,
        });
    }
    let manifest: Manifest = serde_json::from_value(value)?;
    if manifest.compute_digest() != manifest.digest {
        return Err(ForestError::CorruptIndex("manifest digest mismatch".into()));
    }
    Ok(manifest)
}

fn verify_record(config: &ForestConfig, raw: &RawNode, path: &[u32]) -> Result<(), ForestError> {
    let depth = path.len() as u8;
    let parent = if depth > 1 {
        node_id(config, &path[..path.len() - 1])
    } else {
        0
    };
    if raw.id != node_id(config, path) || raw.parent != parent || raw.depth != depth {
        return Err(ForestError::CorruptIndex(format!(
            "node record for {} does not match its position",
            NodePath(path.to_vec())
        )));
    }
    Ok(())
}

fn path_for(config: &ForestConfig, depth: u8, index: usize) -> Vec<u32> {
    let index = index as u32;
    match depth {
        1 => vec![index],
        2 => vec![index / config.n2, index % config.n2],
        _ => {
            let k = index % config.n3;
            let m = index / config.n3;
            vec![m / config.n2, m % config.n2, k]
        }
    }
}

fn read_checked(dir: &Path, entry: &NodeFile) -> Result<Vec<u8>, ForestError> {
    let path = dir.join(&entry.name);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    if hex::encode(Sha256::digest(&bytes)) != entry.sha256 {
        return Err(ForestError::CorruptIndex(format!("{} checksum mismatch", entry.name)));
    }
    Ok(bytes)
}

fn decode_all(bytes: &[u8], expected: u64) -> Result<Vec<RawNode>, ForestError> {
    let mut out = Vec::with_capacity(expected as usize);
    let mut pos = 0;
    while pos < bytes.len() {
        let (node, used) = decode_node(&bytes[pos..])?;
        out.push(node);
        pos += used;
    }
    if out.len() as u64 != expected {
        return Err(ForestError::CorruptIndex(format!(
            "expected {expected} nodes, found {}",
            out.len()
        )));
    }
    Ok(out)
}

fn check_chunk(events: Vec<PerformanceEvent>, path: &[u32]) -> Result<Chunk, ForestError> {
    let chunk = Chunk::new(events).map_err(|e| ForestError::CorruptIndex(e.to_string()))?;
    if chunk.duration_ms() != CHUNK_MS {
        return Err(ForestError::CorruptIndex(format!(
            "chunk {} lasts {} ms",
            NodePath(path.to_vec()),
            chunk.duration_ms()
        )));
    }
    Ok(chunk)
}

pub fn load_forest(dir: &Path) -> Result<Forest, ForestError> {
    load_forest_with(dir, LoadOptions::default())
}

pub fn load_forest_with(dir: &Path, options: LoadOptions) -> Result<Forest, ForestError> {
    let manifest = read_manifest(dir)?;
    let config = manifest.config;
    config.validate()?;
    let counts = config.node_counts();
    if manifest.files.len() != 3
        || manifest
            .files
            .iter()
            .enumerate()
            .any(|(i, f)| f.depth as usize != i + 1 || f.name != node_file_name(f.depth) || f.nodes != counts[i])
    {
        return Err(ForestError::CorruptIndex(
            "manifest file table does not match config".into(),
        ));
    }

    let decode_depth = |depth: u8, carries: &(dyn Fn(usize) -> Carry + Sync)| -> Result<Vec<ForestNode>, ForestError> {
        let entry = &manifest.files[usize::from(depth) - 1];
        let raw = decode_all(&read_checked(dir, entry)?, entry.nodes)?;
        raw.into_par_iter()
            .enumerate()
            .map(|(idx, r)| {
                let path = path_for(&config, depth, idx);
                verify_record(&config, &r, &path)?;
                let chunk = check_chunk(r.events, &path)?;
                let carry = carries(idx);
                chunk
                    .validate_in_context(&carry)
                    .map_err(|e| ForestError::CorruptIndex(e.to_string()))?;
                make_node(&config, path, chunk, &carry)
            })
            .collect()
    };

    let roots = decode_depth(1, &|_| Carry::default())?;
    let root_carry: Vec<Carry> = roots.iter().map(|r| carry_after(r.chunk.events())).collect();
    let mids = decode_depth(2, &|idx| root_carry[idx / config.n2 as usize].clone())?;
    let mid_carry: Vec<Carry> = mids
        .par_iter()
        .map(|m| carry_after(&concat(roots[m.path.0[0] as usize].chunk.events(), m.chunk.events())))
        .collect();

    let leaves = if options.lazy_leaves {
        let entry = &manifest.files[2];
        let path = dir.join(&entry.name);
        let file = File::open(&path).map_err(io_err(&path))?;
        let mut reader = BufReader::new(file);
        let mut hasher = Sha256::new();
        let mut offsets = Vec::with_capacity(counts[2] as usize + 1);
        let mut pos = 0u64;
        let mut header = [0u8; NODE_HEADER_LEN];
        let mut body = Vec::new();
        loop {
            match reader.read_exact(&mut header) {
                Ok(()) => {}
                Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
                Err(e) => return Err(io_err(&path)(e)),
            }
            let count = u32::from_le_bytes(header[17..21].try_into().expect("len")) as usize;
            body.resize(count * 2, 0);
            reader
                .read_exact(&mut body)
                .map_err(|_| ForestError::CorruptIndex("truncated leaf record".into()))?;
            hasher.update(header);
            hasher.update(&body);
            offsets.push(pos);
            pos += (NODE_HEADER_LEN + body.len()) as u64;
        }
        if hex::encode(hasher.finalize()) != entry.sha256 {
            return Err(ForestError::CorruptIndex(format!("{} checksum mismatch", entry.name)));
        }
        if offsets.len() as u64 != entry.nodes {
            return Err(ForestError::CorruptIndex("leaf count mismatch".into()));
        }
        offsets.push(pos);
        let file = File::open(&path).map_err(io_err(&path))?;
        LeafStore::Lazy(LazyLeaves {
            path,
            offsets,
            file: Mutex::new(file),
        })
    } else {
        LeafStore::Eager(decode_depth(3, &|idx| mid_carry[idx / config.n3 as usize].clone())?)
    };

    Ok(Forest {
        manifest,
        roots,
        mids,
        mid_carry,
        leaves,
    })
}

impl Forest {
    pub fn config(&self) -> &ForestConfig {
        &self.manifest.config
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn digest(&self) -> &str {
        &self.manifest.digest
    }

    pub fn bin_edges(&self) -> Option<&BinEdges> {
        self.manifest.bin_edges.as_ref()
    }

    pub fn set_built_at(&mut self, unix_seconds: Option<u64>) {
        self.manifest.built_at = unix_seconds;
    }

    /// Computes quintile edges for every depth and stores them in the manifest.
    pub fn index_features(&mut self) -> Result<&BinEdges, ForestError> {
        let edges = compute_bin_edges(self)?;
        self.manifest.bin_edges = Some(edges);
        Ok(self.manifest.bin_edges.as_ref().expect("just set"))
    }

    pub fn is_lazy(&self) -> bool {
        matches!(self.leaves, LeafStore::Lazy(_))
    }

    pub fn roots(&self) -> &[ForestNode] {
        &self.roots
    }

    pub fn node_count(&self, depth: u8) -> usize {
        match depth {
            1 => self.roots.len(),
            2 => self.mids.len(),
            3 => match &self.leaves {
                LeafStore::Eager(v) => v.len(),
                LeafStore::Lazy(l) => l.offsets.len() - 1,
            },
            _ => 0,
        }
    }

    fn check_path(&self, path: &NodePath) -> Result<(), ForestError> {
        let config = self.config();
        let ok = (1..=3).contains(&path.0.len())
            && path
                .0
                .iter()
                .enumerate()
                .all(|(d, &idx)| idx < config.width(d as u8 + 1));
        if ok {
            Ok(())
        } else {
            Err(ForestError::OutOfBounds(path.clone()))
        }
    }

    fn leaf_by_index(&self, index: usize) -> Result<Cow<'_, ForestNode>, ForestError> {
        match &self.leaves {
            LeafStore::Eager(v) => Ok(Cow::Borrowed(&v[index])),
            LeafStore::Lazy(lazy) => {
                let config = self.config();
                let path = path_for(config, 3, index);
                let raw = lazy.read_raw(index)?;
                verify_record(config, &raw, &path)?;
                let chunk = check_chunk(raw.events, &path)?;
                let carry = &self.mid_carry[index / config.n3 as usize];
                Ok(Cow::Owned(make_node(config, path, chunk, carry)?))
            }
        }
    }

    pub fn node(&self, path: &NodePath) -> Result<Cow<'_, ForestNode>, ForestError> {
        self.check_path(path)?;
        let config = self.config();
        Ok(match *path.0.as_slice() {
            [i] => Cow::Borrowed(&self.roots[i as usize]),
            [i, j] => Cow::Borrowed(&self.mids[mid_index(config, i, j)]),
            [i, j, k] => return self.leaf_by_index(leaf_index(config, i, j, k)),
            _ => unreachable!("checked"),
        })
    }

    /// Direct children of a depth-1 or depth-2 node, in index order.
    pub fn children(&self, path: &NodePath) -> Result<Vec<Cow<'_, ForestNode>>, ForestError> {
        self.check_path(path)?;
        let config = *self.config();
        match *path.0.as_slice() {
            [i] => {
                let start = mid_index(&config, i, 0);
                Ok(self.mids[start..start + config.n2 as usize]
                    .iter()
                    .map(Cow::Borrowed)
                    .collect())
            }
            [i, j] => {
                let start = leaf_index(&config, i, j, 0);
                (start..start + config.n3 as usize)
                    .map(|idx| self.leaf_by_index(idx))
                    .collect()
            }
            _ => Err(ForestError::OutOfBounds(path.child(0))),
        }
    }

    /// Events of every ancestor chunk of `path`, concatenated.
    pub fn prefix_events(&self, path: &NodePath) -> Result<Vec<PerformanceEvent>, ForestError> {
        self.check_path(path)?;
        let mut out = Vec::new();
        for d in 1..path.0.len() {
            let node = self.node(&NodePath(path.0[..d].to_vec()))?;
            out.extend_from_slice(node.chunk.events());
        }
        Ok(out)
    }

    /// Chunks along the path from the root down to `path`, as a phrase.
    pub fn phrase_along(&self, path: &NodePath) -> Result<Phrase, ForestError> {
        self.check_path(path)?;
        let chunks = (1..=path.0.len())
            .map(|d| self.node(&NodePath(path.0[..d].to_vec())).map(|n| n.chunk.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        Phrase::new(chunks).map_err(|e| ForestError::CorruptIndex(e.to_string()))
    }

    pub fn phrase_at(&self, i: u32, j: u32, k: u32) -> Result<Phrase, ForestError> {
        self.phrase_along(&NodePath::leaf(i, j, k))
    }

    /// Features of every node at `depth`, in path order.
    pub fn depth_features(&self, depth: u8) -> Vec<FeatureVector> {
        match depth {
            1 => self.roots.iter().map(|n| n.features.clone()).collect(),
            2 => self.mids.iter().map(|n| n.features.clone()).collect(),
            3 => match &self.leaves {
                LeafStore::Eager(v) => v.iter().map(|n| n.features.clone()).collect(),
                LeafStore::Lazy(_) => (0..self.node_count(3))
                    .into_par_iter()
                    .map(|idx| self.leaf_by_index(idx).map(|n| n.features.clone()))
                    .collect::<Result<Vec<_>, _>>()
                    .unwrap_or_default(),
            },
            _ => Vec::new(),
        }
    }

    /// Visits every node at every depth in path order.
    pub fn for_each_node<F>(&self, mut f: F) -> Result<(), ForestError>
    where
        F: FnMut(&ForestNode) -> Result<(), ForestError>,
    {
        self.roots.iter().try_for_each(&mut f)?;
        self.mids.iter().try_for_each(&mut f)?;
        self.for_each_leaf(|n| f(&n))
    }

    fn for_each_leaf<F>(&self, mut f: F) -> Result<(), ForestError>
    where
        F: FnMut(Cow<'_, ForestNode>) -> Result<(), ForestError>,
    {
        for idx in 0..self.node_count(3) {
            f(self.leaf_by_index(idx)?)?;
        }
        Ok(())
    }

    /// Regenerates the chunk at `path` from its ancestors and seed and checks
    /// it matches what is stored.
    pub fn verify_node<G: ChunkGenerator + ?Sized>(&self, model: &G, path: &NodePath) -> Result<bool, ForestError> {
        let prefix = self.prefix_events(path)?;
        let stored = self.node(path)?;
        let regenerated = model.generate_chunk(&prefix, self.config().forest_seed.derive(path.indices()));
        Ok(regenerated == stored.chunk)
    }

    pub fn check_generator<G: ChunkGenerator + ?Sized>(&self, model: &G) -> Result<(), ForestError> {
        let found = model.digest();
        if found != self.manifest.generator.digest {
            return Err(ForestError::GeneratorMismatch {
                found,
                expected: self.manifest.generator.digest.clone(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{train, GeneratorModel};

    fn model() -> GeneratorModel {
        let corpus = crate::corpus::synthetic_corpus(RngSeed(2), 6);
        train(&corpus, GeneratorSpec::default()).unwrap()
    }

    #[test]
    fn counts_per_depth() {
        let forest = build_forest(&model(), ForestConfig::new(2, 2, 2, 7)).unwrap();
        assert_eq!(
            [forest.node_count(1), forest.node_count(2), forest.node_count(3)],
            [2, 4, 8]
        );
        assert_eq!(forest.config().total_nodes(), 14);
        assert_eq!(forest.config().phrase_count(), 8);
        assert_eq!(ForestConfig::full_size(0).total_nodes(), 1_010_100);
        assert_eq!(ForestConfig::full_size(0).phrase_count(), 1_000_000);
    }

    #[test]
    fn zero_width_is_rejected() {
        assert!(matches!(
            build_forest(&model(), ForestConfig::new(2, 0, 2, 7)),
            Err(ForestError::InvalidConfig(_))
        ));
    }

    #[test]
    fn structure_and_ids() {
        let forest = build_forest(&model(), ForestConfig::new(2, 3, 2, 11)).unwrap();
        let leaf = forest.node(&NodePath::leaf(1, 2, 1)).unwrap();
        assert_eq!(leaf.depth, 3);
        assert_eq!(leaf.id, hash64(11, &[1, 2, 1]));
        assert_eq!(leaf.parent_id, Some(hash64(11, &[1, 2])));
        assert_eq!(forest.roots()[0].parent_id, None);
        let kids = forest.children(&NodePath(vec![1, 2])).unwrap();
        assert_eq!(kids.len(), 2);
        assert!(kids.iter().all(|k| k.parent_id == Some(hash64(11, &[1, 2]))));
        assert!(matches!(
            forest.node(&NodePath::leaf(2, 0, 0)),
            Err(ForestError::OutOfBounds(_))
        ));
        assert!(matches!(forest.phrase_at(0, 3, 0), Err(ForestError::OutOfBounds(_))));
        assert!(matches!(
            forest.children(&NodePath::leaf(0, 0, 0)),
            Err(ForestError::OutOfBounds(_))
        ));
    }

    #[test]
    fn phrases_are_fifteen_seconds_and_distinct() {
        let forest = build_forest(&model(), ForestConfig::new(2, 2, 2, 3)).unwrap();
        let mut phrases = Vec::new();
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    let p = forest.phrase_at(i, j, k).unwrap();
                    assert!(p.is_complete());
                    assert_eq!(p.total_duration_ms(), 15_000);
                    phrases.push(p);
                }
            }
        }
        for a in 0..phrases.len() {
            for b in a + 1..phrases.len() {
                assert_ne!(phrases[a], phrases[b], "paths {a} and {b} collide");
            }
        }
    }

    #[test]
    fn prefix_consistency() {
        let m = model();
        let forest = build_forest(&m, ForestConfig::new(2, 2, 3, 5)).unwrap();
        for path in [NodePath::root(1), NodePath(vec![0, 1]), NodePath::leaf(1, 0, 2)] {
            assert!(forest.verify_node(&m, &path).unwrap());
        }
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let m = model();
        let config = ForestConfig::new(3, 2, 2, 9);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let a = one.install(|| build_forest(&m, config).unwrap());
        let b = build_forest(&m, config).unwrap();
        assert_eq!(a.digest(), b.digest());
    }

    #[test]
    fn save_load_round_trip() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("forest");
        let mut forest = build_forest(&m, ForestConfig::new(2, 3, 5, 1)).unwrap();
        forest.index_features().unwrap_err();
        save_forest(&forest, &path).unwrap();
        let loaded = load_forest(&path).unwrap();
        assert_eq!(loaded.manifest(), forest.manifest());
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..5 {
                    let p = NodePath::leaf(i, j, k);
                    assert_eq!(loaded.node(&p).unwrap(), forest.node(&p).unwrap());
                }
            }
        }
        forest.set_built_at(Some(5));
        assert_eq!(forest.digest(), loaded.digest());
    }

    #[test]
    fn streaming_build_matches_in_memory_save() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let config = ForestConfig::new(2, 2, 3, 4);
        let forest = build_forest(&m, config).unwrap();
        save_forest(&forest, &dir.path().join("a")).unwrap();
        let manifest = build_forest_to_dir(&m, config, &dir.path().join("b"), Some(123)).unwrap();
        assert_eq!(manifest.digest, forest.digest());
        for d in 1..=3 {
            let name = node_file_name(d);
            assert_eq!(
                fs::read(dir.path().join("a").join(&name)).unwrap(),
                fs::read(dir.path().join("b").join(&name)).unwrap()
            );
        }
        assert_eq!(read_manifest(&dir.path().join("b")).unwrap().built_at, Some(123));
    }

    #[test]
    fn flipped_byte_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("forest");
        save_forest(&build_forest(&model(), ForestConfig::new(2, 2, 2, 1)).unwrap(), &path).unwrap();
        for d in 1..=3 {
            let file = path.join(node_file_name(d));
            let original = fs::read(&file).unwrap();
            let mut bytes = original.clone();
            let at = bytes.len() / 2;
            bytes[at] ^= 0x01;
            fs::write(&file, &bytes).unwrap();
            assert!(
                matches!(load_forest(&path), Err(ForestError::CorruptIndex(_))),
                "depth {d}"
            );
            if d == 3 {
                assert!(matches!(
                    load_forest_with(&path, LoadOptions { lazy_leaves: true }),
                    Err(ForestError::CorruptIndex(_))
                ));
            }
            fs::write(&file, &original).unwrap();
        }
        load_forest(&path).unwrap();
    }

    #[test]
    fn version_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("forest");
        save_forest(&build_forest(&model(), ForestConfig::new(1, 1, 1, 1)).unwrap(), &path).unwrap();
        let manifest_path = path.join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest_path).unwrap();
        fs::write(
            &manifest_path,
            text.replace("\"format_version\": 1", "\"format_version\": 2"),
        )
        .unwrap();
        assert!(matches!(
            load_forest(&path),
            Err(ForestError::VersionMismatch { found: 2, expected: 1 })
        ));
    }

    #[test]
    fn lazy_and_eager_answer_identically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("forest");
        let mut forest = build_forest(&model(), ForestConfig::new(5, 5, 5, 8)).unwrap();
        forest.index_features().unwrap();
        save_forest(&forest, &path).unwrap();
        let eager = load_forest(&path).unwrap();
        let lazy = load_forest_with(&path, LoadOptions { lazy_leaves: true }).unwrap();
        assert!(lazy.is_lazy() && !eager.is_lazy());
        assert_eq!(eager.depth_features(3), lazy.depth_features(3));
        for (i, j) in [(0, 0), (4, 4), (2, 3)] {
            let a = eager.children(&NodePath(vec![i, j])).unwrap();
            let b = lazy.children(&NodePath(vec![i, j])).unwrap();
            assert_eq!(a, b);
            assert_eq!(eager.phrase_at(i, j, 2).unwrap(), lazy.phrase_at(i, j, 2).unwrap());
        }
        // re-saving a lazy forest reproduces the files
        save_forest(&lazy, &dir.path().join("copy")).unwrap();
        assert_eq!(
            fs::read(path.join(node_file_name(3))).unwrap(),
            fs::read(dir.path().join("copy").join(node_file_name(3))).unwrap()
        );
    }
}
