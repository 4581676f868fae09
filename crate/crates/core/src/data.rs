//! Samples, sample sets, the face-body graph and train/gallery/query splits.
//!
//! Samples are exchanged as JSON lines:
//!
//! ```text
//! {"id":"b00-f0003-0-face","book":"b00","frame":3,"part":"face","emb":[0.1,0.2],"identity":"b00-c1"}
//! ```
//!
//! and graph pairs as `{"face":"<id>","body":"<id>"}`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FsacError, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Face,
    Body,
}

impl Part {
    pub fn as_str(self) -> &'static str {
        match self {
            Part::Face => "face",
            Part::Body => "body",
        }
    }
}

impl fmt::Display for Part {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One character appearance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub book: String,
    /// Position of the frame in the book's reading order.
    pub frame: u64,
    pub part: Part,
    #[serde(rename = "emb")]
    pub embedding: Vec<f64>,
    /// Ground truth, used only by evaluation and the generator.
    pub identity: Option<String>,
}

impl Sample {
    pub fn same_frame(&self, other: &Sample) -> bool {
        self.book == other.book && self.frame == other.frame
    }
}

// Wire form: frame is read signed so negative values get a proper diagnostic.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    id: String,
    book: String,
    frame: i64,
    part: Part,
    emb: Vec<f64>,
    #[serde(default)]
    identity: Option<String>,
}

/// Samples of one part sharing one embedding dimension, kept in reading order
/// (book, then frame, then input order).
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    part: Part,
    dim: usize,
    samples: Vec<Sample>,
    index: HashMap<String, usize>,
}

impl SampleSet {
    pub fn new(part: Part, mut samples: Vec<Sample>) -> Result<Self> {
        let dim = samples.first().ok_or(FsacError::EmptyDataset)?.embedding.len();
        Self::check(part, dim, &samples)?;
        samples.sort_by(|a, b| a.book.cmp(&b.book).then(a.frame.cmp(&b.frame)));
        let index = samples
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.clone(), i))
            .collect();
        Ok(Self {
            part,
            dim,
            samples,
            index,
        })
    }

    /// A set with no samples, used for empty gallery or query sides.
    pub fn empty(part: Part, dim: usize) -> Self {
        Self {
            part,
            dim,
            samples: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn check(part: Part, dim: usize, samples: &[Sample]) -> Result<()> {
        let mut seen = HashSet::with_capacity(samples.len());
        for s in samples {
            if s.part != part {
                return Err(FsacError::invalid(
                    "part",
                    format!("sample `{}` is {} in a {} set", s.id, s.part, part),
                ));
            }
            if s.embedding.len() != dim {
                return Err(FsacError::DimensionMismatch {
                    expected: dim,
                    found: s.embedding.len(),
                    context: Some(format!("sample `{}`", s.id)),
                });
            }
            if !seen.insert(s.id.as_str()) {
                return Err(FsacError::DuplicateId(s.id.clone()));
            }
        }
        Ok(())
    }

    pub fn part(&self) -> Part {
        self.part
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn get(&self, i: usize) -> &Sample {
        &self.samples[i]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn by_id(&self, id: &str) -> Option<&Sample> {
        self.position(id).map(|i| &self.samples[i])
    }

    pub fn embeddings(&self) -> Matrix {
        let mut m = Matrix::zeros(self.len(), self.dim);
        for (i, s) in self.samples.iter().enumerate() {
            m.row_mut(i).copy_from_slice(&s.embedding);
        }
        m
    }

    pub fn has_truth(&self) -> bool {
        !self.samples.is_empty() && self.samples.iter().all(|s| s.identity.is_some())
    }

    /// Subset by position; reading order is preserved.
    pub fn select(&self, positions: &[usize]) -> SampleSet {
        let mut pos = positions.to_vec();
        pos.sort_unstable();
        let samples: Vec<Sample> = pos.iter().map(|&i| self.samples[i].clone()).collect();
        let index = samples
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.clone(), i))
            .collect();
        SampleSet {
            part: self.part,
            dim: self.dim,
            samples,
            index,
        }
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| FsacError::io(path, e))?;
        let mut w = BufWriter::new(file);
        for s in &self.samples {
            serde_json::to_writer(&mut w, s)?;
            w.write_all(b"\n").map_err(|e| FsacError::io(path, e))?;
        }
        w.flush().map_err(|e| FsacError::io(path, e))
    }
}

/// Reads a JSONL sample file. The dimension is taken from the first record.
pub fn load_samples(path: &Path, part: Part) -> Result<SampleSet> {
    let file = File::open(path).map_err(|e| FsacError::io(path, e))?;
    let reader = BufReader::new(file);
    let parse_err = |line: usize, msg: String| FsacError::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };

    let mut samples = Vec::new();
    let mut seen = HashSet::new();
    let mut dim = None;
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| FsacError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
        if rec.frame < 0 {
            return Err(parse_err(lineno, format!("negative frame index {}", rec.frame)));
        }
        if rec.part != part {
            return Err(parse_err(
                lineno,
                format!("expected part {part}, found {}", rec.part),
            ));
        }
        let d = *dim.get_or_insert(rec.emb.len());
        if rec.emb.len() != d {
            return Err(parse_err(
                lineno,
                format!("dimension mismatch: expected {d}, found {}", rec.emb.len()),
            ));
        }
        if !seen.insert(rec.id.clone()) {
            return Err(parse_err(lineno, format!("duplicate sample id `{}`", rec.id)));
        }
        samples.push(Sample {
            id: rec.id,
            book: rec.book,
            frame: rec.frame as u64,
            part: rec.part,
            embedding: rec.emb,
            identity: rec.identity,
        });
    }
    if samples.is_empty() {
        return Err(FsacError::EmptyDataset);
    }
    SampleSet::new(part, samples)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphPair {
    pub face: String,
    pub body: String,
}

/// Pairs of face and body samples of one character in one frame.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FaceBodyGraph {
    pub pairs: Vec<GraphPair>,
}

impl FaceBodyGraph {
    pub fn new(pairs: Vec<GraphPair>) -> Self {
        Self { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| FsacError::io(path, e))?;
        let mut pairs = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| FsacError::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let pair: GraphPair = serde_json::from_str(&line).map_err(|e| FsacError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })?;
            pairs.push(pair);
        }
        Ok(Self { pairs })
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| FsacError::io(path, e))?;
        let mut w = BufWriter::new(file);
        for p in &self.pairs {
            serde_json::to_writer(&mut w, p)?;
            w.write_all(b"\n").map_err(|e| FsacError::io(path, e))?;
        }
        w.flush().map_err(|e| FsacError::io(path, e))
    }

    /// Keeps only pairs whose endpoints are both present in the given sets.
    pub fn restrict(&self, faces: &SampleSet, bodies: &SampleSet) -> FaceBodyGraph {
        FaceBodyGraph {
            pairs: self
                .pairs
                .iter()
                .filter(|p| faces.position(&p.face).is_some() && bodies.position(&p.body).is_some())
                .cloned()
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    Dangling { pair: usize, id: String },
    PartMismatch { pair: usize, id: String, expected: Part },
    FrameMismatch { pair: usize, face_frame: u64, body_frame: u64 },
    BookMismatch { pair: usize, face_book: String, body_book: String },
    Reused { pair: usize, id: String },
}

impl Violation {
    pub fn kind(&self) -> &'static str {
        match self {
            Violation::Dangling { .. } => "dangling",
            Violation::PartMismatch { .. } => "part mismatch",
            Violation::FrameMismatch { .. } => "frame mismatch",
            Violation::BookMismatch { .. } => "book mismatch",
            Violation::Reused { .. } => "reused",
        }
    }
}

/// Lists every structural problem in `graph`; an empty list means it is valid.
pub fn validate_graph(graph: &FaceBodyGraph, faces: &SampleSet, bodies: &SampleSet) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut used_faces = HashSet::new();
    let mut used_bodies = HashSet::new();

    let lookup = |id: &str, own: &SampleSet, other: &SampleSet, pair: usize, out: &mut Vec<Violation>| {
        match own.by_id(id) {
            Some(s) => Some(s.clone()),
            None => {
                if other.by_id(id).is_some() {
                    out.push(Violation::PartMismatch {
                        pair,
                        id: id.to_string(),
                        expected: own.part(),
                    });
                } else {
                    out.push(Violation::Dangling {
                        pair,
                        id: id.to_string(),
                    });
                }
                None
            }
        }
    };

    for (i, p) in graph.pairs.iter().enumerate() {
        if !used_faces.insert(p.face.as_str()) {
            out.push(Violation::Reused { pair: i, id: p.face.clone() });
        }
        if !used_bodies.insert(p.body.as_str()) {
            out.push(Violation::Reused { pair: i, id: p.body.clone() });
        }
        let f = lookup(&p.face, faces, bodies, i, &mut out);
        let b = lookup(&p.body, bodies, faces, i, &mut out);
        if let (Some(f), Some(b)) = (f, b) {
            if f.book != b.book {
                out.push(Violation::BookMismatch {
                    pair: i,
                    face_book: f.book.clone(),
                    body_book: b.book.clone(),
                });
            } else if f.frame != b.frame {
                out.push(Violation::FrameMismatch {
                    pair: i,
                    face_frame: f.frame,
                    body_frame: b.frame,
                });
            }
        }
    }
    out
}

/// Positional view of a graph over two sets; invalid pairs are dropped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairIndex {
    pub face_to_body: Vec<Option<usize>>,
    pub body_to_face: Vec<Option<usize>>,
}

impl PairIndex {
    pub fn build(graph: &FaceBodyGraph, faces: &SampleSet, bodies: &SampleSet) -> Self {
        let mut face_to_body = vec![None; faces.len()];
        let mut body_to_face = vec![None; bodies.len()];
        for p in &graph.pairs {
            let (Some(fi), Some(bi)) = (faces.position(&p.face), bodies.position(&p.body)) else {
                continue;
            };
            if face_to_body[fi].is_some() || body_to_face[bi].is_some() {
                continue;
            }
            if !faces.get(fi).same_frame(bodies.get(bi)) {
                continue;
            }
            face_to_body[fi] = Some(bi);
            body_to_face[bi] = Some(fi);
        }
        Self {
            face_to_body,
            body_to_face,
        }
    }

    pub fn n_pairs(&self) -> usize {
        self.face_to_body.iter().flatten().count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: SampleSet,
    pub gallery: SampleSet,
    pub query: SampleSet,
}

fn check_ratio(gallery_ratio: f64) -> Result<()> {
    if !(gallery_ratio > 0.0 && gallery_ratio < 1.0) {
        return Err(FsacError::invalid("gallery_ratio", "must lie strictly between 0 and 1"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Train,
    Gallery,
    Query,
}

fn assign_roles(samples: &SampleSet, gallery_ratio: f64, seed: u64) -> Result<Vec<Role>> {
    check_ratio(gallery_ratio)?;
    if !samples.samples().iter().any(|s| s.identity.is_some()) {
        return Err(FsacError::MissingTruth);
    }
    let mut by_identity: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.samples().iter().enumerate() {
        if let Some(id) = &s.identity {
            by_identity.entry(id.as_str()).or_default().push(i);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut roles = vec![Role::Train; samples.len()];
    for members in by_identity.values_mut() {
        members.shuffle(&mut rng);
        let n_eval = (members.len() as f64 * gallery_ratio).round() as usize;
        // a query needs at least one gallery item left behind
        if n_eval < 2 {
            continue;
        }
        roles[members[0]] = Role::Query;
        for &m in &members[1..n_eval] {
            roles[m] = Role::Gallery;
        }
    }
    Ok(roles)
}

fn split_by_roles(samples: &SampleSet, roles: &[Role]) -> DatasetSplit {
    let pick = |want: Role| -> Vec<usize> {
        roles
            .iter()
            .enumerate()
            .filter(|(_, r)| **r == want)
            .map(|(i, _)| i)
            .collect()
    };
    DatasetSplit {
        train: samples.select(&pick(Role::Train)),
        gallery: samples.select(&pick(Role::Gallery)),
        query: samples.select(&pick(Role::Query)),
    }
}

/// Per identity, about `gallery_ratio` of the appearances are held out for
/// evaluation and one of those becomes the query. Identities that would end up
/// with fewer than two held-out appearances stay entirely in train. Samples
/// without ground truth always go to train.
pub fn split_dataset(samples: &SampleSet, gallery_ratio: f64, seed: u64) -> Result<DatasetSplit> {
    let roles = assign_roles(samples, gallery_ratio, seed)?;
    Ok(split_by_roles(samples, &roles))
}

/// Splits faces with [`split_dataset`] and sends each paired body sample to the
/// same side as its face, so train faces and train bodies stay paired.
/// Unpaired bodies go to train.
pub fn split_paired(
    faces: &SampleSet,
    bodies: &SampleSet,
    graph: &FaceBodyGraph,
    gallery_ratio: f64,
    seed: u64,
) -> Result<(DatasetSplit, DatasetSplit)> {
    let face_roles = assign_roles(faces, gallery_ratio, seed)?;
    let pairs = PairIndex::build(graph, faces, bodies);
    let mut body_roles = vec![Role::Train; bodies.len()];
    for (bi, f) in pairs.body_to_face.iter().enumerate() {
        if let Some(fi) = f {
            body_roles[bi] = face_roles[*fi];
        }
    }
    Ok((
        split_by_roles(faces, &face_roles),
        split_by_roles(bodies, &body_roles),
    ))
}
