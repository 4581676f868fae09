//! Synthetic manga worlds: books of frames in which characters appear with
//! tunable temporal persistence and same-frame co-occurrence, each appearance
//! emitting a paired face and body embedding with ground truth attached.
//!
//! The frame process and the embedding noise draw from separate streams of
//! the same seed, so [`calibrate`] can evaluate statistics without paying for
//! embeddings and still see exactly the world [`generate_world`] builds.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{FaceBodyGraph, GraphPair, Part, Sample, SampleSet};
use crate::error::{FsacError, Result};
use crate::matrix::{axpy, normalize_in_place};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub n_books: usize,
    pub frames_per_book: usize,
    pub characters_per_book: usize,
    /// Chance that a character on screen is still on screen in the next frame.
    pub persist_prob: f64,
    pub multi_char_frame_prob: f64,
    /// Chance that a multi-character frame shows one character twice.
    pub repeat_in_frame_prob: f64,
    /// Norm of the additive per-(book, part) style vector.
    pub style_shift_scale: f64,
    pub noise_scale: f64,
    pub exaggeration_prob: f64,
    /// Per-direction std of an exaggeration.
    pub exaggeration_scale: f64,
    /// Exaggerations move along this many directions shared by every
    /// character of a part (expressions, poses); 0 means all directions.
    pub exaggeration_rank: usize,
    pub dim_face: usize,
    pub dim_body: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_books: 10,
            frames_per_book: 340,
            characters_per_book: 5,
            persist_prob: 0.3,
            multi_char_frame_prob: 0.4,
            repeat_in_frame_prob: 0.03,
            style_shift_scale: 0.8,
            noise_scale: 0.08,
            exaggeration_prob: 0.45,
            exaggeration_scale: 1.0,
            exaggeration_rank: 3,
            dim_face: 32,
            dim_body: 32,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("persist_prob", self.persist_prob),
            ("multi_char_frame_prob", self.multi_char_frame_prob),
            ("repeat_in_frame_prob", self.repeat_in_frame_prob),
            ("exaggeration_prob", self.exaggeration_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(FsacError::invalid(name, format!("must lie in [0, 1], got {p}")));
            }
        }
        for (name, s) in [
            ("style_shift_scale", self.style_shift_scale),
            ("noise_scale", self.noise_scale),
            ("exaggeration_scale", self.exaggeration_scale),
        ] {
            if !(s.is_finite() && s >= 0.0) {
                return Err(FsacError::invalid(name, format!("must be finite and >= 0, got {s}")));
            }
        }
        for (name, d) in [("dim_face", self.dim_face), ("dim_body", self.dim_body)] {
            if d < 2 {
                return Err(FsacError::invalid(name, "must be >= 2"));
            }
        }
        for (name, n) in [
            ("n_books", self.n_books),
            ("frames_per_book", self.frames_per_book),
            ("characters_per_book", self.characters_per_book),
        ] {
            if n == 0 {
                return Err(FsacError::invalid(name, "must be >= 1"));
            }
        }
        if self.exaggeration_rank > self.dim_face.min(self.dim_body) {
            return Err(FsacError::invalid("exaggeration_rank", "cannot exceed the embedding dimension"));
        }
        if self.characters_per_book < 2 && self.multi_char_frame_prob > 0.0 {
            return Err(FsacError::invalid(
                "characters_per_book",
                "multi-character frames need at least 2 characters per book",
            ));
        }
        Ok(())
    }
}

/// One character appearance in the frame process.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Appearance {
    pub book: usize,
    pub frame: usize,
    pub character: usize,
}

const EMBEDDING_STREAM: u64 = 1;

fn pick_distinct(pool: &[usize], rng: &mut ChaCha8Rng) -> usize {
    pool[rng.random_range(0..pool.len())]
}

/// Runs the per-book frame process and returns appearances in reading order.
pub fn simulate_appearances(cfg: &WorldConfig) -> Result<Vec<Appearance>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_chars = cfg.characters_per_book;
    let mut out = Vec::new();

    for book in 0..cfg.n_books {
        let mut previous: Vec<usize> = Vec::new();
        for frame in 0..cfg.frames_per_book {
            let multi = n_chars >= 2 && rng.random::<f64>() < cfg.multi_char_frame_prob;
            let slots = if !multi {
                1
            } else if n_chars >= 3 && rng.random::<f64>() < 0.3 {
                3
            } else {
                2
            };
            let repeated = multi && rng.random::<f64>() < cfg.repeat_in_frame_prob;
            let distinct = if repeated { slots - 1 } else { slots };

            let mut chosen: Vec<usize> = Vec::with_capacity(slots);
            previous.shuffle(&mut rng);
            for &c in &previous {
                if chosen.len() < distinct && rng.random::<f64>() < cfg.persist_prob {
                    chosen.push(c);
                }
            }
            while chosen.len() < distinct {
                let pool: Vec<usize> = (0..n_chars).filter(|c| !chosen.contains(c)).collect();
                chosen.push(pick_distinct(&pool, &mut rng));
            }
            let mut appearances = chosen.clone();
            if repeated {
                appearances.push(chosen[rng.random_range(0..chosen.len())]);
            }
            for character in appearances {
                out.push(Appearance { book, frame, character });
            }
            previous = chosen;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub faces: SampleSet,
    pub bodies: SampleSet,
    pub graph: FaceBodyGraph,
}

fn random_unit(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        if normalize_in_place(&mut v).is_some() {
            return v;
        }
    }
}

fn emit(
    prototype: &[f64],
    style: &[f64],
    expression_basis: &[Vec<f64>],
    cfg: &WorldConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let mut v: Vec<f64> = prototype.iter().zip(style).map(|(p, s)| p + s).collect();
    if cfg.noise_scale > 0.0 {
        for x in v.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *x += cfg.noise_scale * z;
        }
    }
    if cfg.exaggeration_prob > 0.0 && rng.random::<f64>() < cfg.exaggeration_prob {
        if expression_basis.is_empty() {
            for x in v.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *x += cfg.exaggeration_scale * z;
            }
        } else {
            for u in expression_basis {
                let z: f64 = StandardNormal.sample(rng);
                axpy(cfg.exaggeration_scale * z, u, &mut v);
            }
        }
    }
    if normalize_in_place(&mut v).is_none() {
        // measure-zero event; fall back to the clean prototype
        v = prototype.to_vec();
    }
    v
}

pub fn book_id(book: usize) -> String {
    format!("b{book:02}")
}

pub fn character_id(book: usize, character: usize) -> String {
    format!("b{book:02}-c{character:02}")
}

/// Builds a full world: the frame process, one face and one body prototype per
/// character, a style vector per (book, part), and a face/body embedding per
/// appearance. Every face is paired with the body of the same appearance.
pub fn generate_world(cfg: &WorldConfig) -> Result<World> {
    let appearances = simulate_appearances(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(EMBEDDING_STREAM);

    let rank = cfg.exaggeration_rank;
    let face_expr: Vec<Vec<f64>> = (0..rank).map(|_| random_unit(cfg.dim_face, &mut rng)).collect();
    let body_expr: Vec<Vec<f64>> = (0..rank).map(|_| random_unit(cfg.dim_body, &mut rng)).collect();
    let n_chars = cfg.characters_per_book;
    let mut face_protos = Vec::with_capacity(cfg.n_books);
    let mut body_protos = Vec::with_capacity(cfg.n_books);
    let mut face_style = Vec::with_capacity(cfg.n_books);
    let mut body_style = Vec::with_capacity(cfg.n_books);
    for _ in 0..cfg.n_books {
        face_protos.push((0..n_chars).map(|_| random_unit(cfg.dim_face, &mut rng)).collect::<Vec<_>>());
        body_protos.push((0..n_chars).map(|_| random_unit(cfg.dim_body, &mut rng)).collect::<Vec<_>>());
        let mut fs = random_unit(cfg.dim_face, &mut rng);
        fs.iter_mut().for_each(|x| *x *= cfg.style_shift_scale);
        let mut bs = random_unit(cfg.dim_body, &mut rng);
        bs.iter_mut().for_each(|x| *x *= cfg.style_shift_scale);
        face_style.push(fs);
        body_style.push(bs);
    }

    let mut faces = Vec::with_capacity(appearances.len());
    let mut bodies = Vec::with_capacity(appearances.len());
    let mut pairs = Vec::with_capacity(appearances.len());
    let mut slot_in_frame: HashMap<(usize, usize), usize> = HashMap::new();
    for a in &appearances {
        let slot = slot_in_frame.entry((a.book, a.frame)).or_insert(0);
        let base = format!("b{:02}-f{:04}-{}", a.book, a.frame, slot);
        *slot += 1;
        let identity = Some(character_id(a.book, a.character));
        let face = emit(&face_protos[a.book][a.character], &face_style[a.book], &face_expr, cfg, &mut rng);
        let body = emit(&body_protos[a.book][a.character], &body_style[a.book], &body_expr, cfg, &mut rng);
        faces.push(Sample {
            id: format!("{base}-face"),
            book: book_id(a.book),
            frame: a.frame as u64,
            part: Part::Face,
            embedding: face,
            identity: identity.clone(),
        });
        bodies.push(Sample {
            id: format!("{base}-body"),
            book: book_id(a.book),
            frame: a.frame as u64,
            part: Part::Body,
            embedding: body,
            identity,
        });
        pairs.push(GraphPair {
            face: format!("{base}-face"),
            body: format!("{base}-body"),
        });
    }
    Ok(World {
        faces: SampleSet::new(Part::Face, faces)?,
        bodies: SampleSet::new(Part::Body, bodies)?,
        graph: FaceBodyGraph::new(pairs),
    })
}

/// Share of single-character frames, frames with several distinct
/// characters, and frames where some character appears more than once.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameTypeProportions {
    pub single: f64,
    pub multi_distinct: f64,
    pub repeated: f64,
}

impl FrameTypeProportions {
    /// Fraction of multi-appearance frames that repeat a character.
    pub fn repeated_share_of_multi(&self) -> f64 {
        let multi = self.multi_distinct + self.repeated;
        if multi == 0.0 {
            0.0
        } else {
            self.repeated / multi
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct WorldStats {
    /// Frame window `k` to the share of appearances whose character shows up
    /// again within `k` frames.
    pub temporal: BTreeMap<u32, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_types: Option<FrameTypeProportions>,
}

impl WorldStats {
    /// Appearance statistics of the reference manga corpus.
    pub fn reference() -> Self {
        Self {
            temporal: [(1, 0.7026), (3, 0.9039), (5, 0.9477)].into_iter().collect(),
            frame_types: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.temporal.is_empty() {
            return Err(FsacError::invalid("targets", "no temporal targets given"));
        }
        let mut values: Vec<(String, f64)> =
            self.temporal.iter().map(|(k, v)| (format!("temporal k={k}"), *v)).collect();
        if let Some(f) = &self.frame_types {
            values.push(("single".into(), f.single));
            values.push(("multi_distinct".into(), f.multi_distinct));
            values.push(("repeated".into(), f.repeated));
        }
        for (name, v) in values {
            if !(0.0..=1.0).contains(&v) {
                return Err(FsacError::TargetOutOfRange(format!("{name} = {v}")));
            }
        }
        if self.temporal.contains_key(&0) {
            return Err(FsacError::invalid("targets", "frame window k must be >= 1"));
        }
        Ok(())
    }
}

// (book, frame, identity) keys grouped per book, identities interned.
fn appearance_keys(samples: &SampleSet) -> Result<BTreeMap<&str, Vec<(u64, usize)>>> {
    let mut ids: HashMap<&str, usize> = HashMap::new();
    let mut per_book: BTreeMap<&str, Vec<(u64, usize)>> = BTreeMap::new();
    for s in samples.samples() {
        let ident = s.identity.as_deref().ok_or(FsacError::MissingTruth)?;
        let next = ids.len();
        let id = *ids.entry(ident).or_insert(next);
        per_book.entry(s.book.as_str()).or_default().push((s.frame, id));
    }
    Ok(per_book)
}

fn temporal_share(per_book: &BTreeMap<impl Ord, Vec<(u64, usize)>>, k: u64) -> f64 {
    let mut total = 0usize;
    let mut hits = 0usize;
    for entries in per_book.values() {
        let mut by_identity: HashMap<usize, Vec<u64>> = HashMap::new();
        for &(frame, id) in entries {
            by_identity.entry(id).or_default().push(frame);
        }
        for frames in by_identity.values_mut() {
            frames.sort_unstable();
            total += frames.len();
            for (i, &f) in frames.iter().enumerate() {
                let before = i > 0 && f - frames[i - 1] <= k;
                let after = i + 1 < frames.len() && frames[i + 1] - f <= k;
                if before || after {
                    hits += 1;
                }
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

fn frame_types(per_book: &BTreeMap<impl Ord, Vec<(u64, usize)>>) -> Option<FrameTypeProportions> {
    let mut counts = [0usize; 3];
    for entries in per_book.values() {
        let mut frames: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for &(frame, id) in entries {
            frames.entry(frame).or_default().push(id);
        }
        for ids in frames.values_mut() {
            let n = ids.len();
            ids.sort_unstable();
            ids.dedup();
            let kind = if n == 1 {
                0
            } else if ids.len() == n {
                1
            } else {
                2
            };
            counts[kind] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return None;
    }
    let t = total as f64;
    Some(FrameTypeProportions {
        single: counts[0] as f64 / t,
        multi_distinct: counts[1] as f64 / t,
        repeated: counts[2] as f64 / t,
    })
}

/// Share of appearances whose character appears again (same book, any other
/// appearance) within `k` frames.
pub fn measure_temporal_stats(samples: &SampleSet, k: u32) -> Result<f64> {
    if k < 1 {
        return Err(FsacError::invalid("k", "must be >= 1"));
    }
    Ok(temporal_share(&appearance_keys(samples)?, k as u64))
}

pub fn measure_spatial_stats(samples: &SampleSet) -> Result<FrameTypeProportions> {
    frame_types(&appearance_keys(samples)?).ok_or(FsacError::EmptyDataset)
}

fn per_book_from(appearances: &[Appearance]) -> BTreeMap<usize, Vec<(u64, usize)>> {
    let mut per_book: BTreeMap<usize, Vec<(u64, usize)>> = BTreeMap::new();
    for a in appearances {
        per_book.entry(a.book).or_default().push((a.frame as u64, a.character));
    }
    per_book
}

/// Statistics of the frame process for `cfg`, over the same windows as `like`.
pub fn simulated_stats(cfg: &WorldConfig, like: &WorldStats) -> Result<WorldStats> {
    let per_book = per_book_from(&simulate_appearances(cfg)?);
    Ok(WorldStats {
        temporal: like
            .temporal
            .keys()
            .map(|&k| (k, temporal_share(&per_book, k as u64)))
            .collect(),
        frame_types: frame_types(&per_book),
    })
}

fn deviation(measured: &WorldStats, targets: &WorldStats) -> f64 {
    let mut d: f64 = targets
        .temporal
        .iter()
        .map(|(k, t)| (measured.temporal.get(k).copied().unwrap_or(0.0) - t).powi(2))
        .sum();
    if let (Some(t), Some(m)) = (&targets.frame_types, &measured.frame_types) {
        d += (m.single - t.single).powi(2)
            + (m.multi_distinct - t.multi_distinct).powi(2)
            + (m.repeated - t.repeated).powi(2);
    }
    d
}

/// Coordinate search over `persist_prob` and `multi_char_frame_prob` that
/// minimizes the squared deviation between simulated and target statistics.
/// Only strict improvements are accepted, so a config that already meets the
/// targets comes back unchanged.
pub fn calibrate(cfg: &WorldConfig, targets: &WorldStats, iterations: usize) -> Result<WorldConfig> {
    if iterations < 1 {
        return Err(FsacError::invalid("iterations", "must be >= 1"));
    }
    targets.validate()?;
    cfg.validate()?;

    let tune_multi = cfg.characters_per_book >= 2;
    let mut best = cfg.clone();
    let mut best_dev = deviation(&simulated_stats(&best, targets)?, targets);
    let mut steps = [0.25, 0.25];

    for _ in 0..iterations {
        if best_dev == 0.0 {
            break;
        }
        for coord in 0..2 {
            if coord == 1 && !tune_multi {
                continue;
            }
            let current = if coord == 0 { best.persist_prob } else { best.multi_char_frame_prob };
            let mut improved = false;
            for dir in [1.0, -1.0] {
                let value = (current + dir * steps[coord]).clamp(0.0, 1.0);
                if value == current {
                    continue;
                }
                let mut trial = best.clone();
                if coord == 0 {
                    trial.persist_prob = value;
                } else {
                    trial.multi_char_frame_prob = value;
                }
                let dev = deviation(&simulated_stats(&trial, targets)?, targets);
                if dev < best_dev {
                    best = trial;
                    best_dev = dev;
                    improved = true;
                    break;
                }
            }
            if !improved {
                steps[coord] *= 0.5;
            }
        }
    }
    log::debug!("calibration deviation {best_dev:.3e}");
    Ok(best)
}
