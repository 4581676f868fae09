//! Brute-force reference implementations shared by the integration tests.
//! Each one follows the textbook definition directly and shares no code with
//! the library beyond plain data types.

#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};

use fsac_core::data::{Part, Sample, SampleSet};
use fsac_core::Matrix;

pub fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn sq_euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Canonical form of a labelling: every label is replaced by the first index
/// that carries it, so two labellings are the same partition iff their
/// canonical forms are equal.
pub fn canonical(labels: &[Option<usize>]) -> Vec<Option<usize>> {
    let mut first: HashMap<usize, usize> = HashMap::new();
    labels
        .iter()
        .enumerate()
        .map(|(i, l)| l.map(|l| *first.entry(l).or_insert(i)))
        .collect()
}

// ---------------------------------------------------------------- DBSCAN

pub struct DensityOracle {
    pub core: Vec<bool>,
    /// Cluster per point: connected components of the core graph, borders
    /// attached to the adjacent component whose lowest core index is smallest.
    pub labels: Vec<Option<usize>>,
}

/// Density reachability by exhaustive pairwise checks and a transitive
/// closure over core points.
pub fn dbscan_oracle(points: &[Vec<f64>], eps: f64, min_pts: usize) -> DensityOracle {
    let n = points.len();
    let near = |i: usize, j: usize| sq_euclid(&points[i], &points[j]) <= eps * eps;
    let core: Vec<bool> = (0..n).map(|i| (0..n).filter(|&j| near(i, j)).count() >= min_pts).collect();

    // component id = smallest core index reachable through core-core links
    let mut comp: Vec<Option<usize>> = (0..n).map(|i| core[i].then_some(i)).collect();
    loop {
        let mut changed = false;
        for i in 0..n {
            for j in 0..n {
                if core[i] && core[j] && near(i, j) && comp[j] < comp[i] {
                    comp[i] = comp[j];
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let labels = (0..n)
        .map(|i| {
            if core[i] {
                comp[i]
            } else {
                (0..n).filter(|&j| core[j] && near(i, j)).filter_map(|j| comp[j]).min()
            }
        })
        .collect();
    DensityOracle { core, labels }
}

// ------------------------------------------------------------- retrieval

/// Rank of gallery item `g` (1-based) with ties broken by gallery index.
fn rank_of(dist: &[f64], g: usize) -> usize {
    1 + (0..dist.len())
        .filter(|&h| dist[h] < dist[g] || (dist[h] == dist[g] && h < g))
        .count()
}

/// Average precision from the definition: the mean, over relevant items, of
/// the share of relevant items ranked at or above it.
pub fn ap_oracle(dist: &[f64], relevant: &[bool]) -> Option<f64> {
    let ranks: Vec<usize> = (0..dist.len()).filter(|&g| relevant[g]).map(|g| rank_of(dist, g)).collect();
    if ranks.is_empty() {
        return None;
    }
    let sum: f64 = ranks
        .iter()
        .map(|&r| ranks.iter().filter(|&&o| o <= r).count() as f64 / r as f64)
        .sum();
    Some(sum / ranks.len() as f64)
}

/// 1-based rank of the best relevant item.
pub fn first_hit_oracle(dist: &[f64], relevant: &[bool]) -> Option<usize> {
    (0..dist.len()).filter(|&g| relevant[g]).map(|g| rank_of(dist, g)).min()
}

pub struct RetrievalOracle {
    pub map: f64,
    pub cmc: BTreeMap<usize, f64>,
    pub n_queries: usize,
    pub n_rejected: usize,
}

pub fn retrieval_oracle(
    query: &[Vec<f64>],
    query_ids: &[usize],
    gallery: &[Vec<f64>],
    gallery_ids: &[usize],
    ks: &[usize],
) -> Option<RetrievalOracle> {
    let mut aps = Vec::new();
    let mut firsts = Vec::new();
    let mut rejected = 0;
    for (q, &qid) in query.iter().zip(query_ids) {
        let dist: Vec<f64> = gallery.iter().map(|g| sq_euclid(q, g)).collect();
        let relevant: Vec<bool> = gallery_ids.iter().map(|&g| g == qid).collect();
        match (ap_oracle(&dist, &relevant), first_hit_oracle(&dist, &relevant)) {
            (Some(ap), Some(f)) => {
                aps.push(ap);
                firsts.push(f);
            }
            _ => rejected += 1,
        }
    }
    if aps.is_empty() {
        return None;
    }
    let n = aps.len() as f64;
    Some(RetrievalOracle {
        map: aps.iter().sum::<f64>() / n,
        cmc: ks
            .iter()
            .map(|&k| (k, firsts.iter().filter(|&&f| f <= k).count() as f64 / n))
            .collect(),
        n_queries: aps.len(),
        n_rejected: rejected,
    })
}

// ---------------------------------------------------------------- mining

#[derive(Debug, Clone, Copy)]
pub struct Pos {
    pub book: u32,
    pub frame: u64,
}

/// Frame-gap term capped at sigma plus the same-frame penalty; other books
/// sit at sigma.
pub fn st_oracle(a: Pos, b: Pos, sigma: f64, eta: f64) -> f64 {
    if a.book != b.book {
        return sigma;
    }
    let gap = a.frame.abs_diff(b.frame);
    let capped = if (gap as f64) < sigma { gap as f64 } else { sigma };
    capped + if gap == 0 { eta } else { 0.0 }
}

/// Scores every candidate for anchor `i`: positives by feature plus st
/// distance, negatives by the same (`frame_aware == false`) or with the
/// same-frame penalty subtracted.
pub fn mining_scores(
    features: &Matrix,
    pos: &[Pos],
    labels: &[Option<usize>],
    i: usize,
    sigma: f64,
    eta: f64,
    frame_aware: bool,
) -> (Vec<(usize, f64)>, Vec<(usize, f64)>) {
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    let Some(li) = labels[i] else { return (positives, negatives) };
    for j in 0..features.rows() {
        let Some(lj) = labels[j] else { continue };
        if j == i {
            continue;
        }
        let feat = euclid(features.row(i), features.row(j));
        let st = st_oracle(pos[i], pos[j], sigma, eta);
        if lj == li {
            positives.push((j, feat + st));
        } else {
            let same_frame = pos[i].book == pos[j].book && pos[i].frame == pos[j].frame;
            let score = if frame_aware && same_frame { feat + st - 2.0 * eta } else { feat + st };
            negatives.push((j, score));
        }
    }
    (positives, negatives)
}

pub fn min_score(c: &[(usize, f64)]) -> Option<f64> {
    c.iter().map(|&(_, s)| s).min_by(f64::total_cmp)
}

pub fn score_of(c: &[(usize, f64)], j: usize) -> Option<f64> {
    c.iter().find(|&&(k, _)| k == j).map(|&(_, s)| s)
}

// -------------------------------------------------------- world statistics

/// Share of appearances whose identity appears again in the same book within
/// `k` frames, by checking every other appearance.
pub fn temporal_oracle(samples: &SampleSet, k: u64) -> f64 {
    let s = samples.samples();
    let hits = (0..s.len())
        .filter(|&i| {
            (0..s.len()).any(|j| {
                j != i && s[j].book == s[i].book && s[j].identity == s[i].identity && s[i].frame.abs_diff(s[j].frame) <= k
            })
        })
        .count();
    hits as f64 / s.len() as f64
}

/// (multi-appearance frames, frames that repeat an identity).
pub fn multi_frame_oracle(samples: &SampleSet) -> (usize, usize) {
    let mut frames: BTreeMap<(&str, u64), Vec<&str>> = BTreeMap::new();
    for s in samples.samples() {
        frames
            .entry((s.book.as_str(), s.frame))
            .or_default()
            .push(s.identity.as_deref().unwrap());
    }
    let mut multi = 0;
    let mut repeated = 0;
    for ids in frames.values() {
        if ids.len() > 1 {
            multi += 1;
            let distinct: std::collections::BTreeSet<_> = ids.iter().collect();
            if distinct.len() < ids.len() {
                repeated += 1;
            }
        }
    }
    (multi, repeated)
}

// ----------------------------------------------------------------- misc

pub fn sample(id: &str, book: &str, frame: u64, emb: Vec<f64>, identity: &str) -> Sample {
    Sample {
        id: id.into(),
        book: book.into(),
        frame,
        part: Part::Face,
        embedding: emb,
        identity: Some(identity.into()),
    }
}

/// Rotation built from two Householder reflections.
pub fn rotation(u: &[f64], v: &[f64]) -> Matrix {
    let d = u.len();
    let reflect = |w: &[f64]| {
        let n2: f64 = w.iter().map(|x| x * x).sum();
        let mut m = Matrix::zeros(d, d);
        for r in 0..d {
            for c in 0..d {
                m[(r, c)] = f64::from(u8::from(r == c)) - 2.0 * w[r] * w[c] / n2;
            }
        }
        m
    };
    let (a, b) = (reflect(u), reflect(v));
    let mut out = Matrix::zeros(d, d);
    for r in 0..d {
        for c in 0..d {
            out[(r, c)] = (0..d).map(|k| a[(r, k)] * b[(k, c)]).sum();
        }
    }
    out
}

pub fn rotate_rows(m: &Matrix, q: &Matrix) -> Matrix {
    let rows: Vec<Vec<f64>> = m.iter_rows().map(|r| q.mul_vec(r)).collect();
    Matrix::from_rows(&rows).unwrap()
}

// ------------------------------------------------------------- gradients

use fsac_core::stmetric::Triplet;
use fsac_core::trainer::{batch_loss, Classifier, EmbeddingHead, LossBatch, LossWeights};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub struct GradCase {
    pub head: EmbeddingHead,
    pub classifier: Classifier,
    pub inputs: Matrix,
    pub labels: Vec<Option<usize>>,
    pub triplets: Vec<Option<Triplet>>,
    pub margin: f64,
    pub weights: LossWeights,
}

impl GradCase {
    pub fn batch(&self) -> LossBatch<'_> {
        LossBatch {
            inputs: &self.inputs,
            labels: &self.labels,
            triplets: &self.triplets,
        }
    }

    pub fn loss(&self, head: &EmbeddingHead, classifier: &Classifier) -> f64 {
        batch_loss(head, classifier, self.batch(), self.margin, self.weights).unwrap().total
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn gaussian(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| scale * normal(rng)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// A random batch with `D_in <= 8` and at most 16 samples, valid triplets
/// drawn uniformly among same-label and different-label members.
pub fn random_grad_case(seed: u64) -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d_in = rng.random_range(2..=8);
    let d_out = rng.random_range(2..=d_in);
    let b = rng.random_range(2..=16);
    let n_classes = rng.random_range(2..=4);
    let labels: Vec<Option<usize>> = (0..b)
        .map(|_| (rng.random::<f64>() > 0.15).then(|| rng.random_range(0..n_classes)))
        .collect();
    let triplets = (0..b)
        .map(|i| {
            let li = labels[i]?;
            let same: Vec<usize> = (0..b).filter(|&j| j != i && labels[j] == Some(li)).collect();
            let diff: Vec<usize> = (0..b).filter(|&j| labels[j].is_some_and(|l| l != li)).collect();
            if same.is_empty() || diff.is_empty() {
                return None;
            }
            Some(Triplet {
                positive: same[rng.random_range(0..same.len())],
                negative: diff[rng.random_range(0..diff.len())],
            })
        })
        .collect();
    GradCase {
        head: EmbeddingHead {
            weight: gaussian(d_out, d_in, 1.0, &mut rng),
            bias: (0..d_out).map(|_| 0.3 * normal(&mut rng)).collect(),
        },
        classifier: Classifier {
            weight: gaussian(n_classes, d_out, 2.0, &mut rng),
        },
        inputs: gaussian(b, d_in, 1.0, &mut rng),
        labels,
        triplets,
        margin: rng.random_range(0.1..1.5),
        weights: LossWeights {
            id: rng.random_range(0.2..2.0),
            triplet: rng.random_range(0.2..2.0),
        },
    }
}

/// Central differences over every parameter, in the order weight, bias,
/// classifier.
pub fn numeric_gradient(case: &GradCase, h: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let n_w = case.head.weight.as_slice().len();
    let n_b = case.head.bias.len();
    let n_c = case.classifier.weight.as_slice().len();
    for k in 0..n_w + n_b + n_c {
        let eval = |delta: f64| {
            let mut head = case.head.clone();
            let mut cls = case.classifier.clone();
            if k < n_w {
                head.weight.as_mut_slice()[k] += delta;
            } else if k < n_w + n_b {
                head.bias[k - n_w] += delta;
            } else {
                cls.weight.as_mut_slice()[k - n_w - n_b] += delta;
            }
            case.loss(&head, &cls)
        };
        out.push((eval(h) - eval(-h)) / (2.0 * h));
    }
    out
}

/// `|a - n| / max(|a|, |n|)` over the flattened gradient.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}
