//! Spatial-temporal distance between appearances and the triplet mining that
//! uses it.
//!
//! Within one book the temporal term is the frame gap capped at `sigma`, plus
//! `eta` when both appearances sit in the same frame. Appearances from
//! different books are treated as temporally far (`sigma`) with no penalty.

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{FsacError, Result};
use crate::matrix::{l2_dist, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StParams {
    /// Frame-gap threshold.
    pub sigma: f64,
    /// Same-frame penalty.
    pub eta: f64,
}

impl Default for StParams {
    fn default() -> Self {
        Self {
            sigma: 100.0,
            eta: 1000.0,
        }
    }
}

impl StParams {
    /// Both terms zero: mining falls back to plain feature distance.
    pub const CLASSIC: StParams = StParams { sigma: 0.0, eta: 0.0 };

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("sigma", self.sigma), ("eta", self.eta)] {
            if !v.is_finite() || v < 0.0 {
                return Err(FsacError::invalid(name, format!("must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Book and frame of an appearance, with the book interned to an integer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FramePos {
    pub book: u32,
    pub frame: u64,
}

impl FramePos {
    #[inline]
    fn temporal(self, other: FramePos, sigma: f64) -> (f64, bool) {
        if self.book != other.book {
            return (sigma, false);
        }
        let gap = self.frame.abs_diff(other.frame) as f64;
        (gap.min(sigma), gap == 0.0)
    }
}

/// Interns the book ids of `samples` in first-seen order.
pub fn frame_positions<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Vec<FramePos> {
    let mut books: std::collections::HashMap<&str, u32> = Default::default();
    samples
        .into_iter()
        .map(|s| {
            let next = books.len() as u32;
            let book = *books.entry(s.book.as_str()).or_insert(next);
            FramePos { book, frame: s.frame }
        })
        .collect()
}

#[inline]
pub fn st_distance_pos(a: FramePos, b: FramePos, params: &StParams) -> f64 {
    let (t, same_frame) = a.temporal(b, params.sigma);
    if same_frame {
        t + params.eta
    } else {
        t
    }
}

pub fn st_distance(a: &Sample, b: &Sample, params: &StParams) -> f64 {
    if a.book != b.book {
        return params.sigma;
    }
    let gap = a.frame.abs_diff(b.frame) as f64;
    let penalty = if a.frame == b.frame { params.eta } else { 0.0 };
    gap.min(params.sigma) + penalty
}

/// Feature distance plus a precomputed spatial-temporal term.
pub fn total_distance(feat_i: &[f64], feat_j: &[f64], st: f64) -> Result<f64> {
    if feat_i.len() != feat_j.len() {
        return Err(FsacError::DimensionMismatch {
            expected: feat_i.len(),
            found: feat_j.len(),
            context: Some("total_distance".into()),
        });
    }
    Ok(l2_dist(feat_i, feat_j) + st)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MiningMode {
    /// Negatives minimize the same total distance as positives.
    PaperLiteral,
    /// Negatives subtract the same-frame penalty instead of adding it, so
    /// differently labelled characters sharing a frame are mined first.
    #[default]
    FrameAware,
}

impl std::str::FromStr for MiningMode {
    type Err = FsacError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper-literal" => Ok(MiningMode::PaperLiteral),
            "frame-aware" => Ok(MiningMode::FrameAware),
            other => Err(FsacError::invalid("mining_mode", format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub positive: usize,
    pub negative: usize,
}

/// A mini-batch as seen by the miner. Samples whose label is `None` are
/// neither anchors nor candidates.
#[derive(Debug, Clone, Copy)]
pub struct MiningBatch<'a> {
    pub features: &'a Matrix,
    pub positions: &'a [FramePos],
    pub labels: &'a [Option<usize>],
}

/// For every anchor, the nearest same-label sample under the total distance
/// and the best-scoring differently labelled sample. Ties go to the lower
/// batch index. Anchors without a candidate on either side get `None`.
pub fn mine_triplets(batch: MiningBatch<'_>, params: &StParams, mode: MiningMode) -> Vec<Option<Triplet>> {
    let n = batch.features.rows();
    debug_assert_eq!(batch.positions.len(), n);
    debug_assert_eq!(batch.labels.len(), n);

    (0..n)
        .map(|i| {
            let li = batch.labels[i]?;
            let fi = batch.features.row(i);
            let mut best_pos: Option<(f64, usize)> = None;
            let mut best_neg: Option<(f64, usize)> = None;
            for j in 0..n {
                if j == i {
                    continue;
                }
                let Some(lj) = batch.labels[j] else { continue };
                let feat = l2_dist(fi, batch.features.row(j));
                let (temporal, same_frame) = batch.positions[i].temporal(batch.positions[j], params.sigma);
                let penalty = if same_frame { params.eta } else { 0.0 };
                let (score, slot) = if lj == li {
                    (feat + temporal + penalty, &mut best_pos)
                } else {
                    let s = match mode {
                        MiningMode::PaperLiteral => feat + temporal + penalty,
                        MiningMode::FrameAware => feat + temporal - penalty,
                    };
                    (s, &mut best_neg)
                };
                if slot.is_none_or(|(b, _)| score < b) {
                    *slot = Some((score, j));
                }
            }
            Some(Triplet {
                positive: best_pos?.1,
                negative: best_neg?.1,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Part;

    fn s(book: &str, frame: u64) -> Sample {
        Sample {
            id: format!("{book}-{frame}"),
            book: book.into(),
            frame,
            part: Part::Face,
            embedding: vec![],
            identity: None,
        }
    }

    #[test]
    fn temporal_distance_values() {
        let p = StParams::default();
        assert_eq!(st_distance(&s("b", 5), &s("b", 5), &p), 1000.0);
        assert_eq!(st_distance(&s("b", 5), &s("b", 8), &p), 3.0);
        assert_eq!(st_distance(&s("b", 3), &s("b", 250), &p), 100.0);
        assert_eq!(st_distance(&s("a", 3), &s("b", 3), &p), 100.0);
    }

    #[test]
    fn total_distance_values() {
        assert_eq!(total_distance(&[1.0, 2.0], &[1.0, 2.0], 0.0).unwrap(), 0.0);
        assert_eq!(total_distance(&[0.0, 0.0], &[3.0, 4.0], 100.0).unwrap(), 105.0);
        assert!(total_distance(&[0.0], &[0.0, 1.0], 0.0).is_err());
    }

    #[test]
    fn negative_params_rejected() {
        assert!(StParams { sigma: 1.0, eta: -1.0 }.validate().is_err());
        assert!(StParams { sigma: f64::NAN, eta: 1.0 }.validate().is_err());
        assert!(StParams::default().validate().is_ok());
    }

    fn batch_1d(feats: &[f64], frames: &[u64], labels: &[Option<usize>]) -> (Matrix, Vec<FramePos>, Vec<Option<usize>>) {
        let m = Matrix::from_vec(feats.len(), 1, feats.to_vec()).unwrap();
        let pos = frames.iter().map(|&f| FramePos { book: 0, frame: f }).collect();
        (m, pos, labels.to_vec())
    }

    #[test]
    fn positive_prefers_neighbouring_frame() {
        // anchor at frame 10; same-label candidates at frame 11 (dist 0.5) and 300 (dist 0.4)
        let (m, pos, labels) = batch_1d(&[0.0, 0.5, -0.4, 5.0], &[10, 11, 300, 10], &[Some(0), Some(0), Some(0), Some(1)]);
        let t = mine_triplets(
            MiningBatch { features: &m, positions: &pos, labels: &labels },
            &StParams::default(),
            MiningMode::FrameAware,
        );
        assert_eq!(t[0].unwrap().positive, 1);
    }

    #[test]
    fn frame_aware_negative_prefers_same_frame() {
        let (m, pos, labels) = batch_1d(&[0.0, 0.6, 0.3, 0.1], &[10, 10, 50, 12], &[Some(0), Some(1), Some(1), Some(0)]);
        let b = MiningBatch { features: &m, positions: &pos, labels: &labels };
        let fa = mine_triplets(b, &StParams::default(), MiningMode::FrameAware);
        assert_eq!(fa[0].unwrap().negative, 1);
        let lit = mine_triplets(b, &StParams::default(), MiningMode::PaperLiteral);
        assert_eq!(lit[0].unwrap().negative, 2);
    }

    #[test]
    fn single_label_batch_has_no_negatives() {
        let (m, pos, labels) = batch_1d(&[0.0, 1.0, 2.0], &[0, 1, 2], &[Some(3); 3]);
        let t = mine_triplets(
            MiningBatch { features: &m, positions: &pos, labels: &labels },
            &StParams::default(),
            MiningMode::FrameAware,
        );
        assert!(t.iter().all(Option::is_none));
    }

    #[test]
    fn unlabelled_samples_are_skipped() {
        let (m, pos, labels) = batch_1d(&[0.0, 0.01, 1.0, 2.0], &[0, 1, 2, 3], &[Some(0), None, Some(0), Some(1)]);
        let t = mine_triplets(
            MiningBatch { features: &m, positions: &pos, labels: &labels },
            &StParams::CLASSIC,
            MiningMode::FrameAware,
        );
        assert!(t[1].is_none());
        assert_eq!(t[0].unwrap(), Triplet { positive: 2, negative: 3 });
    }
}
