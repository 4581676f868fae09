//! Query/gallery retrieval evaluation: rankings by Euclidean distance, average
//! precision, CMC rank-k, and feature export.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetSplit, SampleSet};
use crate::error::{FsacError, Result};
use crate::matrix::{sq_dist, Matrix};
use crate::trainer::EmbeddingHead;

pub const CMC_RANKS: [usize; 3] = [1, 5, 10];

/// Gallery order for one query plus relevance, both in rank order.
#[derive(Debug, Clone, PartialEq)]
pub struct Ranking {
    pub query_id: String,
    /// Gallery indices, nearest first.
    pub order: Vec<usize>,
    /// `relevant[r]` is true when the item at rank `r` shares the query identity.
    pub relevant: Vec<bool>,
}

impl Ranking {
    pub fn n_relevant(&self) -> usize {
        self.relevant.iter().filter(|r| **r).count()
    }

    /// Zero-based rank of the first relevant item.
    pub fn first_hit(&self) -> Option<usize> {
        self.relevant.iter().position(|r| *r)
    }
}

/// Gallery indices by ascending L2 distance; ties keep gallery order.
pub fn rank_gallery(query: &[f64], gallery: &Matrix) -> Result<Vec<usize>> {
    if gallery.rows() == 0 {
        return Err(FsacError::EmptyGallery);
    }
    if query.len() != gallery.cols() {
        return Err(FsacError::DimensionMismatch {
            expected: gallery.cols(),
            found: query.len(),
            context: Some("query feature".into()),
        });
    }
    let mut scored: Vec<(f64, usize)> = gallery
        .iter_rows()
        .enumerate()
        .map(|(i, g)| (sq_dist(query, g), i))
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(scored.into_iter().map(|(_, i)| i).collect())
}

/// Mean of precision@r over the ranks r that hold relevant items.
pub fn average_precision(ranking: &Ranking) -> Result<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, &rel) in ranking.relevant.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    if hits == 0 {
        return Err(FsacError::NoRelevant(ranking.query_id.clone()));
    }
    Ok(sum / hits as f64)
}

/// Fraction of queries whose first relevant item is within the top `k`.
pub fn cmc_curve(rankings: &[Ranking], ks: &[usize]) -> Result<BTreeMap<usize, f64>> {
    if rankings.is_empty() {
        return Err(FsacError::EmptyQuerySet);
    }
    let firsts = rankings
        .iter()
        .map(|r| r.first_hit().ok_or_else(|| FsacError::NoRelevant(r.query_id.clone())))
        .collect::<Result<Vec<_>>>()?;
    let n = rankings.len() as f64;
    Ok(ks
        .iter()
        .map(|&k| (k, firsts.iter().filter(|&&f| f < k).count() as f64 / n))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(rename = "mAP")]
    pub map: f64,
    pub cmc: BTreeMap<usize, f64>,
    pub n_queries: usize,
    /// Queries skipped because the gallery holds nothing of their identity.
    #[serde(default)]
    pub n_rejected: usize,
}

impl MetricsReport {
    pub fn rank(&self, k: usize) -> f64 {
        self.cmc.get(&k).copied().unwrap_or(f64::NAN)
    }

    pub fn from_rankings(rankings: &[Ranking], n_rejected: usize) -> Result<Self> {
        let cmc = cmc_curve(rankings, &CMC_RANKS)?;
        let aps = rankings.iter().map(average_precision).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            map: aps.iter().sum::<f64>() / aps.len() as f64,
            cmc,
            n_queries: rankings.len(),
            n_rejected,
        })
    }
}

/// Features plus identities of an evaluation side.
struct Embedded<'a> {
    features: Matrix,
    ids: Vec<&'a str>,
    identities: Vec<Option<&'a str>>,
}

fn embed<'a>(set: &'a SampleSet, head: &EmbeddingHead) -> Result<Embedded<'a>> {
    Ok(Embedded {
        features: head.forward_all(&set.embeddings())?,
        ids: set.samples().iter().map(|s| s.id.as_str()).collect(),
        identities: set.samples().iter().map(|s| s.identity.as_deref()).collect(),
    })
}

fn concat(parts: Vec<Embedded<'_>>) -> Result<Embedded<'_>> {
    let cols = parts.iter().map(|p| p.features.cols()).max().unwrap_or(0);
    let mut data = Vec::new();
    let mut ids = Vec::new();
    let mut identities = Vec::new();
    for p in parts {
        if p.features.rows() > 0 && p.features.cols() != cols {
            return Err(FsacError::DimensionMismatch {
                expected: cols,
                found: p.features.cols(),
                context: Some("mixed evaluation needs equal head output dimensions".into()),
            });
        }
        data.extend_from_slice(p.features.as_slice());
        ids.extend(p.ids);
        identities.extend(p.identities);
    }
    let rows = ids.len();
    Ok(Embedded {
        features: Matrix::from_vec(rows, cols, data)?,
        ids,
        identities,
    })
}

fn evaluate_embedded(query: &Embedded<'_>, gallery: &Embedded<'_>) -> Result<MetricsReport> {
    if gallery.features.rows() == 0 {
        return Err(FsacError::EmptyGallery);
    }
    if query.features.rows() == 0 {
        return Err(FsacError::EmptyQuerySet);
    }
    let rankings: Vec<Option<Ranking>> = (0..query.features.rows())
        .into_par_iter()
        .map(|q| {
            let truth = query.identities[q].ok_or(FsacError::MissingTruth)?;
            let order = rank_gallery(query.features.row(q), &gallery.features)?;
            let relevant: Vec<bool> = order.iter().map(|&g| gallery.identities[g] == Some(truth)).collect();
            if !relevant.iter().any(|r| *r) {
                log::warn!("query `{}` has no gallery item of its identity; skipped", query.ids[q]);
                return Ok(None);
            }
            Ok(Some(Ranking {
                query_id: query.ids[q].to_string(),
                order,
                relevant,
            }))
        })
        .collect::<Result<_>>()?;
    let n_rejected = rankings.iter().filter(|r| r.is_none()).count();
    let kept: Vec<Ranking> = rankings.into_iter().flatten().collect();
    MetricsReport::from_rankings(&kept, n_rejected)
}

/// Embeds query and gallery with `head`, ranks, and aggregates mAP and CMC.
pub fn evaluate(split: &DatasetSplit, head: &EmbeddingHead) -> Result<MetricsReport> {
    evaluate_embedded(&embed(&split.query, head)?, &embed(&split.gallery, head)?)
}

/// Pools face and body queries against the pooled face and body gallery, each
/// sample embedded by its own part's head. Heads must share an output size.
pub fn evaluate_mixed(
    face: &DatasetSplit,
    body: &DatasetSplit,
    face_head: &EmbeddingHead,
    body_head: &EmbeddingHead,
) -> Result<MetricsReport> {
    let query = concat(vec![embed(&face.query, face_head)?, embed(&body.query, body_head)?])?;
    let gallery = concat(vec![embed(&face.gallery, face_head)?, embed(&body.gallery, body_head)?])?;
    evaluate_embedded(&query, &gallery)
}

/// Writes `id,identity,f0..f{d-1}` rows. Floats use the shortest text that
/// parses back to the same value.
pub fn export_features(samples: &SampleSet, head: &EmbeddingHead, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let d = head.d_out();
    let mut header = vec!["id".to_string(), "identity".to_string()];
    header.extend((0..d).map(|j| format!("f{j}")));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for s in samples.samples() {
        let f = head.forward(&s.embedding)?;
        let mut rec = vec![s.id.clone(), s.identity.clone().unwrap_or_default()];
        rec.extend(f.iter().map(|v| format!("{v:?}")));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| FsacError::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> FsacError {
    FsacError::io(path, std::io::Error::other(e))
}
