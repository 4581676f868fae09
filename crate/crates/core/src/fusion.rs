//! Face-body label fusion.
//!
//! Each paired face/body takes the top class of whichever side is more
//! confident; ties go to the face. Face clusters and body clusters live in one
//! merged label space, faces first: `FaceCluster(m) -> m` and
//! `BodyCluster(m) -> n_face_clusters + m`.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::cluster::SoftLabel;
use crate::data::PairIndex;
use crate::error::{FsacError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum MergedOrigin {
    FaceCluster(usize),
    BodyCluster(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MergedLabelSpace {
    pub n_face_clusters: usize,
    pub n_body_clusters: usize,
}

impl MergedLabelSpace {
    pub fn size(&self) -> usize {
        self.n_face_clusters + self.n_body_clusters
    }

    pub fn label(&self, origin: MergedOrigin) -> usize {
        match origin {
            MergedOrigin::FaceCluster(m) => m,
            MergedOrigin::BodyCluster(m) => self.n_face_clusters + m,
        }
    }

    pub fn origin(&self, label: usize) -> MergedOrigin {
        if label < self.n_face_clusters {
            MergedOrigin::FaceCluster(label)
        } else {
            MergedOrigin::BodyCluster(label - self.n_face_clusters)
        }
    }
}

/// Hard labels for both parts; `None` means the sample has no label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FusedLabels {
    pub face: Vec<Option<usize>>,
    pub body: Vec<Option<usize>>,
}

impl FusedLabels {
    /// Number of classes implied by the largest label.
    pub fn n_classes(&self) -> usize {
        self.face
            .iter()
            .chain(&self.body)
            .flatten()
            .max()
            .map_or(0, |m| m + 1)
    }

    /// True when both label vectors induce the same partition as `other`'s.
    pub fn same_partition(&self, other: &FusedLabels) -> bool {
        let a: Vec<_> = self.face.iter().chain(&self.body).copied().collect();
        let b: Vec<_> = other.face.iter().chain(&other.body).copied().collect();
        same_partition(&a, &b)
    }
}

fn n_classes_of(soft: &[Option<SoftLabel>]) -> usize {
    soft.iter().flatten().map(|s| s.probs.len()).max().unwrap_or(0)
}

/// Combines per-sample soft labels through the face-body pairing.
///
/// `None` entries are noise. A pair with one noisy side takes the other side's
/// label; a pair with two noisy sides stays unlabelled.
pub fn fuse_labels(
    face_soft: &[Option<SoftLabel>],
    body_soft: &[Option<SoftLabel>],
    pairs: &PairIndex,
) -> Result<(FusedLabels, MergedLabelSpace)> {
    if pairs.face_to_body.len() != face_soft.len() {
        return Err(FsacError::MissingSoftLabel(format!(
            "face soft labels cover {} of {} samples",
            face_soft.len(),
            pairs.face_to_body.len()
        )));
    }
    if pairs.body_to_face.len() != body_soft.len() {
        return Err(FsacError::MissingSoftLabel(format!(
            "body soft labels cover {} of {} samples",
            body_soft.len(),
            pairs.body_to_face.len()
        )));
    }
    let space = MergedLabelSpace {
        n_face_clusters: n_classes_of(face_soft),
        n_body_clusters: n_classes_of(body_soft),
    };
    let face_label = |s: &SoftLabel| space.label(MergedOrigin::FaceCluster(s.top_class));
    let body_label = |s: &SoftLabel| space.label(MergedOrigin::BodyCluster(s.top_class));

    let mut face: Vec<Option<usize>> = face_soft.iter().map(|s| s.as_ref().map(face_label)).collect();
    let mut body: Vec<Option<usize>> = body_soft.iter().map(|s| s.as_ref().map(body_label)).collect();

    for (fi, bi) in pairs.face_to_body.iter().enumerate() {
        let Some(bi) = *bi else { continue };
        let fused = match (&face_soft[fi], &body_soft[bi]) {
            (Some(f), Some(b)) if b.top_prob > f.top_prob => Some(body_label(b)),
            (Some(f), _) => Some(face_label(f)),
            (None, Some(b)) => Some(body_label(b)),
            (None, None) => None,
        };
        face[fi] = fused;
        body[bi] = fused;
    }
    Ok((FusedLabels { face, body }, space))
}

/// Renumbers labels onto `0..K`, keeping their relative order. Returns the
/// relabelled set and `K`.
pub fn relabel_compact(labels: &FusedLabels) -> (FusedLabels, usize) {
    let used: BTreeMap<usize, usize> = labels
        .face
        .iter()
        .chain(&labels.body)
        .flatten()
        .map(|&l| (l, 0))
        .collect();
    let map: BTreeMap<usize, usize> = used.keys().enumerate().map(|(new, &old)| (old, new)).collect();
    let remap = |v: &[Option<usize>]| v.iter().map(|l| l.map(|l| map[&l])).collect();
    (
        FusedLabels {
            face: remap(&labels.face),
            body: remap(&labels.body),
        },
        map.len(),
    )
}

/// Partition equality up to relabelling. Unlabelled positions must coincide.
pub fn same_partition(a: &[Option<usize>], b: &[Option<usize>]) -> bool {
    if a.len() != b.len() {
        return false;
    }
    let mut fwd = std::collections::HashMap::new();
    let mut back = std::collections::HashMap::new();
    for (x, y) in a.iter().zip(b) {
        match (x, y) {
            (None, None) => {}
            (Some(x), Some(y)) => {
                if *fwd.entry(*x).or_insert(*y) != *y || *back.entry(*y).or_insert(*x) != *x {
                    return false;
                }
            }
            _ => return false,
        }
    }
    true
}
