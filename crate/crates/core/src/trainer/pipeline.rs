//! The loop iteration stage: per epoch, embed both parts, cluster each,
//! derive soft labels against the cluster agents, fuse them through the
//! face-body graph, then fine-tune both heads with the classification and
//! spatial-temporal triplet losses.

use serde::{Deserialize, Serialize};

use crate::cluster::{self, ClusterAssignment, DbscanParams};
use crate::data::{DatasetSplit, FaceBodyGraph, PairIndex, SampleSet};
use crate::error::{FsacError, Result};
use crate::eval::{evaluate, evaluate_mixed, MetricsReport};
use crate::fusion::{fuse_labels, relabel_compact, FusedLabels};
use crate::matrix::Matrix;
use crate::stmetric::{frame_positions, mine_triplets, FramePos, MiningBatch, MiningMode, StParams};

use super::batch::make_batches;
use super::head::{Classifier, EmbeddingHead};
use super::loss::{apply_sgd, gradients, LossBatch, LossWeights};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusterAlgorithm {
    #[default]
    Dbscan,
    Kmeans,
}

impl std::str::FromStr for ClusterAlgorithm {
    type Err = FsacError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dbscan" => Ok(Self::Dbscan),
            "kmeans" => Ok(Self::Kmeans),
            other => Err(FsacError::invalid("algorithm", format!("unknown algorithm `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub algorithm: ClusterAlgorithm,
    pub eps: f64,
    pub min_pts: usize,
    /// Cluster count for k-means.
    pub k: usize,
    pub max_iter: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            algorithm: ClusterAlgorithm::Dbscan,
            eps: 0.45,
            min_pts: 4,
            k: 50,
            max_iter: 100,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        match self.algorithm {
            ClusterAlgorithm::Dbscan => DbscanParams {
                eps: self.eps,
                min_pts: self.min_pts,
            }
            .validate(),
            ClusterAlgorithm::Kmeans if self.k == 0 => Err(FsacError::invalid("k", "must be >= 1")),
            ClusterAlgorithm::Kmeans => Ok(()),
        }
    }

    pub fn run(&self, features: &Matrix, seed: u64) -> Result<ClusterAssignment> {
        match self.algorithm {
            ClusterAlgorithm::Dbscan => cluster::dbscan(
                features,
                DbscanParams {
                    eps: self.eps,
                    min_pts: self.min_pts,
                },
            ),
            ClusterAlgorithm::Kmeans => {
                Ok(cluster::kmeans(features, self.k.min(features.rows()), seed, self.max_iter)?.assignment)
            }
        }
    }
}

/// Which losses see the fused labels. With `ClassificationOnly` the triplet
/// miner keeps each part's own cluster labels.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionScope {
    #[default]
    Both,
    ClassificationOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub margin: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Passes over the batch list per epoch.
    pub inner_iterations: usize,
    pub batch_size: usize,
    pub shuffle: bool,
    pub st_params: StParams,
    pub mining_mode: MiningMode,
    pub loss_weights: LossWeights,
    /// Softmax temperature of the soft pseudo-labels.
    pub temperature: f64,
    /// Use the face-body graph to fuse labels; off means plain cluster labels.
    pub fusion: bool,
    pub fusion_scope: FusionScope,
    /// Head output size; defaults to the input size.
    pub embedding_dim: Option<usize>,
    /// Std of the noise added to the identity initialization.
    pub init_noise: f64,
    /// Row norm of the centroid-initialized classifier.
    pub classifier_scale: f64,
    /// Stop once the pseudo-label partition repeats between epochs.
    pub early_stop: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            margin: 0.3,
            learning_rate: 0.05,
            epochs: 5,
            inner_iterations: 1,
            batch_size: 64,
            shuffle: false,
            st_params: StParams::default(),
            mining_mode: MiningMode::FrameAware,
            loss_weights: LossWeights::default(),
            temperature: 1.0,
            fusion: true,
            fusion_scope: FusionScope::Both,
            embedding_dim: None,
            init_noise: 0.01,
            classifier_scale: 3.0,
            early_stop: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.st_params.validate()?;
        if !(self.margin.is_finite() && self.margin >= 0.0) {
            return Err(FsacError::invalid("margin", "must be finite and >= 0"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(FsacError::invalid("learning_rate", "must be > 0"));
        }
        let w = self.loss_weights;
        if !(w.id.is_finite() && w.triplet.is_finite() && w.id >= 0.0 && w.triplet >= 0.0) {
            return Err(FsacError::invalid("loss_weights", "weights must be finite and >= 0"));
        }
        if w.id == 0.0 && w.triplet == 0.0 {
            return Err(FsacError::invalid("loss_weights", "weights cannot both be 0"));
        }
        if self.batch_size < 2 {
            return Err(FsacError::invalid("batch_size", "must be >= 2"));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(FsacError::invalid("temperature", "must be > 0"));
        }
        if !(self.init_noise.is_finite() && self.init_noise >= 0.0) {
            return Err(FsacError::invalid("init_noise", "must be finite and >= 0"));
        }
        if !(self.classifier_scale.is_finite() && self.classifier_scale > 0.0) {
            return Err(FsacError::invalid("classifier_scale", "must be > 0"));
        }
        if self.inner_iterations == 0 {
            return Err(FsacError::invalid("inner_iterations", "must be >= 1"));
        }
        Ok(())
    }
}

/// Held-out query/gallery sides for per-epoch evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSets {
    pub face: DatasetSplit,
    pub body: DatasetSplit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSnapshot {
    pub face: MetricsReport,
    pub body: MetricsReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixed: Option<MetricsReport>,
}

pub fn snapshot(sets: &EvalSets, face_head: &EmbeddingHead, body_head: &EmbeddingHead) -> Result<EvalSnapshot> {
    let mixed = if face_head.d_out() == body_head.d_out() {
        Some(evaluate_mixed(&sets.face, &sets.body, face_head, body_head)?)
    } else {
        None
    };
    Ok(EvalSnapshot {
        face: evaluate(&sets.face, face_head)?,
        body: evaluate(&sets.body, body_head)?,
        mixed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub face_clusters: usize,
    pub body_clusters: usize,
    pub face_noise: usize,
    pub body_noise: usize,
    /// Classes seen by the classifiers (merged space when fusing).
    pub classes: usize,
    pub loss_id: f64,
    pub loss_triplet: f64,
    pub triplets: usize,
    pub labels_stable: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<EvalSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub face_head: EmbeddingHead,
    pub body_head: EmbeddingHead,
    pub log: Vec<EpochLog>,
    /// Metrics of the initial heads, when evaluation sets were given.
    pub initial: Option<EvalSnapshot>,
}

impl TrainOutcome {
    pub fn final_metrics(&self) -> Option<&EvalSnapshot> {
        self.log.iter().rev().find_map(|l| l.metrics.as_ref()).or(self.initial.as_ref())
    }
}

/// Labels each part trains on for one epoch.
struct EpochLabels {
    id_face: Vec<Option<usize>>,
    id_body: Vec<Option<usize>>,
    tri_face: Vec<Option<usize>>,
    tri_body: Vec<Option<usize>>,
    classes_face: usize,
    classes_body: usize,
    partition: FusedLabels,
}

struct PartState<'a> {
    inputs: Matrix,
    positions: Vec<FramePos>,
    head: EmbeddingHead,
    classifier: Classifier,
    samples: &'a SampleSet,
}

fn init_part<'a>(samples: &'a SampleSet, cfg: &TrainConfig, seed: u64) -> Result<PartState<'a>> {
    let d_in = samples.dim();
    let d_out = cfg.embedding_dim.unwrap_or(d_in);
    Ok(PartState {
        inputs: samples.embeddings(),
        positions: frame_positions(samples.samples()),
        head: EmbeddingHead::init(d_in, d_out, cfg.init_noise, seed)?,
        classifier: Classifier {
            weight: Matrix::zeros(0, d_out),
        },
        samples,
    })
}

fn select_rows(m: &Matrix, rows: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(rows.len(), m.cols());
    for (k, &r) in rows.iter().enumerate() {
        out.row_mut(k).copy_from_slice(m.row(r));
    }
    out
}

fn n_classes(labels: &[Option<usize>]) -> usize {
    labels.iter().flatten().max().map_or(0, |m| m + 1)
}

#[derive(Default)]
struct LossTally {
    id: f64,
    triplet: f64,
    batches: usize,
    triplets: usize,
}

fn train_part_batch(part: &mut PartState<'_>, rows: &[usize], labels_id: &[Option<usize>], labels_tri: &[Option<usize>], cfg: &TrainConfig, tally: &mut LossTally) -> Result<()> {
    let inputs = select_rows(&part.inputs, rows);
    let positions: Vec<FramePos> = rows.iter().map(|&r| part.positions[r]).collect();
    let id_labels: Vec<Option<usize>> = rows.iter().map(|&r| labels_id[r]).collect();
    let tri_labels: Vec<Option<usize>> = rows.iter().map(|&r| labels_tri[r]).collect();
    if id_labels.iter().all(Option::is_none) {
        return Ok(());
    }
    let features = part.head.forward_all(&inputs)?;
    let mut triplets = mine_triplets(
        MiningBatch {
            features: &features,
            positions: &positions,
            labels: &tri_labels,
        },
        &cfg.st_params,
        cfg.mining_mode,
    );
    // anchors without a classification label are out of the loss altogether
    for (t, l) in triplets.iter_mut().zip(&id_labels) {
        if l.is_none() {
            *t = None;
        }
    }
    tally.triplets += triplets.iter().flatten().count();
    let (grads, loss) = gradients(
        &part.head,
        &part.classifier,
        LossBatch {
            inputs: &inputs,
            labels: &id_labels,
            triplets: &triplets,
        },
        cfg.margin,
        cfg.loss_weights,
    )?;
    apply_sgd(&mut part.head, &mut part.classifier, &grads, cfg.learning_rate);
    tally.id += loss.id;
    tally.triplet += loss.triplet;
    tally.batches += 1;
    Ok(())
}

/// Runs the fine-tuning loop on paired face and body training sets.
///
/// With `eval` present, metrics are recorded for the initial heads and after
/// every epoch. The run is deterministic for a given config.
pub fn run_fsac(
    faces: &SampleSet,
    bodies: &SampleSet,
    graph: &FaceBodyGraph,
    cluster_cfg: &ClusterConfig,
    cfg: &TrainConfig,
    eval: Option<&EvalSets>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    cluster_cfg.validate()?;
    let pairs = PairIndex::build(graph, faces, bodies);
    let mut face = init_part(faces, cfg, cfg.seed)?;
    let mut body = init_part(bodies, cfg, cfg.seed.wrapping_add(1))?;

    let initial = match eval {
        Some(sets) => Some(snapshot(sets, &face.head, &body.head)?),
        None => None,
    };
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut previous: Option<FusedLabels> = None;

    for epoch in 1..=cfg.epochs {
        let face_feats = face.head.forward_all(&face.inputs)?;
        let body_feats = body.head.forward_all(&body.inputs)?;
        let epoch_seed = cfg.seed.wrapping_add(epoch as u64);
        let face_assign = cluster_cfg.run(&face_feats, epoch_seed)?;
        let body_assign = cluster_cfg.run(&body_feats, epoch_seed)?;
        if face_assign.n_clusters == 0 {
            return Err(FsacError::EpochWithoutClusters { epoch, part: "face" });
        }
        if body_assign.n_clusters == 0 {
            return Err(FsacError::EpochWithoutClusters { epoch, part: "body" });
        }

        let labels = epoch_labels(&face_feats, &body_feats, &face_assign, &body_assign, &pairs, cfg)?;
        let stable = previous.as_ref().is_some_and(|p| p.same_partition(&labels.partition));

        let mut entry = EpochLog {
            epoch,
            face_clusters: face_assign.n_clusters,
            body_clusters: body_assign.n_clusters,
            face_noise: face_assign.n_noise(),
            body_noise: body_assign.n_noise(),
            classes: labels.classes_face.max(labels.classes_body),
            loss_id: 0.0,
            loss_triplet: 0.0,
            triplets: 0,
            labels_stable: stable,
            metrics: None,
        };
        if stable && cfg.early_stop {
            log::info!("epoch {epoch}: pseudo-labels unchanged, stopping");
            entry.metrics = log.last().and_then(|l: &EpochLog| l.metrics.clone()).or(initial.clone());
            log.push(entry);
            break;
        }

        face.classifier = Classifier::from_centroids(&face_feats, &labels.id_face, labels.classes_face, cfg.classifier_scale);
        body.classifier = Classifier::from_centroids(&body_feats, &labels.id_body, labels.classes_body, cfg.classifier_scale);

        let mut tally = LossTally::default();
        for pass in 0..cfg.inner_iterations {
            let batch_seed = cfg.seed.wrapping_mul(31).wrapping_add((epoch * 1000 + pass) as u64);
            let face_batches = make_batches(face.samples.len(), cfg.batch_size, cfg.shuffle, batch_seed)?;
            let body_batches = make_batches(body.samples.len(), cfg.batch_size, cfg.shuffle, batch_seed)?;
            for i in 0..face_batches.len().max(body_batches.len()) {
                if let Some(rows) = face_batches.get(i) {
                    train_part_batch(&mut face, rows, &labels.id_face, &labels.tri_face, cfg, &mut tally)?;
                }
                if let Some(rows) = body_batches.get(i) {
                    train_part_batch(&mut body, rows, &labels.id_body, &labels.tri_body, cfg, &mut tally)?;
                }
            }
        }
        if tally.batches > 0 {
            entry.loss_id = tally.id / tally.batches as f64;
            entry.loss_triplet = tally.triplet / tally.batches as f64;
        }
        entry.triplets = tally.triplets;
        if let Some(sets) = eval {
            entry.metrics = Some(snapshot(sets, &face.head, &body.head)?);
        }
        log::info!(
            "epoch {epoch}: clusters face={} body={} classes={} loss id={:.4} tri={:.4}",
            entry.face_clusters,
            entry.body_clusters,
            entry.classes,
            entry.loss_id,
            entry.loss_triplet
        );
        log.push(entry);
        previous = Some(labels.partition);
    }

    Ok(TrainOutcome {
        face_head: face.head,
        body_head: body.head,
        log,
        initial,
    })
}

fn epoch_labels(
    face_feats: &Matrix,
    body_feats: &Matrix,
    face_assign: &ClusterAssignment,
    body_assign: &ClusterAssignment,
    pairs: &PairIndex,
    cfg: &TrainConfig,
) -> Result<EpochLabels> {
    if !cfg.fusion {
        let partition = FusedLabels {
            face: face_assign.labels.clone(),
            body: body_assign.labels.clone(),
        };
        return Ok(EpochLabels {
            id_face: face_assign.labels.clone(),
            id_body: body_assign.labels.clone(),
            tri_face: face_assign.labels.clone(),
            tri_body: body_assign.labels.clone(),
            classes_face: face_assign.n_clusters,
            classes_body: body_assign.n_clusters,
            partition,
        });
    }

    let face_agents = cluster::compute_agents(face_feats, face_assign)?;
    let body_agents = cluster::compute_agents(body_feats, body_assign)?;
    let face_soft = cluster::soft_labels_for(face_feats, face_assign, &face_agents, cfg.temperature)?;
    let body_soft = cluster::soft_labels_for(body_feats, body_assign, &body_agents, cfg.temperature)?;
    let (fused, _space) = fuse_labels(&face_soft, &body_soft, pairs)?;
    let (fused, k) = relabel_compact(&fused);

    let (tri_face, tri_body) = match cfg.fusion_scope {
        FusionScope::Both => (fused.face.clone(), fused.body.clone()),
        FusionScope::ClassificationOnly => (face_assign.labels.clone(), body_assign.labels.clone()),
    };
    Ok(EpochLabels {
        id_face: fused.face.clone(),
        id_body: fused.body.clone(),
        tri_face,
        tri_body,
        classes_face: k.max(n_classes(&fused.face)),
        classes_body: k.max(n_classes(&fused.body)),
        partition: fused,
    })
}
