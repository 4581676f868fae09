//! Classification and triplet losses with hand-derived gradients through the
//! linear head and its normalization.

use crate::cluster::softmax;
use crate::error::{FsacError, Result};
use crate::matrix::{axpy, dot, l2_dist, Matrix};
use crate::stmetric::Triplet;

use super::head::{Classifier, EmbeddingHead};

/// `max(0, |a - p| + margin - |a - n|)` on plain L2 distances.
pub fn triplet_loss(anchor: &[f64], positive: &[f64], negative: &[f64], margin: f64) -> f64 {
    (l2_dist(anchor, positive) + margin - l2_dist(anchor, negative)).max(0.0)
}

/// Softmax cross-entropy at `label`.
pub fn classification_loss(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(FsacError::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
    Ok((lse - logits[label]).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub id: f64,
    pub triplet: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { id: 1.0, triplet: 1.0 }
    }
}

/// One part's mini-batch: raw inputs, labels, and mined triplets (indices
/// into the batch).
#[derive(Debug, Clone, Copy)]
pub struct LossBatch<'a> {
    pub inputs: &'a Matrix,
    pub labels: &'a [Option<usize>],
    pub triplets: &'a [Option<Triplet>],
}

#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize)]
pub struct LossBreakdown {
    pub id: f64,
    pub triplet: f64,
    pub total: f64,
    /// Labelled samples in the batch; the divisor of both terms.
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub classifier: Matrix,
}

struct Forward {
    features: Matrix,
    norms: Vec<f64>,
}

fn forward_batch(head: &EmbeddingHead, inputs: &Matrix) -> Result<Forward> {
    let mut features = Matrix::zeros(inputs.rows(), head.d_out());
    let mut norms = Vec::with_capacity(inputs.rows());
    for i in 0..inputs.rows() {
        let z = head.affine(inputs.row(i));
        let r = crate::matrix::norm(&z);
        if r == 0.0 || !r.is_finite() {
            return Err(FsacError::ZeroNorm(i));
        }
        for (f, v) in features.row_mut(i).iter_mut().zip(&z) {
            *f = v / r;
        }
        norms.push(r);
    }
    Ok(Forward { features, norms })
}

fn check_batch(batch: &LossBatch<'_>, classifier: &Classifier) -> Result<()> {
    let n = batch.inputs.rows();
    if batch.labels.len() != n || batch.triplets.len() != n {
        return Err(FsacError::DimensionMismatch {
            expected: n,
            found: batch.labels.len().min(batch.triplets.len()),
            context: Some("batch labels/triplets".into()),
        });
    }
    for &l in batch.labels.iter().flatten() {
        if l >= classifier.n_classes() {
            return Err(FsacError::LabelOutOfRange {
                label: l,
                classes: classifier.n_classes(),
            });
        }
    }
    Ok(())
}

/// Weighted batch loss `w_id * L_id + w_tri * L_tri`, both averaged over the
/// labelled samples of the batch.
pub fn batch_loss(
    head: &EmbeddingHead,
    classifier: &Classifier,
    batch: LossBatch<'_>,
    margin: f64,
    weights: LossWeights,
) -> Result<LossBreakdown> {
    check_batch(&batch, classifier)?;
    let fwd = forward_batch(head, batch.inputs)?;
    let n = batch.labels.iter().flatten().count();
    if n == 0 {
        return Ok(LossBreakdown::default());
    }
    let mut id = 0.0;
    let mut tri = 0.0;
    for (i, label) in batch.labels.iter().enumerate() {
        let Some(y) = *label else { continue };
        let f = fwd.features.row(i);
        id += classification_loss(&classifier.logits(f), y)?;
        if let Some(t) = batch.triplets[i] {
            tri += triplet_loss(f, fwd.features.row(t.positive), fwd.features.row(t.negative), margin);
        }
    }
    let inv = 1.0 / n as f64;
    let (id, triplet) = (id * inv, tri * inv);
    Ok(LossBreakdown {
        id,
        triplet,
        total: weights.id * id + weights.triplet * triplet,
        n,
    })
}

/// Analytic gradients of [`batch_loss`] with respect to the head weights,
/// head bias, and classifier weights. Triplet selections are held fixed.
pub fn gradients(
    head: &EmbeddingHead,
    classifier: &Classifier,
    batch: LossBatch<'_>,
    margin: f64,
    weights: LossWeights,
) -> Result<(Gradients, LossBreakdown)> {
    check_batch(&batch, classifier)?;
    let fwd = forward_batch(head, batch.inputs)?;
    let b = batch.inputs.rows();
    let d = head.d_out();
    let mut grads = Gradients {
        weight: Matrix::zeros(d, head.d_in()),
        bias: vec![0.0; d],
        classifier: Matrix::zeros(classifier.n_classes(), d),
    };
    let n = batch.labels.iter().flatten().count();
    if n == 0 {
        return Ok((grads, LossBreakdown::default()));
    }
    let inv = 1.0 / n as f64;

    // dL/df per batch row, kept per term so a blow-up can be attributed
    let mut g_id = Matrix::zeros(b, d);
    let mut g_tri = Matrix::zeros(b, d);
    let mut id_sum = 0.0;
    let mut tri_sum = 0.0;

    for (i, label) in batch.labels.iter().enumerate() {
        let Some(y) = *label else { continue };
        let f = fwd.features.row(i);
        let logits = classifier.logits(f);
        id_sum += classification_loss(&logits, y)?;
        if weights.id != 0.0 {
            let mut delta = softmax(&logits);
            delta[y] -= 1.0;
            delta.iter_mut().for_each(|v| *v *= weights.id * inv);
            grads.classifier.add_outer(1.0, &delta, f);
            let back = classifier.weight.tr_mul_vec(&delta);
            axpy(1.0, &back, g_id.row_mut(i));
        }

        let Some(t) = batch.triplets[i] else { continue };
        let fp = fwd.features.row(t.positive);
        let fneg = fwd.features.row(t.negative);
        let dp = l2_dist(f, fp);
        let dn = l2_dist(f, fneg);
        let hinge = dp + margin - dn;
        if hinge <= 0.0 {
            continue;
        }
        tri_sum += hinge;
        if weights.triplet == 0.0 {
            continue;
        }
        let c = weights.triplet * inv;
        if dp > 0.0 {
            let u: Vec<f64> = f.iter().zip(fp).map(|(a, p)| c * (a - p) / dp).collect();
            axpy(1.0, &u, g_tri.row_mut(i));
            axpy(-1.0, &u, g_tri.row_mut(t.positive));
        }
        if dn > 0.0 {
            let v: Vec<f64> = f.iter().zip(fneg).map(|(a, q)| c * (a - q) / dn).collect();
            axpy(-1.0, &v, g_tri.row_mut(i));
            axpy(1.0, &v, g_tri.row_mut(t.negative));
        }
    }

    if !g_id.is_finite() || !grads.classifier.is_finite() {
        return Err(FsacError::NonFiniteGradient("classification"));
    }
    if !g_tri.is_finite() {
        return Err(FsacError::NonFiniteGradient("triplet"));
    }

    // back through f = z / |z|: dL/dz = (g - f (f . g)) / |z|
    for i in 0..b {
        let g: Vec<f64> = g_id.row(i).iter().zip(g_tri.row(i)).map(|(a, t)| a + t).collect();
        if g.iter().all(|v| *v == 0.0) {
            continue;
        }
        let f = fwd.features.row(i);
        let proj = dot(f, &g);
        let r = fwd.norms[i];
        let gz: Vec<f64> = g.iter().zip(f).map(|(gv, fv)| (gv - fv * proj) / r).collect();
        grads.weight.add_outer(1.0, &gz, batch.inputs.row(i));
        axpy(1.0, &gz, &mut grads.bias);
    }

    let (id, triplet) = (id_sum * inv, tri_sum * inv);
    Ok((
        grads,
        LossBreakdown {
            id,
            triplet,
            total: weights.id * id + weights.triplet * triplet,
            n,
        },
    ))
}

/// Plain SGD step.
pub fn apply_sgd(head: &mut EmbeddingHead, classifier: &mut Classifier, grads: &Gradients, lr: f64) {
    head.weight.add_scaled(-lr, &grads.weight);
    axpy(-lr, &grads.bias, &mut head.bias);
    classifier.weight.add_scaled(-lr, &grads.classifier);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triplet_values() {
        let a = [0.0, 0.0];
        assert_eq!(triplet_loss(&a, &[0.2, 0.0], &[0.0, 0.9], 0.3), 0.0);
        let v = triplet_loss(&a, &[0.5, 0.0], &[0.0, 0.4], 0.3);
        assert!((v - 0.4).abs() < 1e-15);
        assert_eq!(triplet_loss(&a, &a, &[1.0, 0.0], 0.0), 0.0);
    }

    #[test]
    fn cross_entropy_values() {
        let uniform = classification_loss(&[0.3; 4], 2).unwrap();
        assert!((uniform - 4f64.ln()).abs() < 1e-12);
        assert!(classification_loss(&[20.0, 0.0, 0.0], 0).unwrap() < 1e-8);
        assert_eq!(classification_loss(&[1.7], 0).unwrap(), 0.0);
        assert!(classification_loss(&[0.0, 0.0], 2).is_err());
    }
}
