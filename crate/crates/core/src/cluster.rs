//! Density and centroid clustering of embeddings, reference agents, and the
//! softmax soft pseudo-labels computed against them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FsacError, Result};
use crate::matrix::{axpy, dot, normalize_in_place, sq_dist, Matrix};

/// Hard cluster labels; `None` marks a noise sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub labels: Vec<Option<usize>>,
    pub n_clusters: usize,
}

impl ClusterAssignment {
    pub fn n_noise(&self) -> usize {
        self.labels.iter().filter(|l| l.is_none()).count()
    }

    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_clusters];
        for (i, l) in self.labels.iter().enumerate() {
            if let Some(c) = l {
                out[*c].push(i);
            }
        }
        out
    }
}

/// Returns a copy of `features` with every row scaled to unit length.
pub fn l2_normalize(features: &Matrix) -> Result<Matrix> {
    let mut out = features.clone();
    for i in 0..out.rows() {
        normalize_in_place(out.row_mut(i)).ok_or(FsacError::ZeroNorm(i))?;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DbscanParams {
    pub eps: f64,
    pub min_pts: usize,
}

impl DbscanParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(FsacError::invalid("eps", format!("must be > 0, got {}", self.eps)));
        }
        if self.min_pts < 1 {
            return Err(FsacError::invalid("min_pts", "must be >= 1"));
        }
        Ok(())
    }
}

fn region_query(features: &Matrix, i: usize, eps_sq: f64) -> Vec<usize> {
    let fi = features.row(i);
    (0..features.rows())
        .filter(|&j| sq_dist(fi, features.row(j)) <= eps_sq)
        .collect()
}

/// DBSCAN over Euclidean distance. A neighbourhood includes the point itself
/// and uses `dist <= eps`. Points are scanned in input order, so cluster ids
/// follow the first core point of each cluster and a border point joins the
/// first cluster that reaches it.
pub fn dbscan(features: &Matrix, params: DbscanParams) -> Result<ClusterAssignment> {
    params.validate()?;
    let n = features.rows();
    let eps_sq = params.eps * params.eps;

    let is_core: Vec<bool> = (0..n)
        .into_par_iter()
        .map(|i| {
            let fi = features.row(i);
            let mut count = 0;
            for j in 0..n {
                if sq_dist(fi, features.row(j)) <= eps_sq {
                    count += 1;
                    if count >= params.min_pts {
                        return true;
                    }
                }
            }
            false
        })
        .collect();

    let mut labels: Vec<Option<usize>> = vec![None; n];
    let mut expanded = vec![false; n];
    let mut n_clusters = 0;
    let mut stack = Vec::new();
    for seed in 0..n {
        if !is_core[seed] || labels[seed].is_some() {
            continue;
        }
        let cluster = n_clusters;
        n_clusters += 1;
        labels[seed] = Some(cluster);
        stack.push(seed);
        while let Some(p) = stack.pop() {
            if expanded[p] {
                continue;
            }
            expanded[p] = true;
            for q in region_query(features, p, eps_sq) {
                if labels[q].is_none() {
                    labels[q] = Some(cluster);
                    if is_core[q] {
                        stack.push(q);
                    }
                }
            }
        }
    }
    Ok(ClusterAssignment { labels, n_clusters })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignment: ClusterAssignment,
    pub centroids: Matrix,
    pub inertia: f64,
    pub iterations: usize,
}

fn nearest(centroids: &Matrix, x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, row) in centroids.iter_rows().enumerate() {
        let d = sq_dist(x, row);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn kmeans_pp_init(features: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let n = features.rows();
    let mut centroids = Matrix::zeros(k, features.cols());
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    centroids.row_mut(0).copy_from_slice(features.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(features.row(i), features.row(first))).collect();

    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if target < w {
                        break;
                    }
                    target -= w;
                }
            }
            pick.expect("positive total weight")
        } else {
            // every point coincides with a chosen centroid
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[pick] = true;
        centroids.row_mut(c).copy_from_slice(features.row(pick));
        for (i, w) in d2.iter_mut().enumerate() {
            *w = w.min(sq_dist(features.row(i), features.row(pick)));
        }
    }
    centroids
}

/// Lloyd's algorithm with k-means++ seeding. Stops at an assignment fixpoint
/// or after `max_iter` updates. An empty cluster is re-seeded with the point
/// farthest from its current centroid.
pub fn kmeans(features: &Matrix, k: usize, seed: u64, max_iter: usize) -> Result<KMeansResult> {
    let n = features.rows();
    if k == 0 {
        return Err(FsacError::invalid("k", "must be >= 1"));
    }
    if k > n {
        return Err(FsacError::invalid("k", format!("{k} clusters requested for {n} samples")));
    }
    let dim = features.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp_init(features, k, &mut rng);
    let mut labels: Vec<usize> = (0..n).map(|i| nearest(&centroids, features.row(i)).0).collect();
    let mut iterations = 0;

    while iterations < max_iter {
        iterations += 1;
        let mut sums = Matrix::zeros(k, dim);
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            axpy(1.0, features.row(i), sums.row_mut(l));
            counts[l] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                let (src, dst) = (sums.row(c).to_vec(), centroids.row_mut(c));
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s * inv;
                }
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .map(|i| (i, sq_dist(features.row(i), centroids.row(labels[i]))))
                    .fold((0, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
                centroids.row_mut(c).copy_from_slice(features.row(far.0));
                counts[labels[far.0]] -= 1;
                labels[far.0] = c;
                counts[c] = 1;
            }
        }
        let next: Vec<usize> = (0..n).map(|i| nearest(&centroids, features.row(i)).0).collect();
        if next == labels {
            break;
        }
        labels = next;
    }

    let inertia = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| sq_dist(features.row(i), centroids.row(l)))
        .sum();
    Ok(KMeansResult {
        assignment: ClusterAssignment {
            labels: labels.into_iter().map(Some).collect(),
            n_clusters: k,
        },
        centroids,
        inertia,
        iterations,
    })
}

/// Unit-norm reference feature for each cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentBank {
    pub agents: Matrix,
}

impl AgentBank {
    pub fn len(&self) -> usize {
        self.agents.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.agents.rows() == 0
    }
}

/// Agent `m` is the normalized mean of the members of cluster `m`.
pub fn compute_agents(features: &Matrix, assignment: &ClusterAssignment) -> Result<AgentBank> {
    if assignment.labels.len() != features.rows() {
        return Err(FsacError::DimensionMismatch {
            expected: features.rows(),
            found: assignment.labels.len(),
            context: Some("cluster labels".into()),
        });
    }
    if assignment.n_clusters == 0 {
        return Err(FsacError::NoClusters);
    }
    let mut agents = Matrix::zeros(assignment.n_clusters, features.cols());
    for (i, l) in assignment.labels.iter().enumerate() {
        if let Some(c) = l {
            axpy(1.0, features.row(i), agents.row_mut(*c));
        }
    }
    for c in 0..agents.rows() {
        normalize_in_place(agents.row_mut(c)).ok_or_else(|| {
            FsacError::invalid("features", format!("cluster {c} has a zero mean"))
        })?;
    }
    Ok(AgentBank { agents })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SoftLabel {
    pub probs: Vec<f64>,
    pub top_class: usize,
    pub top_prob: f64,
}

/// Softmax over `a_m . f / temperature`, with max subtraction.
pub fn soft_labels(feature: &[f64], agents: &AgentBank, temperature: f64) -> Result<SoftLabel> {
    if agents.is_empty() {
        return Err(FsacError::NoClusters);
    }
    if feature.len() != agents.agents.cols() {
        return Err(FsacError::DimensionMismatch {
            expected: agents.agents.cols(),
            found: feature.len(),
            context: Some("soft label feature".into()),
        });
    }
    let logits: Vec<f64> = agents.agents.iter_rows().map(|a| dot(a, feature) / temperature).collect();
    let probs = softmax(&logits);
    let (top_class, top_prob) = probs
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |b, (i, p)| if p > b.1 { (i, p) } else { b });
    Ok(SoftLabel {
        probs,
        top_class,
        top_prob,
    })
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Soft labels for every non-noise sample; noise samples get `None`.
pub fn soft_labels_for(
    features: &Matrix,
    assignment: &ClusterAssignment,
    agents: &AgentBank,
    temperature: f64,
) -> Result<Vec<Option<SoftLabel>>> {
    (0..features.rows())
        .into_par_iter()
        .map(|i| match assignment.labels[i] {
            Some(_) => soft_labels(features.row(i), agents, temperature).map(Some),
            None => Ok(None),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn normalize_rows() {
        let out = l2_normalize(&m(&[&[3.0, 4.0], &[1.0, 0.0]])).unwrap();
        assert!((out[(0, 0)] - 0.6).abs() < 1e-15 && (out[(0, 1)] - 0.8).abs() < 1e-15);
        assert_eq!(out.row(1), &[1.0, 0.0]);
        assert!(matches!(l2_normalize(&m(&[&[1.0, 0.0], &[0.0, 0.0]])), Err(FsacError::ZeroNorm(1))));
    }

    #[test]
    fn dbscan_two_groups() {
        let x = m(&[&[0.0], &[0.1], &[0.2], &[10.0], &[10.1]]);
        let a = dbscan(&x, DbscanParams { eps: 0.15, min_pts: 2 }).unwrap();
        assert_eq!(a.n_clusters, 2);
        assert_eq!(a.labels, vec![Some(0), Some(0), Some(0), Some(1), Some(1)]);
    }

    #[test]
    fn dbscan_identical_points_and_isolated_noise() {
        let x = m(&[&[1.0, 1.0][..]; 4]);
        let a = dbscan(&x, DbscanParams { eps: 0.1, min_pts: 4 }).unwrap();
        assert_eq!(a.n_clusters, 1);
        let x = m(&[&[0.0], &[0.05], &[5.0]]);
        let a = dbscan(&x, DbscanParams { eps: 0.1, min_pts: 2 }).unwrap();
        assert_eq!(a.labels[2], None);
        assert!(dbscan(&x, DbscanParams { eps: 0.0, min_pts: 2 }).is_err());
    }

    #[test]
    fn kmeans_k_equals_n() {
        let x = m(&[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 3.0], &[2.0, 2.0]]);
        let r = kmeans(&x, 4, 3, 100).unwrap();
        assert_eq!(r.inertia, 0.0);
        let mut seen: Vec<_> = r.assignment.labels.iter().map(|l| l.unwrap()).collect();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3]);
        assert!(kmeans(&x, 5, 3, 100).is_err());
    }

    #[test]
    fn kmeans_deterministic() {
        let rows: Vec<Vec<f64>> = (0..40).map(|i| vec![(i % 7) as f64, (i % 3) as f64 * 2.5]).collect();
        let x = Matrix::from_rows(&rows).unwrap();
        assert_eq!(kmeans(&x, 3, 9, 50).unwrap(), kmeans(&x, 3, 9, 50).unwrap());
    }

    #[test]
    fn agents() {
        let x = m(&[&[1.0, 0.0], &[0.0, 1.0], &[0.6, 0.8]]);
        let a = ClusterAssignment { labels: vec![Some(0), Some(0), Some(1)], n_clusters: 2 };
        let bank = compute_agents(&x, &a).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((bank.agents[(0, 0)] - h).abs() < 1e-12 && (bank.agents[(0, 1)] - h).abs() < 1e-12);
        assert_eq!(bank.agents.row(1), &[0.6, 0.8]);

        let noise = ClusterAssignment { labels: vec![None; 3], n_clusters: 0 };
        assert_eq!(compute_agents(&x, &noise).unwrap_err().to_string(), "no clusters");

        let cancel = m(&[&[1.0, 0.0], &[-1.0, 0.0]]);
        let a = ClusterAssignment { labels: vec![Some(0), Some(0)], n_clusters: 1 };
        assert!(compute_agents(&cancel, &a).is_err());
    }

    #[test]
    fn soft_label_values() {
        let one = AgentBank { agents: m(&[&[1.0, 0.0]]) };
        assert_eq!(soft_labels(&[0.3, 0.2], &one, 1.0).unwrap().probs, vec![1.0]);

        let two = AgentBank { agents: m(&[&[1.0, 0.0], &[0.0, 1.0]]) };
        let s = soft_labels(&[1.0, 0.0], &two, 1.0).unwrap();
        // e / (e + 1) and 1 / (e + 1)
        assert!((s.probs[0] - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((s.probs[1] - 0.268_941_421_369_995_1).abs() < 1e-12);
        assert_eq!(s.top_class, 0);

        let eq = soft_labels(&[0.5, 0.5], &two, 1.0).unwrap();
        assert_eq!(eq.probs, vec![0.5, 0.5]);
        assert_eq!(eq.top_class, 0);

        let empty = AgentBank { agents: Matrix::zeros(0, 2) };
        assert!(soft_labels(&[1.0, 0.0], &empty, 1.0).is_err());
    }
}
