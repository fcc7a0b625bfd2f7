//! K-means pseudo-labeling, per-cluster statistics for the ball sampler,
//! batch prototypes, and the anchor-resolved cluster-to-class mapping used
//! only at inference.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, ModelState, NetworkPath};
use crate::tensor::DenseTensor;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("no points to cluster")]
    EmptyInput,
    #[error("{requested} clusters requested but only {distinct} distinct points")]
    TooFewPoints { distinct: usize, requested: usize },
    #[error("max_iters must be >= 1")]
    ZeroIters,
    #[error("pseudo-label {label} out of range for {n_clusters} clusters")]
    LabelOutOfRange { label: usize, n_clusters: usize },
    #[error("empty cluster set")]
    EmptyClusterSet,
    #[error("no labeled anchors supplied")]
    NoAnchors,
    #[error("cluster set has no class map")]
    MissingClassMap,
    #[error("point dimension {got} does not match centroids ({expected})")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("batch prototype for cluster {0} has degenerate norm")]
    DegenerateProto(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Per-task cluster statistics: centroids, the scalar spread used as the
/// ball radius, member counts, and (after anchoring) the cluster-to-class
/// mapping. Immutable after construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSet {
    pub centroids: Vec<Vec<f64>>,
    pub stds: Vec<f64>,
    pub counts: Vec<usize>,
    pub class_map: Option<BTreeMap<usize, usize>>,
}

impl ClusterSet {
    pub fn n_clusters(&self) -> usize {
        self.centroids.len()
    }

    pub fn dim(&self) -> usize {
        self.centroids.first().map_or(0, |c| c.len())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Sum of squared distances from each point to its assigned centroid.
pub fn inertia(points: &[Vec<f64>], centroids: &[Vec<f64>], assignments: &[usize]) -> f64 {
    points
        .iter()
        .zip(assignments)
        .map(|(p, &a)| squared_distance(p, &centroids[a]))
        .sum()
}

/// Lloyd iterations with distance-squared weighted seeding.
///
/// The within-cluster objective is checked to be non-increasing on every
/// iteration. Terminates when the largest centroid movement drops below
/// `tol` or after `max_iters` passes. Cluster spreads are the mean over
/// dimensions of the per-dimension standard deviation of members; clusters
/// with fewer than two members fall back to 0.1 times the median pairwise
/// centroid distance.
pub fn kmeans(
    points: &[Vec<f64>],
    n_clusters: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
) -> Result<(ClusterSet, Vec<usize>), ClusterError> {
    if points.is_empty() {
        return Err(ClusterError::EmptyInput);
    }
    if max_iters == 0 {
        return Err(ClusterError::ZeroIters);
    }
    let distinct: BTreeSet<Vec<u64>> = points
        .iter()
        .map(|p| p.iter().map(|v| v.to_bits()).collect())
        .collect();
    if n_clusters == 0 || distinct.len() < n_clusters {
        return Err(ClusterError::TooFewPoints {
            distinct: distinct.len(),
            requested: n_clusters,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_seed(points, n_clusters, &mut rng);
    let mut assignments = vec![0usize; points.len()];

    lloyd_loop(points, &mut centroids, &mut assignments, max_iters, tol);
    // escape assignment-level local optima that Lloyd cannot leave, then
    // re-converge so assignments are nearest-centroid again
    hartigan_refine(points, &mut centroids, &mut assignments);
    lloyd_loop(points, &mut centroids, &mut assignments, max_iters, tol);

    let mut counts = vec![0usize; n_clusters];
    for &a in &assignments {
        counts[a] += 1;
    }
    let stds = cluster_stds(points, &assignments, &centroids, &counts);
    Ok((
        ClusterSet {
            centroids,
            stds,
            counts,
            class_map: None,
        },
        assignments,
    ))
}

/// Best of `restarts` seeded runs by final inertia. Runs are independent,
/// so callers may parallelize across seeds if they wish.
pub fn kmeans_restarts(
    points: &[Vec<f64>],
    n_clusters: usize,
    seed: u64,
    restarts: usize,
    max_iters: usize,
    tol: f64,
) -> Result<(ClusterSet, Vec<usize>), ClusterError> {
    let mut best: Option<(f64, ClusterSet, Vec<usize>)> = None;
    for r in 0..restarts.max(1) {
        let (set, assignments) = kmeans(
            points,
            n_clusters,
            seed.wrapping_add(r as u64),
            max_iters,
            tol,
        )?;
        let objective = inertia(points, &set.centroids, &assignments);
        if best.as_ref().is_none_or(|(b, _, _)| objective < *b) {
            best = Some((objective, set, assignments));
        }
    }
    let (_, set, assignments) = best.expect("at least one restart");
    Ok((set, assignments))
}

fn plus_plus_seed(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let first = rng.random_range(0..points.len());
    let mut centroids = vec![points[first].clone()];
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| squared_distance(p, &centroids[0]))
        .collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            d2.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite distances"))
                .map(|(i, _)| i)
                .expect("non-empty")
        } else {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        };
        centroids.push(points[next].clone());
        for (i, p) in points.iter().enumerate() {
            let d = squared_distance(p, centroids.last().expect("just pushed"));
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    centroids
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = squared_distance(p, c);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Assign-update iterations until the largest centroid movement drops below
/// `tol` or `max_iters` passes run out, with the objective checked
/// non-increasing every iteration. Ends on an assignment pass, so every
/// point sits with its nearest centroid (ties to the lowest id).
fn lloyd_loop(
    points: &[Vec<f64>],
    centroids: &mut Vec<Vec<f64>>,
    assignments: &mut [usize],
    max_iters: usize,
    tol: f64,
) {
    let n_clusters = centroids.len();
    let mut prev_objective = f64::INFINITY;
    for _ in 0..max_iters {
        for (i, p) in points.iter().enumerate() {
            assignments[i] = nearest(p, centroids);
        }
        repair_empty_clusters(points, centroids, assignments);

        let objective = inertia(points, centroids, assignments);
        assert!(
            objective <= prev_objective + 1e-9 * prev_objective.max(1.0),
            "k-means objective increased: {prev_objective} -> {objective}"
        );
        prev_objective = objective;

        let new_centroids = means(points, assignments, n_clusters, centroids);
        let shift = centroids
            .iter()
            .zip(&new_centroids)
            .map(|(a, b)| squared_distance(a, b).sqrt())
            .fold(0.0f64, f64::max);
        *centroids = new_centroids;
        if shift < tol {
            break;
        }
    }
    for (i, p) in points.iter().enumerate() {
        assignments[i] = nearest(p, centroids);
    }
    repair_empty_clusters(points, centroids, assignments);
}

/// Single-point move refinement after Lloyd convergence. Moving x from
/// cluster A (size nA > 1) to B improves the objective exactly when
/// `nB/(nB+1) d(x, muB)^2 < nA/(nA-1) d(x, muA)^2`; applying first-improving
/// moves until none remain escapes assignment-level local optima that Lloyd
/// cannot leave. Strictly objective-decreasing.
fn hartigan_refine(points: &[Vec<f64>], centroids: &mut [Vec<f64>], assignments: &mut [usize]) {
    let k = centroids.len();
    if k < 2 {
        return;
    }
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignments.iter()) {
        counts[a] += 1;
        for (s, x) in sums[a].iter_mut().zip(p) {
            *s += x;
        }
    }
    let mean_d2 = |sums: &[Vec<f64>], counts: &[usize], c: usize, p: &[f64]| -> f64 {
        let n = counts[c] as f64;
        p.iter()
            .zip(&sums[c])
            .map(|(x, s)| {
                let m = s / n;
                (x - m) * (x - m)
            })
            .sum()
    };
    for _sweep in 0..100 {
        let mut moved = false;
        for (i, p) in points.iter().enumerate() {
            let a = assignments[i];
            if counts[a] <= 1 {
                continue;
            }
            let na = counts[a] as f64;
            let removal_gain = na / (na - 1.0) * mean_d2(&sums, &counts, a, p);
            let mut best: Option<(usize, f64)> = None;
            for b in 0..k {
                if b == a {
                    continue;
                }
                let nb = counts[b] as f64;
                let insert_cost = nb / (nb + 1.0) * mean_d2(&sums, &counts, b, p);
                let delta = insert_cost - removal_gain;
                if delta < -1e-12 && best.is_none_or(|(_, d)| delta < d) {
                    best = Some((b, delta));
                }
            }
            if let Some((b, _)) = best {
                counts[a] -= 1;
                counts[b] += 1;
                for (sa, x) in sums[a].iter_mut().zip(p) {
                    *sa -= x;
                }
                for (sb, x) in sums[b].iter_mut().zip(p) {
                    *sb += x;
                }
                assignments[i] = b;
                moved = true;
            }
        }
        if !moved {
            break;
        }
    }
    for c in 0..k {
        if counts[c] > 0 {
            for (m, s) in centroids[c].iter_mut().zip(&sums[c]) {
                *m = s / counts[c] as f64;
            }
        }
    }
}

/// Moves each empty cluster onto the point currently farthest from its own
/// centroid, which strictly reduces the objective.
fn repair_empty_clusters(
    points: &[Vec<f64>],
    centroids: &mut [Vec<f64>],
    assignments: &mut [usize],
) {
    loop {
        let mut counts = vec![0usize; centroids.len()];
        for &a in assignments.iter() {
            counts[a] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let (far_idx, _) = points
            .iter()
            .enumerate()
            .map(|(i, p)| (i, squared_distance(p, &centroids[assignments[i]])))
            .max_by(|a, b| a.1.partial_cmp(&b.1).expect("finite distances"))
            .expect("non-empty points");
        centroids[empty] = points[far_idx].clone();
        assignments[far_idx] = empty;
    }
}

fn means(
    points: &[Vec<f64>],
    assignments: &[usize],
    k: usize,
    fallback: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignments) {
        counts[a] += 1;
        for (s, x) in sums[a].iter_mut().zip(p) {
            *s += x;
        }
    }
    sums.into_iter()
        .enumerate()
        .map(|(i, mut s)| {
            if counts[i] == 0 {
                fallback[i].clone()
            } else {
                for v in s.iter_mut() {
                    *v /= counts[i] as f64;
                }
                s
            }
        })
        .collect()
}

fn cluster_stds(
    points: &[Vec<f64>],
    assignments: &[usize],
    centroids: &[Vec<f64>],
    counts: &[usize],
) -> Vec<f64> {
    let k = centroids.len();
    let dim = centroids[0].len();
    let mut sq = vec![vec![0.0; dim]; k];
    for (p, &a) in points.iter().zip(assignments) {
        for (s, (x, c)) in sq[a].iter_mut().zip(p.iter().zip(&centroids[a])) {
            *s += (x - c) * (x - c);
        }
    }
    let degenerate_fallback = {
        let mut pairwise: Vec<f64> = Vec::new();
        for i in 0..k {
            for j in i + 1..k {
                pairwise.push(squared_distance(&centroids[i], &centroids[j]).sqrt());
            }
        }
        pairwise.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
        if pairwise.is_empty() {
            0.0
        } else {
            0.1 * pairwise[pairwise.len() / 2]
        }
    };
    (0..k)
        .map(|c| {
            if counts[c] < 2 {
                degenerate_fallback
            } else {
                let n = counts[c] as f64;
                sq[c].iter().map(|s| (s / n).sqrt()).sum::<f64>() / dim as f64
            }
        })
        .collect()
}

/// Per-cluster mean of member embeddings, L2-normalized. Clusters with no
/// members in the batch come back as `None` and are excluded from the
/// scattering sums for that batch.
pub fn batch_prototypes(
    embeddings: &[Vec<f64>],
    pseudo_labels: &[usize],
    n_clusters: usize,
) -> Result<Vec<Option<Vec<f64>>>, ClusterError> {
    if embeddings.is_empty() {
        return Err(ClusterError::EmptyInput);
    }
    if let Some(&bad) = pseudo_labels.iter().find(|&&l| l >= n_clusters) {
        return Err(ClusterError::LabelOutOfRange {
            label: bad,
            n_clusters,
        });
    }
    let dim = embeddings[0].len();
    let mut sums = vec![vec![0.0; dim]; n_clusters];
    let mut counts = vec![0usize; n_clusters];
    for (e, &l) in embeddings.iter().zip(pseudo_labels) {
        counts[l] += 1;
        for (s, x) in sums[l].iter_mut().zip(e) {
            *s += x;
        }
    }
    sums.into_iter()
        .enumerate()
        .map(|(c, mut s)| {
            if counts[c] == 0 {
                return Ok(None);
            }
            for v in s.iter_mut() {
                *v /= counts[c] as f64;
            }
            let norm = s.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm <= 1e-12 {
                return Err(ClusterError::DegenerateProto(c));
            }
            for v in s.iter_mut() {
                *v /= norm;
            }
            Ok(Some(s))
        })
        .collect()
}

/// Nearest centroid by squared Euclidean distance; ties go to the lowest
/// cluster id.
pub fn assign(z: &[f64], clusters: &ClusterSet) -> Result<usize, ClusterError> {
    if clusters.centroids.is_empty() {
        return Err(ClusterError::EmptyClusterSet);
    }
    if z.len() != clusters.dim() {
        return Err(ClusterError::DimensionMismatch {
            expected: clusters.dim(),
            got: z.len(),
        });
    }
    Ok(nearest(z, &clusters.centroids))
}

/// Labels each cluster by majority class over the anchors assigned to it;
/// anchorless clusters inherit the class of the nearest anchor-bearing
/// centroid. All ties break toward the smallest class id.
pub fn map_clusters_to_classes(
    clusters: &ClusterSet,
    anchors: &[(Vec<f64>, usize)],
) -> Result<ClusterSet, ClusterError> {
    if anchors.is_empty() {
        return Err(ClusterError::NoAnchors);
    }
    let k = clusters.n_clusters();
    let mut votes: Vec<BTreeMap<usize, usize>> = vec![BTreeMap::new(); k];
    for (z, class) in anchors {
        let c = assign(z, clusters)?;
        *votes[c].entry(*class).or_insert(0) += 1;
    }
    let mut class_map = BTreeMap::new();
    for (c, vote) in votes.iter().enumerate() {
        if vote.is_empty() {
            continue;
        }
        // max count; on equal counts the smaller class id wins
        let best = vote
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(class, _)| *class)
            .expect("non-empty votes");
        class_map.insert(c, best);
    }
    let anchored: Vec<usize> = class_map.keys().cloned().collect();
    for c in 0..k {
        if class_map.contains_key(&c) {
            continue;
        }
        let mut best_d = f64::INFINITY;
        let mut best_class: Option<usize> = None;
        for &other in &anchored {
            let class = class_map[&other];
            let d = squared_distance(&clusters.centroids[c], &clusters.centroids[other]);
            if d < best_d || (d == best_d && best_class.is_none_or(|bc| class < bc)) {
                best_d = d;
                best_class = Some(class);
            }
        }
        let inherited = best_class.ok_or(ClusterError::NoAnchors)?;
        class_map.insert(c, inherited);
    }
    let mut out = clusters.clone();
    out.class_map = Some(class_map);
    Ok(out)
}

/// Single-head inference: embeds through the target network and head, pools
/// every session's centroids, and returns the class of the nearest one.
pub fn classify(
    state: &ModelState,
    accumulated: &[ClusterSet],
    x: &DenseTensor,
) -> Result<usize, ClusterError> {
    if accumulated.is_empty() {
        return Err(ClusterError::EmptyClusterSet);
    }
    for set in accumulated {
        if set.class_map.is_none() {
            return Err(ClusterError::MissingClassMap);
        }
    }
    let z = state.embed_head(x, NetworkPath::Target)?;
    classify_embedding(z.data(), accumulated)
}

/// Pooled nearest-centroid lookup over an already-embedded input.
/// Exact-distance ties break toward the smallest class id, so the result
/// does not depend on the order the sets are pooled in.
pub fn classify_embedding(z: &[f64], accumulated: &[ClusterSet]) -> Result<usize, ClusterError> {
    let mut best_d = f64::INFINITY;
    let mut best_class: Option<usize> = None;
    for set in accumulated {
        let map = set.class_map.as_ref().ok_or(ClusterError::MissingClassMap)?;
        for (c, centroid) in set.centroids.iter().enumerate() {
            if z.len() != centroid.len() {
                return Err(ClusterError::DimensionMismatch {
                    expected: centroid.len(),
                    got: z.len(),
                });
            }
            let class = *map.get(&c).ok_or(ClusterError::MissingClassMap)?;
            let d = squared_distance(z, centroid);
            if d < best_d || (d == best_d && best_class.is_none_or(|bc| class < bc)) {
                best_d = d;
                best_class = Some(class);
            }
        }
    }
    best_class.ok_or(ClusterError::EmptyClusterSet)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles;

    #[test]
    fn k_equals_point_count_puts_centroids_on_points() {
        let pts = vec![vec![0.0, 0.0], vec![10.0, 10.0]];
        let (set, assignments) = kmeans(&pts, 2, 0, 50, 1e-9).unwrap();
        assert!((inertia(&pts, &set.centroids, &assignments)).abs() < 1e-12);
        let mut sorted = set.centroids.clone();
        sorted.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
        assert_eq!(sorted, pts);
    }

    #[test]
    fn rectangle_matches_brute_force_partition() {
        let pts = vec![
            vec![0.0, 0.0],
            vec![0.0, 1.0],
            vec![10.0, 0.0],
            vec![10.0, 1.0],
        ];
        let (set, assignments) = kmeans_restarts(&pts, 2, 0, 10, 100, 1e-9).unwrap();
        let obj = inertia(&pts, &set.centroids, &assignments);
        let (best, _) = oracles::brute_force_two_means(&pts);
        assert!((obj - best).abs() < 1e-9);
        let mut xs: Vec<f64> = set.centroids.iter().map(|c| c[0]).collect();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((xs[0] - 0.0).abs() < 1e-12 && (xs[1] - 10.0).abs() < 1e-12);
        assert!(set.centroids.iter().all(|c| (c[1] - 0.5).abs() < 1e-12));
    }

    #[test]
    fn too_few_distinct_points_is_an_error() {
        let pts = vec![vec![1.0, 1.0], vec![1.0, 1.0], vec![2.0, 2.0]];
        assert!(matches!(
            kmeans(&pts, 3, 0, 10, 1e-9).unwrap_err(),
            ClusterError::TooFewPoints { distinct: 2, requested: 3 }
        ));
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(matches!(
            kmeans(&[], 1, 0, 10, 1e-9).unwrap_err(),
            ClusterError::EmptyInput
        ));
    }

    #[test]
    fn small_instances_reach_global_optimum_with_restarts() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for case in 0..30 {
            let n = rng.random_range(2..=8);
            let pts: Vec<Vec<f64>> = (0..n)
                .map(|_| vec![rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)])
                .collect();
            let distinct: std::collections::BTreeSet<Vec<u64>> = pts
                .iter()
                .map(|p| p.iter().map(|v| v.to_bits()).collect())
                .collect();
            if distinct.len() < 2 {
                continue;
            }
            let (set, assignments) = kmeans_restarts(&pts, 2, case, 20, 200, 1e-12).unwrap();
            let obj = inertia(&pts, &set.centroids, &assignments);
            let (best, _) = oracles::brute_force_two_means(&pts);
            assert!(obj <= best + 1e-9, "case {case}: {obj} > {best}");
        }
    }

    #[test]
    fn prototypes_of_singletons_are_normalized_members() {
        let embeddings = vec![vec![3.0, 4.0], vec![0.0, 2.0]];
        let protos = batch_prototypes(&embeddings, &[0, 1], 2).unwrap();
        let p0 = protos[0].as_ref().unwrap();
        assert!((p0[0] - 0.6).abs() < 1e-12 && (p0[1] - 0.8).abs() < 1e-12);
        let p1 = protos[1].as_ref().unwrap();
        assert!((p1[0]).abs() < 1e-12 && (p1[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn prototypes_of_identical_members_match_single_member() {
        let embeddings = vec![vec![1.0, 1.0], vec![1.0, 1.0]];
        let protos = batch_prototypes(&embeddings, &[0, 0], 1).unwrap();
        let p = protos[0].as_ref().unwrap();
        let s = (0.5f64).sqrt();
        assert!((p[0] - s).abs() < 1e-12 && (p[1] - s).abs() < 1e-12);
    }

    #[test]
    fn prototype_means_match_direct_averaging() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let embeddings: Vec<Vec<f64>> = (0..40)
            .map(|_| (0..6).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let labels: Vec<usize> = (0..40).map(|_| rng.random_range(0..4)).collect();
        let protos = batch_prototypes(&embeddings, &labels, 4).unwrap();
        for c in 0..4 {
            let members: Vec<&Vec<f64>> = embeddings
                .iter()
                .zip(&labels)
                .filter(|(_, &l)| l == c)
                .map(|(e, _)| e)
                .collect();
            if members.is_empty() {
                assert!(protos[c].is_none());
                continue;
            }
            let mut mean = vec![0.0; 6];
            for m in &members {
                for (s, x) in mean.iter_mut().zip(m.iter()) {
                    *s += x;
                }
            }
            for v in mean.iter_mut() {
                *v /= members.len() as f64;
            }
            let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
            let got = protos[c].as_ref().unwrap();
            let got_norm = got.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((got_norm - 1.0).abs() < 1e-10);
            for (g, m) in got.iter().zip(&mean) {
                assert!((g - m / norm).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn prototype_label_out_of_range() {
        let embeddings = vec![vec![1.0, 0.0]];
        assert!(matches!(
            batch_prototypes(&embeddings, &[5], 2).unwrap_err(),
            ClusterError::LabelOutOfRange { label: 5, n_clusters: 2 }
        ));
    }

    fn simple_set() -> ClusterSet {
        ClusterSet {
            centroids: vec![vec![0.0, 0.0], vec![4.0, 0.0]],
            stds: vec![0.5, 0.5],
            counts: vec![3, 3],
            class_map: None,
        }
    }

    #[test]
    fn assign_examples() {
        let set = simple_set();
        assert_eq!(assign(&[0.0, 0.0], &set).unwrap(), 0);
        assert_eq!(assign(&[4.0, 0.0], &set).unwrap(), 1);
        // equidistant: lowest id wins
        assert_eq!(assign(&[2.0, 0.0], &set).unwrap(), 0);
        let empty = ClusterSet {
            centroids: vec![],
            stds: vec![],
            counts: vec![],
            class_map: None,
        };
        assert!(matches!(
            assign(&[0.0, 0.0], &empty).unwrap_err(),
            ClusterError::EmptyClusterSet
        ));
    }

    #[test]
    fn assign_matches_exhaustive_scan() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let centroids: Vec<Vec<f64>> = (0..7)
            .map(|_| (0..4).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect();
        let set = ClusterSet {
            centroids: centroids.clone(),
            stds: vec![1.0; 7],
            counts: vec![1; 7],
            class_map: None,
        };
        for _ in 0..100 {
            let z: Vec<f64> = (0..4).map(|_| rng.random_range(-4.0..4.0)).collect();
            assert_eq!(
                assign(&z, &set).unwrap(),
                oracles::nearest_by_scan(&z, &centroids)
            );
        }
    }

    #[test]
    fn anchors_at_centroids_give_identity_mapping() {
        let set = simple_set();
        let anchors = vec![(vec![0.0, 0.0], 7usize), (vec![4.0, 0.0], 9usize)];
        let mapped = map_clusters_to_classes(&set, &anchors).unwrap();
        let map = mapped.class_map.unwrap();
        assert_eq!(map[&0], 7);
        assert_eq!(map[&1], 9);
    }

    #[test]
    fn majority_vote_wins() {
        let set = simple_set();
        let anchors = vec![
            (vec![0.1, 0.0], 1usize),
            (vec![-0.1, 0.0], 1usize),
            (vec![0.0, 0.1], 2usize),
            (vec![4.0, 0.0], 3usize),
        ];
        let mapped = map_clusters_to_classes(&set, &anchors).unwrap();
        assert_eq!(mapped.class_map.unwrap()[&0], 1);
    }

    #[test]
    fn anchorless_cluster_inherits_nearest_anchored_class() {
        let set = ClusterSet {
            centroids: vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![10.0, 0.0]],
            stds: vec![0.5; 3],
            counts: vec![2; 3],
            class_map: None,
        };
        // anchors only on clusters 0 and 2
        let anchors = vec![(vec![0.0, 0.0], 5usize), (vec![10.0, 0.0], 8usize)];
        let mapped = map_clusters_to_classes(&set, &anchors).unwrap();
        let map = mapped.class_map.unwrap();
        assert_eq!(map[&1], 5, "cluster 1 sits next to the class-5 centroid");
        // oracle: nearest anchored centroid by scan
        let anchored = vec![set.centroids[0].clone(), set.centroids[2].clone()];
        let nearest = oracles::nearest_by_scan(&set.centroids[1], &anchored);
        assert_eq!(nearest, 0);
    }

    #[test]
    fn no_anchors_is_an_error() {
        let set = simple_set();
        assert!(matches!(
            map_clusters_to_classes(&set, &[]).unwrap_err(),
            ClusterError::NoAnchors
        ));
    }

    #[test]
    fn classify_embedding_agrees_with_pooled_scan_and_ignores_order() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let mk = |rng: &mut rand_chacha::ChaCha8Rng, k: usize, class0: usize| {
            let centroids: Vec<Vec<f64>> = (0..k)
                .map(|_| (0..3).map(|_| rng.random_range(-3.0..3.0)).collect())
                .collect();
            let class_map: BTreeMap<usize, usize> =
                (0..k).map(|c| (c, class0 + c)).collect();
            ClusterSet {
                centroids,
                stds: vec![1.0; k],
                counts: vec![2; k],
                class_map: Some(class_map),
            }
        };
        let a = mk(&mut rng, 4, 0);
        let b = mk(&mut rng, 3, 4);
        let pooled: Vec<Vec<f64>> = a
            .centroids
            .iter()
            .chain(b.centroids.iter())
            .cloned()
            .collect();
        let pooled_classes: Vec<usize> = (0..4).chain(4..7).collect();
        for _ in 0..200 {
            let z: Vec<f64> = (0..3).map(|_| rng.random_range(-4.0..4.0)).collect();
            let got = classify_embedding(&z, &[a.clone(), b.clone()]).unwrap();
            let swapped = classify_embedding(&z, &[b.clone(), a.clone()]).unwrap();
            let want = pooled_classes[oracles::nearest_by_scan(&z, &pooled)];
            assert_eq!(got, want);
            assert_eq!(got, swapped);
        }
    }

    #[test]
    fn classify_requires_class_maps() {
        let set = simple_set();
        assert!(matches!(
            classify_embedding(&[0.0, 0.0], &[set]).unwrap_err(),
            ClusterError::MissingClassMap
        ));
    }

    #[test]
    fn single_cluster_classifies_everything_the_same() {
        let set = ClusterSet {
            centroids: vec![vec![1.0, 1.0]],
            stds: vec![0.1],
            counts: vec![5],
            class_map: Some([(0usize, 3usize)].into_iter().collect()),
        };
        for z in [[100.0, -30.0], [0.0, 0.0], [1.0, 1.0]] {
            assert_eq!(classify_embedding(&z, &[set.clone()]).unwrap(), 3);
        }
    }

    #[test]
    fn cluster_set_json_roundtrip() {
        let set = ClusterSet {
            centroids: vec![vec![0.5, -1.25]],
            stds: vec![0.75],
            counts: vec![4],
            class_map: Some([(0usize, 2usize)].into_iter().collect()),
        };
        let back = ClusterSet::from_json(&set.to_json()).unwrap();
        assert_eq!(set, back);
    }
}
