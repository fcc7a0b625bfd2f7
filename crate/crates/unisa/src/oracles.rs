//! Independent reference computations used to cross-check the fast paths.
//!
//! Everything in here is deliberately naive: central finite differences
//! instead of the reverse pass, exhaustive enumeration instead of Lloyd
//! iterations, brute-force distance scans instead of pooled lookups. The test
//! suite freezes expected values against these, and the `oracle` CLI verb
//! prints them. None of these functions may call into the implementation
//! paths they are used to check.

use std::collections::BTreeMap;

use crate::tensor::DenseTensor;

/// Central finite-difference gradient of `f` with respect to every entry of
/// every parameter, at the given binding point.
///
/// `f` must be a pure function of the bindings. The default step is 1e-4.
pub fn finite_difference<F>(
    f: &mut F,
    at: &BTreeMap<String, DenseTensor>,
    step: f64,
) -> BTreeMap<String, DenseTensor>
where
    F: FnMut(&BTreeMap<String, DenseTensor>) -> f64,
{
    let mut out = BTreeMap::new();
    for (name, tensor) in at {
        let mut grad = vec![0.0; tensor.len()];
        for j in 0..tensor.len() {
            let mut plus = at.clone();
            let mut minus = at.clone();
            let mut dp = tensor.data().to_vec();
            let mut dm = tensor.data().to_vec();
            dp[j] += step;
            dm[j] -= step;
            plus.insert(
                name.clone(),
                DenseTensor::new(tensor.shape().to_vec(), dp).expect("finite nudge"),
            );
            minus.insert(
                name.clone(),
                DenseTensor::new(tensor.shape().to_vec(), dm).expect("finite nudge"),
            );
            grad[j] = (f(&plus) - f(&minus)) / (2.0 * step);
        }
        out.insert(
            name.clone(),
            DenseTensor::new(tensor.shape().to_vec(), grad).expect("finite gradient"),
        );
    }
    out
}

/// Norm-relative error between two gradient maps:
/// `||g - h||_2 / max(||h||_2, 1e-6)` over the concatenation of all blocks.
pub fn gradient_rel_err(
    g: &BTreeMap<String, DenseTensor>,
    h: &BTreeMap<String, DenseTensor>,
) -> f64 {
    let mut diff2 = 0.0;
    let mut ref2 = 0.0;
    for (name, gt) in g {
        let ht = h.get(name).expect("same parameter set");
        for (a, b) in gt.data().iter().zip(ht.data()) {
            diff2 += (a - b) * (a - b);
            ref2 += b * b;
        }
    }
    diff2.sqrt() / ref2.sqrt().max(1e-6)
}

/// Exhaustive two-cluster k-means optimum for up to 16 points: tries every
/// split into two non-empty groups and returns the minimal within-cluster
/// sum of squared distances together with the best centroids.
pub fn brute_force_two_means(points: &[Vec<f64>]) -> (f64, [Vec<f64>; 2]) {
    let n = points.len();
    assert!((2..=16).contains(&n), "enumeration needs 2..=16 points");
    let dim = points[0].len();
    let mut best = f64::INFINITY;
    let mut best_centroids = [vec![0.0; dim], vec![0.0; dim]];
    // Fix point 0 in group 0 to halve the enumeration.
    for mask in 0..(1u32 << (n - 1)) {
        let assign: Vec<usize> = (0..n)
            .map(|i| {
                if i == 0 {
                    0
                } else {
                    ((mask >> (i - 1)) & 1) as usize
                }
            })
            .collect();
        if !assign.contains(&1) {
            continue;
        }
        let mut centroids = [vec![0.0; dim], vec![0.0; dim]];
        let mut counts = [0usize; 2];
        for (p, &a) in points.iter().zip(&assign) {
            counts[a] += 1;
            for (c, x) in centroids[a].iter_mut().zip(p) {
                *c += x;
            }
        }
        for (c, &cnt) in centroids.iter_mut().zip(&counts) {
            for v in c.iter_mut() {
                *v /= cnt as f64;
            }
        }
        let sse: f64 = points
            .iter()
            .zip(&assign)
            .map(|(p, &a)| squared_distance(p, &centroids[a]))
            .sum();
        if sse < best {
            best = sse;
            best_centroids = centroids;
        }
    }
    (best, best_centroids)
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid by exhaustive scan; ties go to the lowest
/// index.
pub fn nearest_by_scan(z: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = squared_distance(z, c);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Maximum-weight assignment between rows and columns of a square matrix
/// (Hungarian algorithm, O(n^3)). Returns the column matched to each row and
/// the total weight.
pub fn hungarian_max(weights: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let n = weights.len();
    assert!(n > 0 && weights.iter().all(|r| r.len() == n));
    let big = weights
        .iter()
        .flatten()
        .cloned()
        .fold(0.0f64, f64::max);
    // Minimize cost = big - weight with the potentials formulation.
    let cost = |i: usize, j: usize| big - weights[i][j];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1]; // column -> row (1-based rows)
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    let total = (0..n).map(|i| weights[i][row_to_col[i]]).sum();
    (row_to_col, total)
}

/// Clustering accuracy under the best cluster-to-class permutation.
///
/// Builds the confusion matrix between predicted cluster ids and true class
/// ids (padded square) and maximizes the matched count with `hungarian_max`.
pub fn matched_clustering_accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    assert_eq!(pred.len(), truth.len());
    assert!(!pred.is_empty());
    let k = pred
        .iter()
        .chain(truth)
        .cloned()
        .max()
        .expect("non-empty")
        + 1;
    let mut counts = vec![vec![0.0; k]; k];
    for (&p, &t) in pred.iter().zip(truth) {
        counts[p][t] += 1.0;
    }
    let (_, total) = hungarian_max(&counts);
    total / pred.len() as f64
}

/// Kolmogorov-Smirnov statistic of a sample against a CDF.
pub fn ks_statistic(samples: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
    let n = samples.len() as f64;
    let mut sup: f64 = 0.0;
    for (i, &x) in samples.iter().enumerate() {
        let f = cdf(x);
        sup = sup.max((((i + 1) as f64) / n - f).abs());
        sup = sup.max((f - (i as f64) / n).abs());
    }
    sup
}

/// Mean of |N(0, sigma^2)|: sigma * sqrt(2/pi).
pub fn half_normal_mean(sigma: f64) -> f64 {
    sigma * (2.0 / std::f64::consts::PI).sqrt()
}

/// KL divergence of a probability vector from the uniform distribution,
/// summed term by term. Zero-probability entries contribute zero.
pub fn kl_from_uniform_direct(p: &[f64]) -> f64 {
    let m = p.len() as f64;
    p.iter()
        .filter(|&&pi| pi > 0.0)
        .map(|&pi| pi * (pi * m).ln())
        .sum()
}

/// Ordinary least squares for y = a*x + c, with the coefficient of
/// determination.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    assert_eq!(xs.len(), ys.len());
    assert!(xs.len() >= 2);
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let e = y - (slope * x + intercept);
            e * e
        })
        .sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    (slope, intercept, r2)
}
