//! Synthetic datasets, N-way K-shot task splitting with disjoint class sets,
//! labeled-anchor selection, and the stochastic two-view augmentation.
//!
//! Ground-truth labels ride along in every task for evaluation, but the
//! training loops only ever see them through the anchor lists.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("need {needed} classes but dataset has {available}")]
    NotEnoughClasses { needed: usize, available: usize },
    #[error("class {class} has {available} train samples, need {needed}")]
    NotEnoughSamples {
        class: usize,
        needed: usize,
        available: usize,
    },
    #[error("csv parse error at line {line}: {message}")]
    CsvParse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Feature vectors with integer class labels. `image_shape` is set by the
/// image generator so augmentation knows how to flip.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub dim: usize,
    pub n_classes: usize,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub image_shape: Option<(usize, usize, usize)>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

/// Gaussian blobs around class means placed on a sphere with a minimum
/// pairwise separation. Deterministic in the seed.
pub fn generate_blobs(
    n_classes: usize,
    dim: usize,
    samples_per_class: usize,
    class_sep: f64,
    cluster_std: f64,
    seed: u64,
) -> Result<LabeledDataset, DataError> {
    if n_classes < 2 {
        return Err(DataError::InvalidConfig("n_classes must be >= 2".into()));
    }
    if dim < 2 {
        return Err(DataError::InvalidConfig("dim must be >= 2".into()));
    }
    if samples_per_class == 0 {
        return Err(DataError::InvalidConfig(
            "samples_per_class must beat least 1".into(),
        ));
    }
    if !(class_sep > 0.0) {
        return Err(DataError::InvalidConfig("class_sep must be > 0".into()));
    }
    if cluster_std < 0.0 {
        return Err(DataError::InvalidConfig("cluster_std must be >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means = place_means(n_classes, dim, class_sep, &mut rng);

    let mut features = Vec::with_capacity(n_classes * samples_per_class);
    let mut labels = Vec::with_capacity(n_classes * samples_per_class);
    for (class, mean) in means.iter().enumerate() {
        for _ in 0..samples_per_class {
            let sample: Vec<f64> = mean
                .iter()
                .map(|&m| {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    m + cluster_std * n
                })
                .collect();
            features.push(sample);
            labels.push(class);
        }
    }
    Ok(LabeledDataset {
        dim,
        n_classes,
        features,
        labels,
        image_shape: None,
    })
}

/// Rejection-samples class means on a sphere, growing the radius until all
/// pairwise distances clear the separation.
fn place_means(n_classes: usize, dim: usize, class_sep: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut radius = class_sep.max(1e-6);
    loop {
        let mut means: Vec<Vec<f64>> = Vec::with_capacity(n_classes);
        let mut ok = true;
        'placement: for _ in 0..n_classes {
            for _attempt in 0..200 {
                let candidate = random_sphere_point(dim, radius, rng);
                let clear = means
                    .iter()
                    .all(|m| squared_distance(m, &candidate).sqrt() >= class_sep);
                if clear {
                    means.push(candidate);
                    continue 'placement;
                }
            }
            ok = false;
            break;
        }
        if ok {
            return means;
        }
        radius *= 1.5;
    }
}

fn random_sphere_point(dim: usize, radius: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x * radius / norm).collect();
        }
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Tiny procedurally textured grayscale images: each class is a sinusoidal
/// grating with its own orientation and frequency, randomized in phase, plus
/// pixel noise. Exercises the conv extractor and flip augmentation.
pub fn generate_textured_images(
    n_classes: usize,
    side: usize,
    samples_per_class: usize,
    noise_std: f64,
    seed: u64,
) -> Result<LabeledDataset, DataError> {
    if n_classes < 2 {
        return Err(DataError::InvalidConfig("n_classes must be >= 2".into()));
    }
    if side < 8 {
        return Err(DataError::InvalidConfig("side must be >= 8".into()));
    }
    if samples_per_class == 0 {
        return Err(DataError::InvalidConfig(
            "samples_per_class must be at least 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = side * side;
    let mut features = Vec::with_capacity(n_classes * samples_per_class);
    let mut labels = Vec::with_capacity(n_classes * samples_per_class);
    for class in 0..n_classes {
        let angle = std::f64::consts::PI * class as f64 / n_classes as f64;
        let freq = 2.0 + (class % 3) as f64;
        let (ca, sa) = (angle.cos(), angle.sin());
        for _ in 0..samples_per_class {
            let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let mut img = Vec::with_capacity(dim);
            for y in 0..side {
                for x in 0..side {
                    let proj = (x as f64 * ca + y as f64 * sa) / side as f64;
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    img.push((std::f64::consts::TAU * freq * proj + phase).sin() + noise_std * noise);
                }
            }
            features.push(img);
            labels.push(class);
        }
    }
    Ok(LabeledDataset {
        dim,
        n_classes,
        features,
        labels,
        image_shape: Some((1, side, side)),
    })
}

/// One task's data. `train_truth` holds the hidden ground-truth labels for
/// evaluation oracles only; training consumes `train` and `anchors`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub train: Vec<Vec<f64>>,
    pub train_truth: Vec<usize>,
    pub test: Vec<(Vec<f64>, usize)>,
    pub anchors: Vec<(Vec<f64>, usize)>,
    pub class_ids: Vec<usize>,
}

/// The base task plus the ordered few-shot tasks; class sets are pairwise
/// disjoint by construction (asserted).
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSequence {
    pub base: TaskData,
    pub fewshot: Vec<TaskData>,
    pub image_shape: Option<(usize, usize, usize)>,
    pub input_dim: usize,
}

impl TaskSequence {
    pub fn n_sessions(&self) -> usize {
        1 + self.fewshot.len()
    }

    fn assert_disjoint(&self) {
        let mut seen: BTreeSet<usize> = BTreeSet::new();
        for task in std::iter::once(&self.base).chain(&self.fewshot) {
            for &c in &task.class_ids {
                assert!(seen.insert(c), "class {c} appears in two tasks");
            }
        }
    }
}

/// Split manifest: dataset row indices per task and role, exported as JSON
/// for reproducibility.
#[derive(Debug, Serialize, Deserialize)]
pub struct SplitManifest {
    pub schema_version: u32,
    pub seed: u64,
    pub base: TaskIndices,
    pub fewshot: Vec<TaskIndices>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TaskIndices {
    pub class_ids: Vec<usize>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub anchors: Vec<usize>,
}

/// Deterministic N-way K-shot split with disjoint class sets.
///
/// Classes are dealt to tasks by a seeded permutation; within each class the
/// rows are canonically ordered by feature value before the seeded shuffle,
/// so the split is stable under permutations of equal-labeled dataset rows.
/// Few-shot train sets hold exactly `shots` samples per class and double as
/// the anchor set; base anchors are a uniform subsample of the base train
/// rows capped at `anchor_budget_base`.
pub fn split_tasks(
    dataset: &LabeledDataset,
    base_classes: usize,
    ways: usize,
    shots: usize,
    n_fewshot_tasks: usize,
    anchor_budget_base: usize,
    test_fraction: f64,
    seed: u64,
) -> Result<(TaskSequence, SplitManifest), DataError> {
    if !(0.0 < test_fraction && test_fraction < 1.0) {
        return Err(DataError::InvalidConfig(
            "test_fraction must be in (0, 1)".into(),
        ));
    }
    if base_classes == 0 || ways == 0 || shots == 0 {
        return Err(DataError::InvalidConfig(
            "base_classes, ways, and shots must be >= 1".into(),
        ));
    }
    let needed = base_classes + ways * n_fewshot_tasks;
    if needed > dataset.n_classes {
        return Err(DataError::NotEnoughClasses {
            needed,
            available: dataset.n_classes,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut class_order: Vec<usize> = (0..dataset.n_classes).collect();
    class_order.shuffle(&mut rng);

    // canonical per-class row order, then a seeded shuffle
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.n_classes];
    for (i, &label) in dataset.labels.iter().enumerate() {
        per_class[label].push(i);
    }
    for rows in per_class.iter_mut() {
        rows.sort_by(|&a, &b| {
            dataset.features[a]
                .partial_cmp(&dataset.features[b])
                .expect("finite features")
                .then(a.cmp(&b))
        });
        rows.shuffle(&mut rng);
    }

    let split_class = |rows: &[usize]| -> (Vec<usize>, Vec<usize>) {
        let n_test = ((rows.len() as f64 * test_fraction).round() as usize)
            .clamp(1, rows.len().saturating_sub(1).max(1));
        let test = rows[..n_test].to_vec();
        let train = rows[n_test..].to_vec();
        (train, test)
    };

    let build_task = |classes: &[usize],
                      shots_cap: Option<usize>,
                      rng: &mut ChaCha8Rng|
     -> Result<(TaskData, TaskIndices), DataError> {
        let mut train_idx = Vec::new();
        let mut test_idx = Vec::new();
        for &class in classes {
            let (train, test) = split_class(&per_class[class]);
            match shots_cap {
                None => train_idx.extend(train),
                Some(k) => {
                    if train.len() < k {
                        return Err(DataError::NotEnoughSamples {
                            class,
                            needed: k,
                            available: train.len(),
                        });
                    }
                    train_idx.extend(&train[..k]);
                }
            }
            test_idx.extend(test);
        }
        let anchors_idx = match shots_cap {
            // few-shot: all train rows are labeled anchors
            Some(_) => train_idx.clone(),
            // base: uniform subsample up to the label budget
            None => {
                let mut rows = train_idx.clone();
                rows.shuffle(rng);
                rows.truncate(anchor_budget_base);
                rows.sort_unstable();
                rows
            }
        };
        let task = TaskData {
            train: train_idx.iter().map(|&i| dataset.features[i].clone()).collect(),
            train_truth: train_idx.iter().map(|&i| dataset.labels[i]).collect(),
            test: test_idx
                .iter()
                .map(|&i| (dataset.features[i].clone(), dataset.labels[i]))
                .collect(),
            anchors: anchors_idx
                .iter()
                .map(|&i| (dataset.features[i].clone(), dataset.labels[i]))
                .collect(),
            class_ids: classes.to_vec(),
        };
        let indices = TaskIndices {
            class_ids: classes.to_vec(),
            train: train_idx,
            test: test_idx,
            anchors: anchors_idx,
        };
        Ok((task, indices))
    };

    let base_class_ids: Vec<usize> = class_order[..base_classes].to_vec();
    let (base, base_idx) = build_task(&base_class_ids, None, &mut rng)?;

    let mut fewshot = Vec::with_capacity(n_fewshot_tasks);
    let mut fewshot_idx = Vec::with_capacity(n_fewshot_tasks);
    for t in 0..n_fewshot_tasks {
        let start = base_classes + t * ways;
        let classes: Vec<usize> = class_order[start..start + ways].to_vec();
        let (task, idx) = build_task(&classes, Some(shots), &mut rng)?;
        fewshot.push(task);
        fewshot_idx.push(idx);
    }

    let sequence = TaskSequence {
        base,
        fewshot,
        image_shape: dataset.image_shape,
        input_dim: dataset.dim,
    };
    sequence.assert_disjoint();
    let manifest = SplitManifest {
        schema_version: 1,
        seed,
        base: base_idx,
        fewshot: fewshot_idx,
    };
    Ok((sequence, manifest))
}

/// Two-view stochastic augmentation policy. `scale_range` multiplies the
/// whole vector by one uniform draw per view; `jitter_std` adds Gaussian
/// noise per dimension; `flip_prob` mirrors image rows when an image shape
/// is present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub jitter_std: f64,
    pub scale_range: (f64, f64),
    pub flip_prob: f64,
    pub image_shape: Option<(usize, usize, usize)>,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            jitter_std: 0.1,
            scale_range: (0.9, 1.1),
            flip_prob: 0.0,
            image_shape: None,
        }
    }
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        Self {
            jitter_std: 0.0,
            scale_range: (1.0, 1.0),
            flip_prob: 0.0,
            image_shape: None,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.jitter_std < 0.0 {
            return Err(DataError::InvalidConfig("jitter_std must be >= 0".into()));
        }
        if self.scale_range.0 > self.scale_range.1 {
            return Err(DataError::InvalidConfig(
                "scale_range low must be <= high".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(DataError::InvalidConfig(
                "flip_prob must be in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Two independent stochastic views of one input; the input itself is never
/// modified.
pub fn augment(x: &[f64], policy: &AugmentPolicy, rng: &mut impl Rng) -> (Vec<f64>, Vec<f64>) {
    (one_view(x, policy, rng), one_view(x, policy, rng))
}

fn one_view(x: &[f64], policy: &AugmentPolicy, rng: &mut impl Rng) -> Vec<f64> {
    let (lo, hi) = policy.scale_range;
    let scale = if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    };
    let mut view: Vec<f64> = x.iter().map(|&v| v * scale).collect();
    if policy.jitter_std > 0.0 {
        for v in view.iter_mut() {
            let n: f64 = StandardNormal.sample(rng);
            *v += policy.jitter_std * n;
        }
    }
    if let Some((c, h, w)) = policy.image_shape {
        if policy.flip_prob > 0.0 && rng.random_bool(policy.flip_prob) {
            for ci in 0..c {
                for row in 0..h {
                    let start = ci * h * w + row * w;
                    view[start..start + w].reverse();
                }
            }
        }
    }
    view
}

/// Writes the dataset as CSV: feature columns `f0..f{d-1}` and a final
/// `label` column. `{:?}` formatting keeps full f64 round-trip precision.
pub fn export_csv(dataset: &LabeledDataset, path: &Path) -> Result<(), DataError> {
    let mut out = String::new();
    let header: Vec<String> = (0..dataset.dim)
        .map(|i| format!("f{i}"))
        .chain(std::iter::once("label".to_string()))
        .collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for (row, label) in dataset.features.iter().zip(&dataset.labels) {
        for v in row {
            out.push_str(&format!("{v:?},"));
        }
        out.push_str(&format!("{label}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn import_csv(path: &Path) -> Result<LabeledDataset, DataError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(DataError::CsvParse {
        line: 1,
        message: "empty file".into(),
    })?;
    let dim = header.split(',').count().saturating_sub(1);
    if dim == 0 {
        return Err(DataError::CsvParse {
            line: 1,
            message: "header needs feature columns and a label".into(),
        });
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 1 {
            return Err(DataError::CsvParse {
                line: i + 1,
                message: format!("expected {} fields, got {}", dim + 1, fields.len()),
            });
        }
        let mut row = Vec::with_capacity(dim);
        for f in &fields[..dim] {
            row.push(f.parse::<f64>().map_err(|e| DataError::CsvParse {
                line: i + 1,
                message: e.to_string(),
            })?);
        }
        labels.push(fields[dim].parse::<usize>().map_err(|e| DataError::CsvParse {
            line: i + 1,
            message: e.to_string(),
        })?);
        features.push(row);
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    Ok(LabeledDataset {
        dim,
        n_classes,
        features,
        labels,
        image_shape: None,
    })
}

pub fn export_manifest(manifest: &SplitManifest, path: &Path) -> Result<(), DataError> {
    std::fs::write(path, serde_json::to_string_pretty(manifest)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles;

    #[test]
    fn blob_counts_are_exact_and_deterministic() {
        let a = generate_blobs(5, 4, 20, 3.0, 0.5, 7).unwrap();
        let b = generate_blobs(5, 4, 20, 3.0, 0.5, 7).unwrap();
        assert_eq!(a, b);
        for class in 0..5 {
            assert_eq!(a.labels.iter().filter(|&&l| l == class).count(), 20);
        }
        let c = generate_blobs(5, 4, 20, 3.0, 0.5, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn well_separated_blobs_classify_by_nearest_mean() {
        let std = 0.3;
        let data = generate_blobs(6, 8, 50, 10.0 * std, std, 0).unwrap();
        // class means from the data itself
        let mut means = vec![vec![0.0; data.dim]; 6];
        let mut counts = vec![0usize; 6];
        for (x, &l) in data.features.iter().zip(&data.labels) {
            counts[l] += 1;
            for (m, v) in means[l].iter_mut().zip(x) {
                *m += v;
            }
        }
        for (m, &c) in means.iter_mut().zip(&counts) {
            for v in m.iter_mut() {
                *v /= c as f64;
            }
        }
        let correct = data
            .features
            .iter()
            .zip(&data.labels)
            .filter(|(x, &l)| oracles::nearest_by_scan(x, &means) == l)
            .count();
        let acc = correct as f64 / data.len() as f64;
        assert!(acc >= 0.99, "nearest-mean accuracy {acc}");
    }

    #[test]
    fn min_separation_holds() {
        let data = generate_blobs(12, 3, 1, 4.0, 0.0, 3).unwrap();
        for i in 0..12 {
            for j in i + 1..12 {
                let d = squared_distance(&data.features[i], &data.features[j]).sqrt();
                assert!(d >= 4.0 - 1e-9, "means {i},{j} at distance {d}");
            }
        }
    }

    #[test]
    fn split_covers_exactly_21_classes() {
        let data = generate_blobs(21, 4, 30, 4.0, 0.5, 0).unwrap();
        let (seq, _) = split_tasks(&data, 12, 3, 5, 3, 25, 0.2, 0).unwrap();
        let mut covered: BTreeSet<usize> = seq.base.class_ids.iter().cloned().collect();
        for t in &seq.fewshot {
            covered.extend(t.class_ids.iter().cloned());
        }
        assert_eq!(covered.len(), 21);
        assert_eq!(seq.base.class_ids.len(), 12);
        for t in &seq.fewshot {
            assert_eq!(t.class_ids.len(), 3);
        }
    }

    #[test]
    fn fewshot_train_sets_have_exactly_ways_times_shots() {
        let data = generate_blobs(21, 4, 30, 4.0, 0.5, 1).unwrap();
        let (seq, _) = split_tasks(&data, 12, 3, 5, 3, 25, 0.2, 1).unwrap();
        for t in &seq.fewshot {
            assert_eq!(t.train.len(), 15);
            assert_eq!(t.anchors.len(), 15);
            for &class in &t.class_ids {
                assert_eq!(t.train_truth.iter().filter(|&&l| l == class).count(), 5);
            }
        }
    }

    #[test]
    fn too_many_tasks_for_class_count() {
        let data = generate_blobs(21, 4, 10, 4.0, 0.5, 2).unwrap();
        assert!(matches!(
            split_tasks(&data, 12, 3, 5, 4, 25, 0.2, 0).unwrap_err(),
            DataError::NotEnoughClasses { needed: 24, available: 21 }
        ));
    }

    #[test]
    fn too_few_samples_per_class() {
        let data = generate_blobs(4, 3, 4, 4.0, 0.5, 3).unwrap();
        // 4 samples per class, 1 goes to test, 3 remain < 5 shots
        assert!(matches!(
            split_tasks(&data, 2, 2, 5, 1, 10, 0.2, 0).unwrap_err(),
            DataError::NotEnoughSamples { needed: 5, .. }
        ));
    }

    #[test]
    fn split_is_deterministic_and_row_permutation_stable() {
        let data = generate_blobs(8, 3, 12, 4.0, 0.5, 4).unwrap();
        let (a, _) = split_tasks(&data, 4, 2, 3, 2, 10, 0.25, 9).unwrap();
        let (b, _) = split_tasks(&data, 4, 2, 3, 2, 10, 0.25, 9).unwrap();
        assert_eq!(a, b);

        // permute rows within each class; selected sample SETS must match
        let mut permuted = data.clone();
        permuted.features.reverse();
        permuted.labels.reverse();
        let (c, _) = split_tasks(&permuted, 4, 2, 3, 2, 10, 0.25, 9).unwrap();
        let set_of = |rows: &[Vec<f64>]| -> BTreeSet<Vec<u64>> {
            rows.iter()
                .map(|r| r.iter().map(|v| v.to_bits()).collect())
                .collect()
        };
        assert_eq!(set_of(&a.base.train), set_of(&c.base.train));
        for (ta, tc) in a.fewshot.iter().zip(&c.fewshot) {
            assert_eq!(set_of(&ta.train), set_of(&tc.train));
        }
    }

    #[test]
    fn base_anchor_budget_is_respected() {
        let data = generate_blobs(10, 3, 20, 4.0, 0.5, 5).unwrap();
        let (seq, manifest) = split_tasks(&data, 6, 2, 3, 2, 25, 0.2, 0).unwrap();
        assert_eq!(seq.base.anchors.len(), 25);
        assert_eq!(manifest.base.anchors.len(), 25);
        // anchors are train rows
        let train_set: BTreeSet<usize> = manifest.base.train.iter().cloned().collect();
        assert!(manifest.base.anchors.iter().all(|i| train_set.contains(i)));
    }

    #[test]
    fn identity_policy_returns_the_input_twice() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = vec![1.0, -2.0, 3.0];
        let (v1, v2) = augment(&x, &AugmentPolicy::identity(), &mut rng);
        assert_eq!(v1, x);
        assert_eq!(v2, x);
    }

    #[test]
    fn views_preserve_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = vec![0.5; 17];
        let policy = AugmentPolicy::default();
        let (v1, v2) = augment(&x, &policy, &mut rng);
        assert_eq!(v1.len(), 17);
        assert_eq!(v2.len(), 17);
        assert_ne!(v1, v2);
    }

    #[test]
    fn jitter_mean_deviation_matches_half_normal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let policy = AugmentPolicy {
            jitter_std: 0.1,
            scale_range: (1.0, 1.0),
            flip_prob: 0.0,
            image_shape: None,
        };
        let x = vec![0.0; 10];
        let mut total = 0.0;
        let mut count = 0usize;
        for _ in 0..1_000 {
            let (v1, _) = augment(&x, &policy, &mut rng);
            for v in v1 {
                total += v.abs();
                count += 1;
            }
        }
        let mean_dev = total / count as f64;
        let expected = oracles::half_normal_mean(0.1);
        assert!(
            (mean_dev - expected).abs() < 0.005,
            "mean deviation {mean_dev} vs {expected}"
        );
    }

    #[test]
    fn flip_reverses_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let policy = AugmentPolicy {
            jitter_std: 0.0,
            scale_range: (1.0, 1.0),
            flip_prob: 1.0,
            image_shape: Some((1, 2, 3)),
        };
        let x = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let (v1, _) = augment(&x, &policy, &mut rng);
        assert_eq!(v1, vec![3.0, 2.0, 1.0, 6.0, 5.0, 4.0]);
    }

    #[test]
    fn augment_does_not_touch_the_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = vec![1.25, -0.5];
        let before = x.clone();
        let _ = augment(&x, &AugmentPolicy::default(), &mut rng);
        assert_eq!(x, before);
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let data = generate_blobs(3, 4, 5, 3.0, 0.7, 6).unwrap();
        let dir = std::env::temp_dir().join(format!("unisa-data-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("blobs.csv");
        export_csv(&data, &path).unwrap();
        let back = import_csv(&path).unwrap();
        assert_eq!(data.features, back.features);
        assert_eq!(data.labels, back.labels);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn textured_images_have_image_shape() {
        let data = generate_textured_images(3, 16, 4, 0.05, 0).unwrap();
        assert_eq!(data.image_shape, Some((1, 16, 16)));
        assert_eq!(data.dim, 256);
        assert_eq!(data.len(), 12);
    }
}
