//! The two training phases and the session protocol.
//!
//! Base phase: every batch draws its two augmented views once, then runs M
//! perturbation passes. Noise is a temporary view of the extractor; each
//! pass contributes the gradient of the perturbed loss with respect to the
//! unperturbed weights, and the averaged gradient is applied in a single
//! descent step, so the noise itself never persists in the parameters.
//! Forcing all noise draws to zero makes M passes identical to one.
//!
//! Few-shot phase: per batch the loss adds the synthetic-sample triplet and
//! the importance penalty; per epoch the extractor is clamped back into the
//! anchor band and the momentum target updated. Labeled anchors are used
//! once per task, after training, to name the clusters for inference.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ball::{self, BallError};
use crate::clustering::{self, ClusterError, ClusterSet};
use crate::data::{AugmentPolicy, DataError, TaskData, TaskSequence};
use crate::losses::{self, BaseTerms, FewshotTerms, LossError, LossReport, LossWeights};
use crate::metrics::{MetricsError, SessionMetrics};
use crate::model::{Blocks, ModelError, ModelState, NetworkPath, NetworkShape};
use crate::runlog::{LogRecord, RunLog};
use crate::tensor::{DenseTensor, NodeId, TensorError, ValueGraph};

const KMEANS_RESTARTS_BASE: usize = 10;
const KMEANS_RESTARTS_FEWSHOT: usize = 3;
const KMEANS_MAX_ITERS: usize = 100;
const KMEANS_TOL: f64 = 1e-6;

const STREAM_AUGMENT: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;
const STREAM_KMEANS: u64 = 4;
const STREAM_BALL: u64 = 5;
const STREAM_PSA: u64 = 6;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("task has no training samples")]
    EmptyTask,
    #[error("few-shot training requires a base anchor snapshot")]
    MissingAnchor,
    #[error("task classes {0:?} overlap previously seen classes")]
    ClassOverlap(Vec<usize>),
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("in-loop invariant violated: {0}")]
    InvariantViolation(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Ball(#[from] BallError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Term and mechanism switches for the ablation rows: A drops the flat
/// machinery (perturbations and clamping), B the uniformity KL, C the
/// prototype scattering, D the positive alignment, E the synthetic-sample
/// triplet; the importance penalty has its own switch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub disable_flat: bool,
    pub disable_wide_kl: bool,
    pub disable_psl: bool,
    pub disable_psa: bool,
    pub disable_ball: bool,
    pub disable_mas: bool,
}

/// Everything one training run needs besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs_base: usize,
    pub epochs_fewshot: usize,
    pub batch_size: usize,
    pub lr_base: f64,
    pub lr_fewshot_max: f64,
    pub lr_fewshot_min: f64,
    pub bound_b: f64,
    pub m_perturbations: usize,
    pub s_synthetic: usize,
    pub weights: LossWeights,
    pub momentum_m: f64,
    pub seed: u64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub network: NetworkShape,
    pub augment: AugmentPolicy,
    pub ablation: AblationFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_base: 28,
            epochs_fewshot: 5,
            batch_size: 128,
            lr_base: 0.01,
            lr_fewshot_max: 0.01,
            lr_fewshot_min: 0.001,
            bound_b: 0.01,
            m_perturbations: 2,
            s_synthetic: 60,
            weights: LossWeights::default(),
            // 0.9 rather than the usual 0.99: at a few hundred total steps a
            // slower target never catches the online network and the
            // pseudo-labels it feeds stay stale
            momentum_m: 0.9,
            seed: 0,
            sgd_momentum: 0.9,
            weight_decay: 5e-4,
            network: NetworkShape::dense(16, vec![64, 64], 32, 16),
            augment: AugmentPolicy {
                jitter_std: 1.0,
                ..AugmentPolicy::default()
            },
            ablation: AblationFlags::default(),
        }
    }
}

impl TrainConfig {
    /// Structural validation. Learning rates may be zero here (a zero rate
    /// is a legitimate frozen run); the config-file parser is stricter.
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.m_perturbations < 1 {
            return Err(TrainError::InvalidConfig(
                "m_perturbations must be >= 1".into(),
            ));
        }
        if self.batch_size < 1 {
            return Err(TrainError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.s_synthetic < 1 {
            return Err(TrainError::InvalidConfig("s_synthetic must be >= 1".into()));
        }
        if self.bound_b < 0.0 {
            return Err(TrainError::InvalidConfig("bound_b must be >= 0".into()));
        }
        for (name, v) in [
            ("lr_base", self.lr_base),
            ("lr_fewshot_max", self.lr_fewshot_max),
            ("lr_fewshot_min", self.lr_fewshot_min),
            ("weight_decay", self.weight_decay),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(TrainError::InvalidConfig(format!(
                    "{name} must be finite and >= 0"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.momentum_m) {
            return Err(TrainError::InvalidConfig(
                "momentum_m must be in [0, 1]".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) {
            return Err(TrainError::InvalidConfig(
                "sgd_momentum must be in [0, 1)".into(),
            ));
        }
        self.weights
            .validate()
            .map_err(TrainError::InvalidConfig)?;
        self.network.validate()?;
        self.augment.validate()?;
        Ok(())
    }
}

/// State carried from session to session: the model, the per-session
/// cluster sets (all with class maps), and the classes seen so far.
#[derive(Debug, Clone)]
pub struct SessionState {
    pub session: usize,
    pub clusters: Vec<ClusterSet>,
    pub model: ModelState,
    pub classes_seen: BTreeSet<usize>,
    pub loss_history: Vec<LossReport>,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Plain SGD with momentum and decoupled-from-nothing L2 weight decay:
/// v <- mu v + g + wd theta; theta <- theta - lr v.
struct Sgd {
    momentum: f64,
    weight_decay: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    fn step(
        &mut self,
        model: &mut ModelState,
        grads: &BTreeMap<String, DenseTensor>,
        lr: f64,
    ) -> Result<(), TrainError> {
        for (key, grad) in grads {
            let theta = model
                .qualified(key)
                .ok_or_else(|| TrainError::InvalidConfig(format!("unknown parameter {key}")))?
                .clone();
            let v = self
                .velocity
                .entry(key.clone())
                .or_insert_with(|| vec![0.0; theta.len()]);
            let mut data = theta.data().to_vec();
            for ((vj, gj), tj) in v.iter_mut().zip(grad.data()).zip(data.iter_mut()) {
                *vj = self.momentum * *vj + gj + self.weight_decay * *tj;
                *tj -= lr * *vj;
            }
            model.set_qualified(key, DenseTensor::new(theta.shape().to_vec(), data)?)?;
        }
        Ok(())
    }
}

fn embed_all_target(model: &ModelState, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, TrainError> {
    rows.iter()
        .map(|x| {
            let t = DenseTensor::vector(x.clone())?;
            Ok(model
                .embed_head(&t, NetworkPath::Target)?
                .into_data())
        })
        .collect()
}

fn embed_anchors_target(
    model: &ModelState,
    anchors: &[(Vec<f64>, usize)],
) -> Result<Vec<(Vec<f64>, usize)>, TrainError> {
    anchors
        .iter()
        .map(|(x, class)| {
            let t = DenseTensor::vector(x.clone())?;
            Ok((
                model.embed_head(&t, NetworkPath::Target)?.into_data(),
                *class,
            ))
        })
        .collect()
}

/// Per-dimension psa jitter: `sigma_psa` times the per-dimension standard
/// deviation of the task's training inputs.
fn psa_sigma(train: &[Vec<f64>], scale: f64) -> Vec<f64> {
    let dim = train.first().map_or(0, |r| r.len());
    let n = train.len() as f64;
    let mut mean = vec![0.0; dim];
    for row in train {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut var = vec![0.0; dim];
    for row in train {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.into_iter().map(|s| scale * (s / n).sqrt()).collect()
}

fn zero_noise(model: &ModelState) -> Blocks {
    model
        .phi()
        .iter()
        .map(|(k, v)| (k.clone(), DenseTensor::zeros(v.shape())))
        .collect()
}

fn uniform_noise(model: &ModelState, bound: f64, rng: &mut ChaCha8Rng) -> Blocks {
    model
        .phi()
        .iter()
        .map(|(k, v)| {
            let data: Vec<f64> = (0..v.len())
                .map(|_| {
                    if bound == 0.0 {
                        0.0
                    } else {
                        rng.random_range(-bound..=bound)
                    }
                })
                .collect();
            (
                k.clone(),
                DenseTensor::new(v.shape().to_vec(), data).expect("finite noise"),
            )
        })
        .collect()
}

/// Prototype constants from target-side embeddings: per-cluster normalized
/// means over the given members, restricted to `present` clusters.
fn constant_prototypes(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    present: &[usize],
) -> Result<Vec<Vec<f64>>, TrainError> {
    let dim = embeddings[0].len();
    let mut out = Vec::with_capacity(present.len());
    for &c in present {
        let mut sum = vec![0.0; dim];
        let mut count = 0usize;
        for (e, &l) in embeddings.iter().zip(labels) {
            if l == c {
                count += 1;
                for (s, v) in sum.iter_mut().zip(e) {
                    *s += v;
                }
            }
        }
        debug_assert!(count > 0, "present cluster has members");
        for s in sum.iter_mut() {
            *s /= count as f64;
        }
        let norm = sum.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 1e-12 {
            return Err(ClusterError::DegenerateProto(c).into());
        }
        for s in sum.iter_mut() {
            *s /= norm;
        }
        out.push(sum);
    }
    Ok(out)
}

/// Shared per-batch graph pieces for both phases.
struct BatchGraph {
    graph: ValueGraph,
    /// normalized in-graph prototypes over present clusters
    prototypes: Vec<NodeId>,
    /// unnormalized in-graph cluster means, same order; the triplet loss
    /// measures distances against these so the embedding gets a scattering
    /// gradient from synthetic samples
    cluster_means: Vec<NodeId>,
    /// cluster ids the batch actually contains, index-aligned with the two
    /// lists above
    present: Vec<usize>,
    psa_node: Option<NodeId>,
    kl_node: Option<NodeId>,
    psl_node: Option<NodeId>,
}

#[allow(clippy::too_many_arguments)]
fn build_batch_graph(
    model: &ModelState,
    batch_rows: &[&Vec<f64>],
    batch_labels: &[usize],
    n_clusters: usize,
    cfg: &TrainConfig,
    policy: &AugmentPolicy,
    sigma: &[f64],
    include_proj: bool,
    rng_aug: &mut ChaCha8Rng,
    rng_psa: &mut ChaCha8Rng,
) -> Result<BatchGraph, TrainError> {
    let mut g = ValueGraph::new();
    model.declare_trainable(&mut g, include_proj)?;

    // two views per sample, drawn once per batch
    let views: Vec<(Vec<f64>, Vec<f64>)> = batch_rows
        .iter()
        .map(|x| crate::data::augment(x, policy, rng_aug))
        .collect();

    // target side of the positive pair, constant
    let target_embeddings: Vec<Vec<f64>> = views
        .iter()
        .map(|(_, v2)| {
            Ok::<_, TrainError>(
                model
                    .embed_head(&DenseTensor::vector(v2.clone())?, NetworkPath::Target)?
                    .into_data(),
            )
        })
        .collect::<Result<_, _>>()?;

    let mut counts = vec![0usize; n_clusters];
    for &l in batch_labels {
        counts[l] += 1;
    }
    let present: Vec<usize> = (0..n_clusters).filter(|&c| counts[c] > 0).collect();

    // online projections of view one, and the jittered alignment path
    let mut online_nodes = Vec::with_capacity(views.len());
    let mut psa_terms = Vec::with_capacity(views.len());
    let mut kl_terms = Vec::with_capacity(views.len());
    for (i, (v1, _)) in views.iter().enumerate() {
        let z = model.online_feature_node(&mut g, v1)?;
        let zh = model.head_node(&mut g, z)?;
        online_nodes.push(zh);

        if !cfg.ablation.disable_psa {
            let jittered: Vec<f64> = v1
                .iter()
                .zip(sigma)
                .map(|(v, s)| {
                    let e: f64 = StandardNormal.sample(rng_psa);
                    v + e * s
                })
                .collect();
            let zj = model.online_feature_node(&mut g, &jittered)?;
            let zhj = model.head_node(&mut g, zj)?;
            let target = g.constant(DenseTensor::vector(target_embeddings[i].clone())?);
            psa_terms.push(losses::psa(&mut g, zhj, target)?);
        }
        if !cfg.ablation.disable_wide_kl {
            kl_terms.push(losses::kl_uniform(&mut g, zh)?);
        }
    }

    let psa_node = mean_node(&mut g, &psa_terms)?;
    let kl_node = mean_node(&mut g, &kl_terms)?;

    // in-graph cluster means and normalized prototypes over present clusters
    let mut prototypes = Vec::with_capacity(present.len());
    let mut cluster_means = Vec::with_capacity(present.len());
    for &c in &present {
        let members: Vec<NodeId> = batch_labels
            .iter()
            .zip(&online_nodes)
            .filter(|(&l, _)| l == c)
            .map(|(_, &n)| n)
            .collect();
        let mut acc = members[0];
        for &m in &members[1..] {
            acc = g.add(acc, m)?;
        }
        let mean = g.scale(acc, 1.0 / members.len() as f64);
        cluster_means.push(mean);
        prototypes.push(g.l2_normalize(mean, 0)?);
    }
    let aug_constant = constant_prototypes(&target_embeddings, batch_labels, &present)?;
    let aug_prototypes: Vec<NodeId> = aug_constant
        .into_iter()
        .map(|p| Ok::<_, TrainError>(g.constant(DenseTensor::vector(p)?)))
        .collect::<Result<_, _>>()?;

    let psl_node = if cfg.ablation.disable_psl || present.len() < 2 {
        None
    } else {
        Some(losses::psl(
            &mut g,
            &prototypes,
            &aug_prototypes,
            cfg.weights.tau,
        )?)
    };

    Ok(BatchGraph {
        graph: g,
        prototypes,
        cluster_means,
        present,
        psa_node,
        kl_node,
        psl_node,
    })
}

fn mean_node(g: &mut ValueGraph, terms: &[NodeId]) -> Result<Option<NodeId>, TrainError> {
    match terms.split_first() {
        None => Ok(None),
        Some((&first, rest)) => {
            let mut acc = first;
            for &t in rest {
                acc = g.add(acc, t)?;
            }
            Ok(Some(g.scale(acc, 1.0 / terms.len() as f64)))
        }
    }
}

fn accumulate_grads(
    into: &mut BTreeMap<String, Vec<f64>>,
    grads: BTreeMap<String, DenseTensor>,
) {
    for (key, grad) in grads {
        let slot = into
            .entry(key)
            .or_insert_with(|| vec![0.0; grad.len()]);
        for (s, v) in slot.iter_mut().zip(grad.data()) {
            *s += v;
        }
    }
}

fn averaged_grads(
    model: &ModelState,
    acc: BTreeMap<String, Vec<f64>>,
    passes: usize,
) -> BTreeMap<String, DenseTensor> {
    acc.into_iter()
        .map(|(key, mut data)| {
            for v in data.iter_mut() {
                *v /= passes as f64;
            }
            let shape = model
                .qualified(&key)
                .expect("gradient keys come from trainable set")
                .shape()
                .to_vec();
            (key, DenseTensor::new(shape, data).expect("finite gradient"))
        })
        .collect()
}

fn mean_report(reports: &[LossReport]) -> LossReport {
    let n = reports.len().max(1) as f64;
    let mut out = LossReport::default();
    for r in reports {
        out.psl += r.psl / n;
        out.psa += r.psa / n;
        out.kl += r.kl / n;
        out.drift += r.drift / n;
        out.ball += r.ball / n;
        out.mas += r.mas / n;
        out.total += r.total / n;
    }
    out
}

/// Flat-wide base phase. Returns the trained state (with anchor,
/// importances in place) and the final cluster set over target embeddings,
/// without a class map.
pub fn train_base(
    task: &TaskData,
    state: ModelState,
    cfg: &TrainConfig,
    log: &mut RunLog,
) -> Result<(ModelState, ClusterSet), TrainError> {
    cfg.validate()?;
    if task.train.is_empty() {
        return Err(TrainError::EmptyTask);
    }
    let mut model = state;
    let n_clusters = task.class_ids.len();
    let sigma = psa_sigma(&task.train, cfg.weights.sigma_psa);
    let trainable: Vec<String> = model.trainable_keys(false);
    let trainable_refs: Vec<&str> = trainable.iter().map(|s| s.as_str()).collect();

    let mut rng_aug = stream(cfg.seed, STREAM_AUGMENT);
    let mut rng_noise = stream(cfg.seed, STREAM_NOISE);
    let mut rng_shuffle = stream(cfg.seed, STREAM_SHUFFLE);
    let mut rng_kmeans = stream(cfg.seed, STREAM_KMEANS);
    let mut rng_psa = stream(cfg.seed, STREAM_PSA);
    let mut sgd = Sgd::new(cfg.sgd_momentum, cfg.weight_decay);

    let m_passes = if cfg.ablation.disable_flat {
        1
    } else {
        cfg.m_perturbations
    };

    for epoch in 0..cfg.epochs_base {
        let embeddings = embed_all_target(&model, &task.train)?;
        let (_, pseudo_labels) = clustering::kmeans_restarts(
            &embeddings,
            n_clusters,
            rng_kmeans.random(),
            KMEANS_RESTARTS_BASE,
            KMEANS_MAX_ITERS,
            KMEANS_TOL,
        )?;

        let mut order: Vec<usize> = (0..task.train.len()).collect();
        order.shuffle(&mut rng_shuffle);

        for (batch_no, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch_rows: Vec<&Vec<f64>> = chunk.iter().map(|&i| &task.train[i]).collect();
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| pseudo_labels[i]).collect();

            let mut bg = build_batch_graph(
                &model,
                &batch_rows,
                &batch_labels,
                n_clusters,
                cfg,
                &cfg.augment,
                &sigma,
                false,
                &mut rng_aug,
                &mut rng_psa,
            )?;

            // pre-perturbation prototypes, constant in the drift term
            let drift_node = if cfg.ablation.disable_flat || bg.prototypes.len() < 2 {
                None
            } else {
                let star: Vec<NodeId> = bg
                    .prototypes
                    .iter()
                    .map(|&p| {
                        let v = bg.graph.evaluate(p)?;
                        Ok::<_, TrainError>(bg.graph.constant(v))
                    })
                    .collect::<Result<_, _>>()?;
                Some(losses::drift(&mut bg.graph, &bg.prototypes, &star)?)
            };

            let terms = BaseTerms {
                psl: bg.psl_node,
                psa: bg.psa_node,
                kl: bg.kl_node,
                drift: drift_node,
            };
            let (total, _) = losses::base_loss(&mut bg.graph, &terms, &cfg.weights)?;

            let mut grad_acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            let mut reports = Vec::with_capacity(m_passes);
            for _ in 0..m_passes {
                let noise = if cfg.ablation.disable_flat || cfg.bound_b == 0.0 {
                    zero_noise(&model)
                } else {
                    uniform_noise(&model, cfg.bound_b, &mut rng_noise)
                };
                let view = model.perturb(&noise)?;
                for (key, value) in view.phi() {
                    bg.graph.bind(&format!("phi.{key}"), value.clone())?;
                }
                let grads = bg.graph.gradient(total, &trainable_refs)?;
                accumulate_grads(&mut grad_acc, grads);
                reports.push(report_from_terms(&mut bg.graph, &terms, &cfg.weights)?);
            }
            let grads = averaged_grads(&model, grad_acc, m_passes);
            sgd.step(&mut model, &grads, cfg.lr_base)?;
            model.momentum_update();

            let report = mean_report(&reports);
            log.record(&LogRecord::Batch {
                session: 1,
                epoch,
                batch: batch_no,
                losses: &report,
            });
        }
    }

    model.snapshot_anchor();
    if !cfg.ablation.disable_mas {
        let inputs: Vec<DenseTensor> = task
            .train
            .iter()
            .map(|x| DenseTensor::vector(x.clone()))
            .collect::<Result<_, _>>()?;
        let (gamma, n) = losses::mas_importance(&model, &inputs)?;
        model.merge_gamma(gamma, n);
    }
    model.snapshot_theta_prev();

    let embeddings = embed_all_target(&model, &task.train)?;
    let (clusters, _) = clustering::kmeans_restarts(
        &embeddings,
        n_clusters,
        rng_kmeans.random(),
        KMEANS_RESTARTS_BASE,
        KMEANS_MAX_ITERS,
        KMEANS_TOL,
    )?;
    Ok((model, clusters))
}

fn report_from_terms(
    g: &mut ValueGraph,
    terms: &BaseTerms,
    weights: &LossWeights,
) -> Result<LossReport, TrainError> {
    let eval = |g: &mut ValueGraph, n: Option<NodeId>| -> Result<f64, TrainError> {
        Ok(match n {
            None => 0.0,
            Some(id) => g.evaluate(id)?.item(),
        })
    };
    let psl = eval(g, terms.psl)?;
    let psa = eval(g, terms.psa)?;
    let kl = eval(g, terms.kl)?;
    let drift = eval(g, terms.drift)?;
    Ok(LossReport {
        psl,
        psa,
        kl,
        drift,
        ball: 0.0,
        mas: 0.0,
        total: psl + weights.lambda1 * psa + weights.lambda2 * kl + weights.lambda3 * drift,
    })
}

struct PooledBalls {
    stats: ClusterSet,
    n_old: usize,
}

/// Every session's clusters as one sampling pool: previous sessions'
/// stored sets first, then the current task's clusters, in order.
fn pooled_ball_clusters(previous: &[ClusterSet], current: &ClusterSet) -> PooledBalls {
    let mut centroids = Vec::new();
    let mut stds = Vec::new();
    let mut counts = Vec::new();
    for set in previous {
        centroids.extend(set.centroids.iter().cloned());
        stds.extend(set.stds.iter().cloned());
        counts.extend(set.counts.iter().cloned());
    }
    let n_old = centroids.len();
    centroids.extend(current.centroids.iter().cloned());
    stds.extend(current.stds.iter().cloned());
    counts.extend(current.counts.iter().cloned());
    PooledBalls {
        stats: ClusterSet {
            centroids,
            stds,
            counts,
            class_map: None,
        },
        n_old,
    }
}

/// Cosine annealing from max to min over the task's epochs.
fn cosine_lr(max: f64, min: f64, epoch: usize, total_epochs: usize) -> f64 {
    if total_epochs <= 1 {
        return max;
    }
    let t = epoch as f64 / (total_epochs - 1) as f64;
    min + 0.5 * (max - min) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// One few-shot session. Trains on the task, clamps and momentum-updates per
/// epoch, refreshes importances, and appends the task's anchored cluster
/// set.
pub fn train_fewshot(
    task: &TaskData,
    mut sess: SessionState,
    cfg: &TrainConfig,
    log: &mut RunLog,
) -> Result<SessionState, TrainError> {
    cfg.validate()?;
    if task.train.is_empty() {
        return Err(TrainError::EmptyTask);
    }
    if sess.model.phi_anchor().is_none() {
        return Err(TrainError::MissingAnchor);
    }
    let overlap: Vec<usize> = task
        .class_ids
        .iter()
        .filter(|c| sess.classes_seen.contains(c))
        .cloned()
        .collect();
    if !overlap.is_empty() {
        return Err(TrainError::ClassOverlap(overlap));
    }

    let session_no = sess.session + 1;
    let ways = task.class_ids.len();
    let sigma = psa_sigma(&task.train, cfg.weights.sigma_psa);
    let trainable: Vec<String> = sess.model.trainable_keys(true);
    let trainable_refs: Vec<&str> = trainable.iter().map(|s| s.as_str()).collect();

    let task_seed = cfg.seed.wrapping_add(session_no as u64 * 0x9E37_79B9);
    let mut rng_aug = stream(task_seed, STREAM_AUGMENT);
    let mut rng_shuffle = stream(task_seed, STREAM_SHUFFLE);
    let mut rng_kmeans = stream(task_seed, STREAM_KMEANS);
    let mut rng_ball = stream(task_seed, STREAM_BALL);
    let mut rng_psa = stream(task_seed, STREAM_PSA);
    let mut sgd = Sgd::new(cfg.sgd_momentum, cfg.weight_decay);

    for epoch in 0..cfg.epochs_fewshot {
        let lr = cosine_lr(cfg.lr_fewshot_max, cfg.lr_fewshot_min, epoch, cfg.epochs_fewshot);
        let embeddings = embed_all_target(&sess.model, &task.train)?;
        let (epoch_clusters, pseudo_labels) = clustering::kmeans_restarts(
            &embeddings,
            ways,
            rng_kmeans.random(),
            KMEANS_RESTARTS_FEWSHOT,
            KMEANS_MAX_ITERS,
            KMEANS_TOL,
        )?;

        let mut order: Vec<usize> = (0..task.train.len()).collect();
        order.shuffle(&mut rng_shuffle);

        for (batch_no, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch_rows: Vec<&Vec<f64>> = chunk.iter().map(|&i| &task.train[i]).collect();
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| pseudo_labels[i]).collect();

            let mut bg = build_batch_graph(
                &sess.model,
                &batch_rows,
                &batch_labels,
                ways,
                cfg,
                &cfg.augment,
                &sigma,
                true,
                &mut rng_aug,
                &mut rng_psa,
            )?;

            // The triplet pools every session's balls. Old sessions enter as
            // stored constants (samples drawn in their balls, centroids
            // fixed); the current task's clusters enter as differentiable
            // batch means. Synthetic old-cluster samples therefore push the
            // new clusters out of occupied territory while new-cluster
            // samples scatter the new clusters apart, and the projection
            // module trains through every sample.
            let ball_node = if cfg.ablation.disable_ball {
                None
            } else {
                let pooled = pooled_ball_clusters(&sess.clusters, &epoch_clusters);
                let n_old = pooled.n_old;
                let raw = ball::raw_batch(&pooled.stats, cfg.s_synthetic, &mut rng_ball)?;
                let mut centroid_nodes: Vec<NodeId> = Vec::with_capacity(pooled.stats.n_clusters());
                for c in pooled.stats.centroids.iter().take(n_old) {
                    centroid_nodes.push(bg.graph.constant(DenseTensor::vector(c.clone())?));
                }
                // map current-task cluster ids onto batch means; absent ones
                // keep their kmeans coordinates as constants
                let mut current_nodes = Vec::new();
                for c in 0..epoch_clusters.n_clusters() {
                    let node = match bg.present.iter().position(|&p| p == c) {
                        Some(local) => bg.cluster_means[local],
                        None => bg
                            .graph
                            .constant(DenseTensor::vector(epoch_clusters.centroids[c].clone())?),
                    };
                    current_nodes.push(node);
                }
                centroid_nodes.extend(&current_nodes);
                let mut projected = Vec::with_capacity(raw.len());
                for (z, owner) in &raw {
                    projected.push((sess.model.project_node(&mut bg.graph, z)?, *owner));
                }
                if centroid_nodes.len() < 2 || projected.is_empty() {
                    None
                } else {
                    Some(losses::ball_triplet(
                        &mut bg.graph,
                        &projected,
                        &centroid_nodes,
                        cfg.weights.margin_r,
                    )?)
                }
            };

            let mas_node = if cfg.ablation.disable_mas {
                None
            } else {
                match (sess.model.gamma(), sess.model.theta_prev()) {
                    (Some(gamma), Some(prev)) => {
                        let mut theta_nodes = Vec::new();
                        let mut prev_nodes = Vec::new();
                        let mut gamma_nodes = Vec::new();
                        for key in sess.model.trainable_keys(false) {
                            let theta = bg
                                .graph
                                .param_node(&key)
                                .expect("declared by build_batch_graph");
                            theta_nodes.push(theta);
                            prev_nodes.push(bg.graph.constant(prev[&key].clone()));
                            gamma_nodes.push(bg.graph.constant(gamma[&key].clone()));
                        }
                        Some(losses::mas_penalty(
                            &mut bg.graph,
                            &theta_nodes,
                            &prev_nodes,
                            &gamma_nodes,
                            cfg.weights.lambda5,
                        )?)
                    }
                    _ => None,
                }
            };

            let terms = FewshotTerms {
                psl: bg.psl_node,
                psa: bg.psa_node,
                kl: bg.kl_node,
                ball: ball_node,
                mas: mas_node,
            };
            let (total, report) = losses::fewshot_loss(&mut bg.graph, &terms, &cfg.weights)?;
            let grads = bg.graph.gradient(total, &trainable_refs)?;
            sgd.step(&mut sess.model, &grads, lr)?;

            sess.loss_history.push(report);
            log.record(&LogRecord::Batch {
                session: session_no,
                epoch,
                batch: batch_no,
                losses: &report,
            });
        }

        if !cfg.ablation.disable_flat {
            sess.model.clamp_to_flat_region()?;
            let dev = sess
                .model
                .max_anchor_deviation()
                .expect("anchor checked above");
            if dev > cfg.bound_b + 1e-12 {
                return Err(TrainError::InvariantViolation(format!(
                    "extractor left the flat band: |phi - anchor| = {dev} > b = {}",
                    cfg.bound_b
                )));
            }
        }
        sess.model.momentum_update();
    }

    if cfg.epochs_fewshot > 0 && !cfg.ablation.disable_mas {
        let inputs: Vec<DenseTensor> = task
            .train
            .iter()
            .map(|x| DenseTensor::vector(x.clone()))
            .collect::<Result<_, _>>()?;
        let (gamma, n) = losses::mas_importance(&sess.model, &inputs)?;
        sess.model.merge_gamma(gamma, n);
        sess.model.snapshot_theta_prev();
    }

    // task cluster set from final target embeddings, named by the anchors
    let embeddings = embed_all_target(&sess.model, &task.train)?;
    let (clusters, _) = clustering::kmeans_restarts(
        &embeddings,
        ways,
        rng_kmeans.random(),
        KMEANS_RESTARTS_FEWSHOT,
        KMEANS_MAX_ITERS,
        KMEANS_TOL,
    )?;
    let anchors = embed_anchors_target(&sess.model, &task.anchors)?;
    let mapped = clustering::map_clusters_to_classes(&clusters, &anchors)?;

    sess.clusters.push(mapped);
    sess.classes_seen.extend(task.class_ids.iter().cloned());
    sess.session = session_no;
    Ok(sess)
}

/// Runs the whole protocol: base session then each few-shot session, with
/// accuracy over the union of all test sets seen so far after every
/// session.
pub fn run_sequence(
    tasks: &TaskSequence,
    cfg: &TrainConfig,
    log: &mut RunLog,
) -> Result<SessionMetrics, TrainError> {
    cfg.validate()?;
    if cfg.network.input_dim != tasks.input_dim {
        return Err(TrainError::InvalidConfig(format!(
            "network input_dim {} but task inputs have dim {}",
            cfg.network.input_dim, tasks.input_dim
        )));
    }
    let mut cfg = cfg.clone();
    cfg.augment.image_shape = tasks.image_shape;

    let mut accuracies = Vec::with_capacity(tasks.n_sessions());
    let mut wall = Vec::with_capacity(tasks.n_sessions());
    let mut classes_seen_count = Vec::with_capacity(tasks.n_sessions());

    let start = Instant::now();
    let model = ModelState::init(
        cfg.network.clone(),
        cfg.bound_b,
        cfg.momentum_m,
        cfg.seed,
    )?;
    let (model, base_clusters) = train_base(&tasks.base, model, &cfg, log)?;
    let anchors = embed_anchors_target(&model, &tasks.base.anchors)?;
    let base_mapped = clustering::map_clusters_to_classes(&base_clusters, &anchors)?;

    let mut sess = SessionState {
        session: 1,
        clusters: vec![base_mapped],
        model,
        classes_seen: tasks.base.class_ids.iter().cloned().collect(),
        loss_history: Vec::new(),
    };

    let mut test_pool: Vec<(Vec<f64>, usize)> = tasks.base.test.clone();
    let acc = evaluate_pool(&sess, &test_pool)?;
    accuracies.push(acc);
    wall.push(start.elapsed().as_secs_f64());
    classes_seen_count.push(sess.classes_seen.len());
    log.record(&LogRecord::Session {
        session: 1,
        classes_seen: sess.classes_seen.len(),
        accuracy: acc,
        wall_time_s: wall[0],
    });

    for task in &tasks.fewshot {
        let t0 = Instant::now();
        sess = train_fewshot(task, sess, &cfg, log)?;
        test_pool.extend(task.test.iter().cloned());
        let acc = evaluate_pool(&sess, &test_pool)?;
        accuracies.push(acc);
        wall.push(t0.elapsed().as_secs_f64());
        classes_seen_count.push(sess.classes_seen.len());
        log.record(&LogRecord::Session {
            session: sess.session,
            classes_seen: sess.classes_seen.len(),
            accuracy: acc,
            wall_time_s: *wall.last().expect("just pushed"),
        });
    }
    log.flush();

    Ok(SessionMetrics::new(
        cfg.seed,
        accuracies,
        classes_seen_count,
        wall,
        serde_json::to_value(&cfg).expect("config serializes"),
    ))
}

fn evaluate_pool(
    sess: &SessionState,
    pool: &[(Vec<f64>, usize)],
) -> Result<f64, TrainError> {
    let mut predictions = Vec::with_capacity(pool.len());
    let mut truths = Vec::with_capacity(pool.len());
    for (x, truth) in pool {
        let t = DenseTensor::vector(x.clone())?;
        predictions.push(clustering::classify(&sess.model, &sess.clusters, &t)?);
        truths.push(*truth);
    }
    Ok(crate::metrics::session_accuracy(&predictions, &truths)?)
}

/// Session state after base training only, for frozen-baseline style runs
/// and tests that drive few-shot sessions manually.
pub fn base_session(
    tasks: &TaskSequence,
    cfg: &TrainConfig,
    log: &mut RunLog,
) -> Result<SessionState, TrainError> {
    cfg.validate()?;
    let model = ModelState::init(
        cfg.network.clone(),
        cfg.bound_b,
        cfg.momentum_m,
        cfg.seed,
    )?;
    let (model, base_clusters) = train_base(&tasks.base, model, cfg, log)?;
    let anchors = embed_anchors_target(&model, &tasks.base.anchors)?;
    let base_mapped = clustering::map_clusters_to_classes(&base_clusters, &anchors)?;
    Ok(SessionState {
        session: 1,
        clusters: vec![base_mapped],
        model,
        classes_seen: tasks.base.class_ids.iter().cloned().collect(),
        loss_history: Vec::new(),
    })
}
