//! Loss terms behind the training objectives: prototype scattering, positive
//! alignment, uniformity KL, cluster drift, the synthetic-sample triplet, and
//! the importance-weighted quadratic penalty, plus the two composites that
//! combine them.
//!
//! Every loss is built into a caller-supplied [`ValueGraph`] and returns the
//! scalar node, so gradients come from the same reverse pass that trains the
//! networks. Inputs that must stay gradient-free (momentum targets, previous
//! prototypes, importances) are passed as constant nodes by the caller.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Blocks, ModelError, ModelState};
use crate::tensor::{DenseTensor, NodeId, TensorError, ValueGraph};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("at least one negative sample required")]
    NoNegatives,
    #[error("prototype scattering needs >= 2 clusters, got {0}")]
    DegenerateClusterCount(usize),
    #[error("prototype lists differ in length: {0} vs {1}")]
    PrototypeCountMismatch(usize, usize),
    #[error("triplet loss needs >= 2 centroids, got {0}")]
    SingleCluster(usize),
    #[error("owner cluster id {owner} out of range for {n_centroids} centroids")]
    BadOwner { owner: usize, n_centroids: usize },
    #[error("importance estimation needs a non-empty batch")]
    EmptyBatch,
    #[error("parameter block lists differ in length")]
    BlockCountMismatch,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Loss coefficients and the scales shared across phases.
///
/// All five lambdas default to 1.0 except the triplet weight at 0.1. The
/// temperature applies to prototype dot products; `sigma_psa` scales the
/// per-dimension input jitter of the alignment term; `margin_r` is the
/// triplet margin in the projected space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub lambda5: f64,
    pub tau: f64,
    pub sigma_psa: f64,
    pub margin_r: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            lambda4: 0.1,
            lambda5: 1.0,
            tau: 0.1,
            sigma_psa: 0.1,
            margin_r: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), String> {
        let nonneg = [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
            ("lambda5", self.lambda5),
            ("sigma_psa", self.sigma_psa),
            ("margin_r", self.margin_r),
        ];
        for (name, v) in nonneg {
            if !v.is_finite() || v < 0.0 {
                return Err(format!("{name} must be finite and >= 0"));
            }
        }
        if !self.tau.is_finite() || self.tau <= 0.0 {
            return Err("tau must be finite and > 0".to_string());
        }
        Ok(())
    }
}

/// Per-step component values; `total` always equals the weighted sum of the
/// active components.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub psl: f64,
    pub psa: f64,
    pub kl: f64,
    pub drift: f64,
    pub ball: f64,
    pub mas: f64,
    pub total: f64,
}

fn require_vector(g: &ValueGraph, id: NodeId, context: &'static str) -> Result<usize, LossError> {
    let shape = g.shape(id);
    if shape.len() != 1 {
        return Err(TensorError::ShapeMismatch {
            context,
            left: shape.to_vec(),
            right: vec![],
        }
        .into());
    }
    Ok(shape[0])
}

/// Instance-level contrastive reference loss:
/// `-(z . z+)/tau + log sum_i exp((z . z-_i)/tau)` over unit-normalized
/// inputs. Kept for ablation comparisons; the training path uses `psl`.
pub fn info_nce(
    g: &mut ValueGraph,
    z: NodeId,
    z_pos: NodeId,
    negatives: &[NodeId],
    tau: f64,
) -> Result<NodeId, LossError> {
    if negatives.is_empty() {
        return Err(LossError::NoNegatives);
    }
    let zn = g.l2_normalize(z, 0)?;
    let pn = g.l2_normalize(z_pos, 0)?;
    let align_dot = g.dot(zn, pn)?;
    let align = g.scale(align_dot, -1.0 / tau);
    let mut exps = Vec::with_capacity(negatives.len());
    for &neg in negatives {
        let nn = g.l2_normalize(neg, 0)?;
        let d = g.dot(zn, nn)?;
        let scaled = g.scale(d, 1.0 / tau);
        exps.push(g.exp(scaled));
    }
    let mut acc = exps[0];
    for &e in &exps[1..] {
        acc = g.add(acc, e)?;
    }
    let uniformity = g.log(acc);
    Ok(g.add(align, uniformity)?)
}

/// Prototype scattering over unit-normalized prototypes:
/// the mean alignment `-(C_c . C'_c)/tau` plus the mean over anchors of
/// `log sum_{c != s} exp((C_s . C_c)/tau)`. Differentiable in both lists.
pub fn psl(
    g: &mut ValueGraph,
    prototypes: &[NodeId],
    aug_prototypes: &[NodeId],
    tau: f64,
) -> Result<NodeId, LossError> {
    let n = prototypes.len();
    if n != aug_prototypes.len() {
        return Err(LossError::PrototypeCountMismatch(n, aug_prototypes.len()));
    }
    if n < 2 {
        return Err(LossError::DegenerateClusterCount(n));
    }
    let mut align_terms = Vec::with_capacity(n);
    for (&c, &c_aug) in prototypes.iter().zip(aug_prototypes) {
        let d = g.dot(c, c_aug)?;
        align_terms.push(g.scale(d, -1.0 / tau));
    }
    let mut align = align_terms[0];
    for &t in &align_terms[1..] {
        align = g.add(align, t)?;
    }
    align = g.scale(align, 1.0 / n as f64);

    let mut uniform_terms = Vec::with_capacity(n);
    for s in 0..n {
        let mut exps = Vec::with_capacity(n - 1);
        for c in 0..n {
            if c == s {
                continue;
            }
            let d = g.dot(prototypes[s], prototypes[c])?;
            let scaled = g.scale(d, 1.0 / tau);
            exps.push(g.exp(scaled));
        }
        let mut acc = exps[0];
        for &e in &exps[1..] {
            acc = g.add(acc, e)?;
        }
        uniform_terms.push(g.log(acc));
    }
    let mut uniformity = uniform_terms[0];
    for &t in &uniform_terms[1..] {
        uniformity = g.add(uniformity, t)?;
    }
    uniformity = g.scale(uniformity, 1.0 / n as f64);

    Ok(g.add(align, uniformity)?)
}

/// Positive-sampling alignment: squared L2 distance between the jittered
/// online projection and the target projection of the positive view. The
/// input jitter is applied by the caller before embedding; `target_out`
/// must be a constant node.
pub fn psa(g: &mut ValueGraph, online_out: NodeId, target_out: NodeId) -> Result<NodeId, LossError> {
    Ok(g.squared_distance(online_out, target_out)?)
}

/// KL divergence of softmaxed logits from the uniform distribution:
/// `log M - H(p)`, in [0, log M] for an M-vector. Per sample; the caller
/// batch-averages.
pub fn kl_uniform(g: &mut ValueGraph, logits: NodeId) -> Result<NodeId, LossError> {
    let m = require_vector(g, logits, "kl_uniform")?;
    debug_assert!(m >= 2, "kl_uniform wants M >= 2");
    let p = g.softmax(logits)?;
    // floor before the log: softmax entries can underflow to exact zero for
    // extreme logit gaps, and p log p -> 0 there anyway
    let floored = g.clamp(p, 1e-300, 1.0);
    let logp = g.log(floored);
    let plogp = g.mul(p, logp)?;
    let neg_entropy = g.sum(plogp);
    let log_m = g.constant_scalar((m as f64).ln());
    Ok(g.add(neg_entropy, log_m)?)
}

/// Cluster-drift penalty: sum of Euclidean distances between current and
/// pre-perturbation prototypes. The starred set must be constant nodes.
pub fn drift(
    g: &mut ValueGraph,
    prototypes: &[NodeId],
    prototypes_star: &[NodeId],
) -> Result<NodeId, LossError> {
    if prototypes.len() != prototypes_star.len() {
        return Err(LossError::PrototypeCountMismatch(
            prototypes.len(),
            prototypes_star.len(),
        ));
    }
    if prototypes.is_empty() {
        return Err(LossError::DegenerateClusterCount(0));
    }
    let mut terms = Vec::with_capacity(prototypes.len());
    for (&c, &c_star) in prototypes.iter().zip(prototypes_star) {
        let d = g.sub(c, c_star)?;
        terms.push(g.l2_norm(d));
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

/// Triplet loss over projected synthetic samples: for a sample owned by
/// cluster i, every other cluster j contributes
/// `max(0, d(z, C_i) + r - d(z, C_j))` with Euclidean d. The composite
/// applies the lambda4 weight, not this function.
pub fn ball_triplet(
    g: &mut ValueGraph,
    projected: &[(NodeId, usize)],
    centroids: &[NodeId],
    margin_r: f64,
) -> Result<NodeId, LossError> {
    if centroids.len() < 2 {
        return Err(LossError::SingleCluster(centroids.len()));
    }
    let mut terms = Vec::new();
    for &(z, owner) in projected {
        if owner >= centroids.len() {
            return Err(LossError::BadOwner {
                owner,
                n_centroids: centroids.len(),
            });
        }
        let diff_own = g.sub(z, centroids[owner])?;
        let d_own = g.l2_norm(diff_own);
        for (j, &c) in centroids.iter().enumerate() {
            if j == owner {
                continue;
            }
            let diff_other = g.sub(z, c)?;
            let d_other = g.l2_norm(diff_other);
            let gap = g.sub(d_own, d_other)?;
            let margin = g.constant_scalar(margin_r);
            let shifted = g.add(gap, margin)?;
            terms.push(g.relu(shifted));
        }
    }
    match terms.split_first() {
        None => Ok(g.constant_scalar(0.0)),
        Some((&first, rest)) => {
            let mut acc = first;
            for &t in rest {
                acc = g.add(acc, t)?;
            }
            Ok(acc)
        }
    }
}

/// Parameter importances: the batch mean of |d ||head(embed(x))||^2 / d w|
/// over the extractor and head parameters. Returns the importance blocks
/// under qualified keys together with the batch size, for sample-count
/// weighted accumulation across tasks.
pub fn mas_importance(
    state: &ModelState,
    inputs: &[DenseTensor],
) -> Result<(Blocks, usize), LossError> {
    if inputs.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let keys = state.trainable_keys(false);
    let key_refs: Vec<&str> = keys.iter().map(|s| s.as_str()).collect();
    let mut acc: BTreeMap<String, Vec<f64>> = keys
        .iter()
        .map(|k| (k.clone(), vec![0.0; state.qualified(k).expect("trainable").len()]))
        .collect();
    for x in inputs {
        let mut g = ValueGraph::new();
        state.declare_trainable(&mut g, false)?;
        let z = state.online_feature_node(&mut g, x.data())?;
        let zh = state.head_node(&mut g, z)?;
        let sq_norm = g.dot(zh, zh)?;
        let grads = g.gradient(sq_norm, &key_refs)?;
        for (key, grad) in grads {
            let slot = acc.get_mut(&key).expect("initialized above");
            for (s, v) in slot.iter_mut().zip(grad.data()) {
                *s += v.abs();
            }
        }
    }
    let n = inputs.len();
    let gamma: Blocks = acc
        .into_iter()
        .map(|(key, mut data)| {
            for v in data.iter_mut() {
                *v /= n as f64;
            }
            let shape = state.qualified(&key).expect("trainable").shape().to_vec();
            (key, DenseTensor::new(shape, data).expect("finite importance"))
        })
        .collect();
    Ok((gamma, n))
}

/// Importance-weighted quadratic penalty
/// `lambda5 * sum_i gamma_i (theta_i - theta_prev_i)^2`. Previous values and
/// importances must be constant nodes; the projection module is excluded by
/// construction because the caller only passes extractor and head blocks.
pub fn mas_penalty(
    g: &mut ValueGraph,
    theta: &[NodeId],
    theta_prev: &[NodeId],
    gamma: &[NodeId],
    lambda5: f64,
) -> Result<NodeId, LossError> {
    if theta.len() != theta_prev.len() || theta.len() != gamma.len() {
        return Err(LossError::BlockCountMismatch);
    }
    if theta.is_empty() {
        return Ok(g.constant_scalar(0.0));
    }
    let mut terms = Vec::with_capacity(theta.len());
    for ((&t, &p), &ga) in theta.iter().zip(theta_prev).zip(gamma) {
        let d = g.sub(t, p)?;
        let sq = g.mul(d, d)?;
        let weighted = g.mul(ga, sq)?;
        terms.push(g.sum(weighted));
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(g.scale(acc, lambda5))
}

/// Component nodes of the base-phase objective. `None` means the term is
/// disabled and contributes zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct BaseTerms {
    pub psl: Option<NodeId>,
    pub psa: Option<NodeId>,
    pub kl: Option<NodeId>,
    pub drift: Option<NodeId>,
}

/// Base-phase composite: `psl + l1*psa + l2*kl + l3*drift`. Averaging over
/// the perturbation copies is the trainer's job. Returns the total node and
/// the evaluated report.
pub fn base_loss(
    g: &mut ValueGraph,
    terms: &BaseTerms,
    weights: &LossWeights,
) -> Result<(NodeId, LossReport), LossError> {
    let weighted = [
        (terms.psl, 1.0),
        (terms.psa, weights.lambda1),
        (terms.kl, weights.lambda2),
        (terms.drift, weights.lambda3),
    ];
    let total = weighted_sum(g, &weighted)?;
    let report = LossReport {
        psl: eval_opt(g, terms.psl)?,
        psa: eval_opt(g, terms.psa)?,
        kl: eval_opt(g, terms.kl)?,
        drift: eval_opt(g, terms.drift)?,
        ball: 0.0,
        mas: 0.0,
        total: g.evaluate(total)?.item(),
    };
    Ok((total, report))
}

/// Component nodes of the few-shot objective. The `mas` node carries its own
/// lambda5 from [`mas_penalty`].
#[derive(Debug, Clone, Copy, Default)]
pub struct FewshotTerms {
    pub psl: Option<NodeId>,
    pub psa: Option<NodeId>,
    pub kl: Option<NodeId>,
    pub ball: Option<NodeId>,
    pub mas: Option<NodeId>,
}

/// Few-shot composite: `psl + l1*psa + l2*kl + l4*ball + mas`.
pub fn fewshot_loss(
    g: &mut ValueGraph,
    terms: &FewshotTerms,
    weights: &LossWeights,
) -> Result<(NodeId, LossReport), LossError> {
    let weighted = [
        (terms.psl, 1.0),
        (terms.psa, weights.lambda1),
        (terms.kl, weights.lambda2),
        (terms.ball, weights.lambda4),
        (terms.mas, 1.0),
    ];
    let total = weighted_sum(g, &weighted)?;
    let report = LossReport {
        psl: eval_opt(g, terms.psl)?,
        psa: eval_opt(g, terms.psa)?,
        kl: eval_opt(g, terms.kl)?,
        drift: 0.0,
        ball: eval_opt(g, terms.ball)?,
        mas: eval_opt(g, terms.mas)?,
        total: g.evaluate(total)?.item(),
    };
    Ok((total, report))
}

fn weighted_sum(g: &mut ValueGraph, terms: &[(Option<NodeId>, f64)]) -> Result<NodeId, LossError> {
    let mut acc: Option<NodeId> = None;
    for &(node, w) in terms {
        let Some(node) = node else { continue };
        let scaled = if w == 1.0 { node } else { g.scale(node, w) };
        acc = Some(match acc {
            None => scaled,
            Some(a) => g.add(a, scaled)?,
        });
    }
    Ok(acc.unwrap_or_else(|| g.constant_scalar(0.0)))
}

fn eval_opt(g: &mut ValueGraph, node: Option<NodeId>) -> Result<f64, LossError> {
    match node {
        None => Ok(0.0),
        Some(n) => Ok(g.evaluate(n)?.item()),
    }
}
