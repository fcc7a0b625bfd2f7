//! Synthetic latent samples drawn inside per-cluster enclosing balls, pushed
//! through the projection module to build the synthetic batch for few-shot
//! sessions.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::clustering::ClusterSet;
use crate::model::{ModelError, ModelState};
use crate::tensor::DenseTensor;

#[derive(Debug, Error)]
pub enum BallError {
    #[error("direction vector collapsed to zero norm after 8 redraws")]
    ZeroDirection,
    #[error("ball sampling needs dimension >= 2, got {0}")]
    BadDimension(usize),
    #[error("sigma must be >= 0, got {0}")]
    NegativeSigma(f64),
    #[error("empty cluster set")]
    EmptyClusterSet,
    #[error("s_count must be >= 1")]
    ZeroCount,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Projected synthetic samples with their owner clusters, plus the raw
/// pre-projection draws kept for diagnostics. Every raw draw satisfies
/// `||raw - C_owner|| <= sigma_owner`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBatch {
    pub samples: Vec<(Vec<f64>, usize)>,
    pub source_raw: Vec<Vec<f64>>,
}

/// One draw inside the ball around `centroid`: radius `u^(1/d) * sigma`
/// along a standard-normal direction, where d is the latent dimension and
/// u ~ Uniform(0,1). The radial CDF is r^d on [0, 1] in units of sigma.
pub fn sample_ball(
    centroid: &[f64],
    sigma: f64,
    rng: &mut impl Rng,
) -> Result<Vec<f64>, BallError> {
    sample_ball_with(centroid, sigma, rng, draw_direction)
}

fn draw_direction(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn sample_ball_with<R: Rng>(
    centroid: &[f64],
    sigma: f64,
    rng: &mut R,
    mut direction: impl FnMut(&mut R, usize) -> Vec<f64>,
) -> Result<Vec<f64>, BallError> {
    let dim = centroid.len();
    if dim < 2 {
        return Err(BallError::BadDimension(dim));
    }
    if sigma < 0.0 {
        return Err(BallError::NegativeSigma(sigma));
    }
    let u: f64 = rng.random_range(0.0..1.0);
    let radius = u.powf(1.0 / dim as f64) * sigma;
    for _ in 0..8 {
        let omega = direction(rng, dim);
        let norm = omega.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            continue;
        }
        return Ok(centroid
            .iter()
            .zip(&omega)
            .map(|(c, w)| c + radius * w / norm)
            .collect());
    }
    Err(BallError::ZeroDirection)
}

/// Raw draws with owners assigned round-robin over the clusters that have
/// members, in cluster-id order. Every few-shot cluster gets synthetic
/// support even at one shot.
pub fn raw_batch(
    clusters: &ClusterSet,
    s_count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<(Vec<f64>, usize)>, BallError> {
    if s_count == 0 {
        return Err(BallError::ZeroCount);
    }
    let populated: Vec<usize> = (0..clusters.n_clusters())
        .filter(|&c| clusters.counts[c] > 0)
        .collect();
    if populated.is_empty() {
        return Err(BallError::EmptyClusterSet);
    }
    let mut out = Vec::with_capacity(s_count);
    for i in 0..s_count {
        let owner = populated[i % populated.len()];
        let raw = sample_ball(&clusters.centroids[owner], clusters.stds[owner], rng)?;
        out.push((raw, owner));
    }
    Ok(out)
}

/// Draws `s_count` raw samples and projects each through the ball-projection
/// module. The trainer rebuilds the projection in-graph from `source_raw` so
/// the loss differentiates through the module's weights; the projected
/// values here serve inference-free uses and diagnostics.
pub fn synth_batch(
    clusters: &ClusterSet,
    s_count: usize,
    state: &ModelState,
    rng: &mut impl Rng,
) -> Result<SyntheticBatch, BallError> {
    let raw = raw_batch(clusters, s_count, rng)?;
    let mut samples = Vec::with_capacity(raw.len());
    let mut source_raw = Vec::with_capacity(raw.len());
    for (z, owner) in raw {
        let projected = state.project_feature(&DenseTensor::vector(z.clone()).expect("finite draw"))?;
        samples.push((projected.data().to_vec(), owner));
        source_raw.push(z);
    }
    Ok(SyntheticBatch {
        samples,
        source_raw,
    })
}
