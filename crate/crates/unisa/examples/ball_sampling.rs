//! The ball sampler: synthetic latent points inside each cluster's
//! enclosing ball, radius law r^d, round-robin ownership.
//!
//!     cargo run --example ball_sampling

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use unisa::ball;
use unisa::clustering::ClusterSet;
use unisa::oracles;

fn main() {
    let dim = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    // containment and the radial CDF
    let centroid = vec![0.0; dim];
    let n = 50_000;
    let mut radii = Vec::with_capacity(n);
    let mut max_r: f64 = 0.0;
    for _ in 0..n {
        let z = ball::sample_ball(&centroid, 1.0, &mut rng).unwrap();
        let r = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        max_r = max_r.max(r);
        radii.push(r);
    }
    let ks = oracles::ks_statistic(&mut radii, |r| r.powi(dim as i32).clamp(0.0, 1.0));
    println!("{n} draws in {dim} dims, sigma 1");
    println!("max radius: {max_r:.6} (never exceeds sigma)");
    println!("KS statistic against the r^d law: {ks:.5}");

    // owners rotate over the populated clusters
    let clusters = ClusterSet {
        centroids: vec![vec![0.0, 0.0], vec![5.0, 0.0], vec![0.0, 5.0]],
        stds: vec![0.5, 0.8, 0.3],
        counts: vec![4, 0, 4],
        class_map: None,
    };
    let raw = ball::raw_batch(&clusters, 6, &mut rng).unwrap();
    let owners: Vec<usize> = raw.iter().map(|(_, o)| *o).collect();
    println!("owners over clusters with members (cluster 1 is empty): {owners:?}");
}
