//! Seeded k-means with restarts on synthetic blobs, checked against the
//! true labels under the best cluster-to-class matching.
//!
//!     cargo run --example clustering

use unisa::clustering::{self, ClusterSet};
use unisa::data;
use unisa::oracles;

fn main() {
    let dataset = data::generate_blobs(6, 8, 80, 8.0, 1.0, 42).unwrap();
    let (clusters, assignments) =
        clustering::kmeans_restarts(&dataset.features, 6, 42, 10, 100, 1e-6).unwrap();

    let inertia = clustering::inertia(&dataset.features, &clusters.centroids, &assignments);
    let acc = oracles::matched_clustering_accuracy(&assignments, &dataset.labels);
    println!("6 blobs x 80 samples in 8 dims");
    println!("inertia: {inertia:.2}");
    println!("matched clustering accuracy: {acc:.4}");
    println!("cluster sizes: {:?}", clusters.counts);
    println!("cluster spreads: {:?}", round3(&clusters.stds));

    // nearest-centroid assignment for a fresh point
    let probe = dataset.features[0].clone();
    let id = clustering::assign(&probe, &clusters).unwrap();
    println!("first sample lands in cluster {id}");

    // the set serializes for inspection
    let json = clusters.to_json();
    let back = ClusterSet::from_json(&json).unwrap();
    assert_eq!(clusters, back);
    println!("cluster set JSON round-trips ({} bytes)", json.len());
}

fn round3(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| (x * 1000.0).round() / 1000.0).collect()
}
