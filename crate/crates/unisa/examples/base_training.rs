//! The flat-wide base phase on its own: unsupervised training on the
//! 12-class base task, then pseudo-label quality against the hidden truth.
//!
//!     cargo run --example base_training

use unisa::clustering;
use unisa::data;
use unisa::model::{ModelState, NetworkPath};
use unisa::oracles;
use unisa::runlog::RunLog;
use unisa::tensor::DenseTensor;
use unisa::trainer::{train_base, TrainConfig};

fn main() {
    let dataset = data::generate_blobs(12, 16, 100, 8.0, 1.0, 0).unwrap();
    let (seq, _) = data::split_tasks(&dataset, 12, 2, 1, 0, 25, 0.2, 0).unwrap();
    let cfg = TrainConfig::default();
    println!(
        "base task: {} samples, {} classes, {} epochs, M = {} perturbations, bound b = {}",
        seq.base.train.len(),
        seq.base.class_ids.len(),
        cfg.epochs_base,
        cfg.m_perturbations,
        cfg.bound_b
    );

    let log_path = std::env::temp_dir().join("unisa-base-training.jsonl");
    let mut log = RunLog::to_file(&log_path).unwrap();
    let state = ModelState::init(cfg.network.clone(), cfg.bound_b, cfg.momentum_m, cfg.seed).unwrap();
    let start = std::time::Instant::now();
    let (model, clusters) = train_base(&seq.base, state, &cfg, &mut log).unwrap();
    log.flush();
    println!("trained in {:.1} s; run log at {}", start.elapsed().as_secs_f64(), log_path.display());

    let pseudo: Vec<usize> = seq
        .base
        .train
        .iter()
        .map(|x| {
            let z = model
                .embed_head(&DenseTensor::vector(x.clone()).unwrap(), NetworkPath::Target)
                .unwrap();
            clustering::assign(z.data(), &clusters).unwrap()
        })
        .collect();
    let acc = oracles::matched_clustering_accuracy(&pseudo, &seq.base.train_truth);
    println!("pseudo-label accuracy under the best label matching: {acc:.4}");
    println!(
        "anchor snapshot in place: {}, importances over {} samples",
        model.phi_anchor().is_some(),
        model.gamma_samples()
    );
}
