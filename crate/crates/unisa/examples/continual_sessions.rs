//! The full class-incremental protocol: a 12-class base session followed by
//! three 3-way 5-shot sessions, evaluated each time over every class seen
//! so far. Labels touch nothing but the cluster naming at inference.
//!
//!     cargo run --example continual_sessions

use unisa::data;
use unisa::runlog::RunLog;
use unisa::trainer::{run_sequence, TrainConfig};

fn main() {
    let seed = 0;
    let dataset = data::generate_blobs(21, 16, 100, 8.0, 1.0, seed).unwrap();
    let (seq, manifest) = data::split_tasks(&dataset, 12, 3, 5, 3, 25, 0.2, seed).unwrap();
    println!(
        "5-shot split over 21 classes: base {:?}, then {} tasks of {} classes",
        seq.base.class_ids.len(),
        seq.fewshot.len(),
        seq.fewshot[0].class_ids.len()
    );
    println!(
        "base anchors: {} labeled of {} train samples; few-shot anchors: all {} per task",
        seq.base.anchors.len(),
        seq.base.train.len(),
        seq.fewshot[0].anchors.len()
    );
    let _ = manifest;

    let mut cfg = TrainConfig { seed, ..TrainConfig::default() };
    cfg.weights.tau = 0.14;
    let start = std::time::Instant::now();
    let metrics = run_sequence(&seq, &cfg, &mut RunLog::disabled()).unwrap();

    println!("\nsession  classes  accuracy");
    for (i, (acc, classes)) in metrics
        .session_accuracy
        .iter()
        .zip(&metrics.classes_seen)
        .enumerate()
    {
        println!("{:>7}  {:>7}  {:>7.2}%", i + 1, classes, acc * 100.0);
    }
    println!(
        "average: {:.2}%   ({:.1} s total)",
        metrics.average_accuracy * 100.0,
        start.elapsed().as_secs_f64()
    );
}
