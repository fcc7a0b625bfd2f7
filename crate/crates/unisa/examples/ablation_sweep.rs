//! The five single-mechanism ablations against the full model on a reduced
//! benchmark (one seed; the acceptance suite runs five).
//!
//!     cargo run --example ablation_sweep

use unisa::config::ablation_rows;
use unisa::data;
use unisa::runlog::RunLog;
use unisa::trainer::{run_sequence, TrainConfig};

fn main() {
    let seed = 0;
    let dataset = data::generate_blobs(21, 16, 100, 8.0, 1.0, seed).unwrap();
    let (seq, _) = data::split_tasks(&dataset, 12, 3, 5, 3, 25, 0.2, seed).unwrap();

    let mut full_avg = None;
    println!("{:<14} {:>8}  {}", "row", "avg", "gap to full (points)");
    for (name, flags) in ablation_rows() {
        let mut cfg = TrainConfig { seed, ..TrainConfig::default() };
        cfg.weights.tau = 0.14;
        cfg.ablation = flags;
        let metrics = run_sequence(&seq, &cfg, &mut RunLog::disabled()).unwrap();
        let avg = metrics.average_accuracy;
        if full_avg.is_none() {
            full_avg = Some(avg);
        }
        let gap = (avg - full_avg.unwrap()) * 100.0;
        println!("{name:<14} {:>7.2}%  {gap:+.2}", avg * 100.0);
    }
}
