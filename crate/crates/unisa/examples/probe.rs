// Temporary diagnostics; superseded by the real examples.

use unisa::data;
use unisa::model::NetworkShape;
use unisa::runlog::RunLog;
use unisa::trainer::{run_sequence, TrainConfig};

fn final_config(seed: u64) -> TrainConfig {
    let mut c = TrainConfig {
        network: NetworkShape::dense(16, vec![64, 64], 32, 16),
        seed,
        ..TrainConfig::default()
    };
    c.weights.tau = 0.14;
    c
}

fn main() {
    // benchmark geometry: session means for full and frozen
    for (name, epochs_fs) in [("full", 5usize), ("frozen", 0)] {
        let mut sessions = [0.0f64; 4];
        for seed in 0..5u64 {
            let dataset = data::generate_blobs(21, 16, 100, 8.0, 1.0, seed).unwrap();
            let (seq, _) = data::split_tasks(&dataset, 12, 3, 5, 3, 25, 0.2, seed).unwrap();
            let mut cfg = final_config(seed);
            cfg.epochs_fewshot = epochs_fs;
            let m = run_sequence(&seq, &cfg, &mut RunLog::disabled()).unwrap();
            for (s, a) in sessions.iter_mut().zip(&m.session_accuracy) {
                *s += a / 5.0;
            }
        }
        println!("{name}: sessions {sessions:?}");
    }
    // single few-shot task variant for the session-2 check (15 classes)
    let mut gap2 = 0.0;
    let mut wins = 0;
    for seed in 0..5u64 {
        let dataset = data::generate_blobs(15, 16, 100, 8.0, 1.0, seed).unwrap();
        let (seq, _) = data::split_tasks(&dataset, 12, 3, 5, 1, 25, 0.2, seed).unwrap();
        let mut cfg = final_config(seed);
        let full = run_sequence(&seq, &cfg, &mut RunLog::disabled()).unwrap();
        cfg.epochs_fewshot = 0;
        let frozen = run_sequence(&seq, &cfg, &mut RunLog::disabled()).unwrap();
        let g = full.session_accuracy[1] - frozen.session_accuracy[1];
        println!("seed {seed}: s2 full {:.4} frozen {:.4} gap {:+.4}", full.session_accuracy[1], frozen.session_accuracy[1], g);
        gap2 += g / 5.0;
        wins += (g >= 0.0) as usize;
    }
    println!("session-2 mean gap {gap2:+.4}, wins {wins}/5");
}
