//! Wall-time scaling against total sample count; the whole protocol is
//! linear in the data, so the least-squares fit should be close to exact.
//!
//!     cargo run --example scaling_check

use unisa::config::{scaling_benchmark, RunConfig};

fn main() {
    let mut cfg = RunConfig::default();
    // small dimensions and few epochs keep the example quick
    cfg.dataset.dim = 8;
    cfg.train.network = unisa::model::NetworkShape::dense(8, vec![32], 16, 8);
    cfg.train.epochs_base = 4;
    cfg.train.epochs_fewshot = 2;

    let sizes = [800, 1600, 3200];
    let report = scaling_benchmark(&cfg, &sizes).unwrap();
    for (n, s) in report.sizes.iter().zip(&report.seconds) {
        println!("N = {n:5}  ->  {s:7.3} s");
    }
    println!(
        "fit: time = {:.3e} * N + {:.4}   R^2 = {:.4}",
        report.slope_s_per_sample, report.intercept_s, report.r_squared
    );
}
