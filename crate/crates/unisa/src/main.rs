//! Thin command-line front end. The library and the runnable examples are
//! the primary interface; this binary wires them to config files and output
//! directories.
//!
//! Verbs:
//!   run     one experiment (optionally multi-seed), writes metrics + CSV
//!   ablate  the full model plus the five single-mechanism ablations
//!   bench   runtime-scaling fit over growing dataset sizes
//!   oracle  independent reference computations, printed for inspection

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use unisa::config::{self, RunConfig};
use unisa::oracles;
use unisa::tensor::{DenseTensor, ValueGraph};
use unisa::trainer::AblationFlags;
use unisa::{ball, clustering, losses};

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match dispatch(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

struct Flags {
    config: Option<PathBuf>,
    seeds: Vec<u64>,
    out: Option<PathBuf>,
    shots: Option<usize>,
}

fn parse_flags(args: &[String]) -> Result<Flags, String> {
    let mut flags = Flags {
        config: None,
        seeds: Vec::new(),
        out: None,
        shots: None,
    };
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let mut value = |name: &str| {
            it.next()
                .cloned()
                .ok_or_else(|| format!("{name} needs a value"))
        };
        match arg.as_str() {
            "--config" => flags.config = Some(PathBuf::from(value("--config")?)),
            "--seed" => flags
                .seeds
                .push(value("--seed")?.parse().map_err(|e| format!("--seed: {e}"))?),
            "--out" => flags.out = Some(PathBuf::from(value("--out")?)),
            "--shots" => {
                flags.shots = Some(value("--shots")?.parse().map_err(|e| format!("--shots: {e}"))?)
            }
            other => return Err(format!("unknown flag `{other}`")),
        }
    }
    Ok(flags)
}

fn load_config(flags: &Flags) -> Result<RunConfig, Box<dyn std::error::Error>> {
    let mut cfg = match &flags.config {
        Some(path) => config::parse_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &flags.out {
        cfg.out_dir = out.clone();
    }
    if let Some(shots) = flags.shots {
        cfg = config::with_shots(&cfg, shots);
    }
    Ok(cfg)
}

fn dispatch(args: &[String]) -> Result<(), Box<dyn std::error::Error>> {
    let Some(verb) = args.first() else {
        print_usage();
        return Err("missing command".into());
    };
    let flags = parse_flags(&args[1..])?;
    match verb.as_str() {
        "run" => cmd_run(&flags),
        "ablate" => cmd_ablate(&flags),
        "bench" => cmd_bench(&flags),
        "oracle" => cmd_oracle(),
        "--help" | "help" => {
            print_usage();
            Ok(())
        }
        other => {
            print_usage();
            Err(format!("unknown command `{other}`").into())
        }
    }
}

fn print_usage() {
    eprintln!(
        "usage: unisa <run|ablate|bench|oracle> [--config PATH] [--seed N]... [--out DIR] [--shots K]

  run     train the configured task sequence and report session accuracies
  ablate  run the full model and ablations A-E, with gap columns vs full
  bench   fit wall time against dataset size (expects linear scaling)
  oracle  print the independent reference computations

Seeds repeat for multi-seed runs; UNISA_THREADS caps parallel workers."
    );
}

fn seeds_of(flags: &Flags, cfg: &RunConfig) -> Vec<u64> {
    if flags.seeds.is_empty() {
        vec![cfg.train.seed]
    } else {
        flags.seeds.clone()
    }
}

fn cmd_run(flags: &Flags) -> Result<(), Box<dyn std::error::Error>> {
    let cfg = load_config(flags)?;
    let seeds = seeds_of(flags, &cfg);
    println!(
        "running {} seed(s) on {} classes ({} base + {}x{}-way, {}-shot) -> {}",
        seeds.len(),
        cfg.dataset.n_classes,
        cfg.split.base_classes,
        cfg.split.n_fewshot_tasks,
        cfg.split.ways,
        cfg.split.shots,
        cfg.out_dir.display()
    );
    let groups = config::run_and_report(
        &cfg,
        &[("unisa".to_string(), AblationFlags::default())],
        &seeds,
        None,
    )?;
    print_group_table(&groups);
    Ok(())
}

fn cmd_ablate(flags: &Flags) -> Result<(), Box<dyn std::error::Error>> {
    let cfg = load_config(flags)?;
    let seeds = seeds_of(flags, &cfg);
    let rows: Vec<(String, AblationFlags)> = config::ablation_rows()
        .into_iter()
        .map(|(n, f)| (n.to_string(), f))
        .collect();
    println!(
        "ablation sweep over {} seed(s) -> {}",
        seeds.len(),
        cfg.out_dir.display()
    );
    let groups = config::run_and_report(&cfg, &rows, &seeds, Some("full"))?;
    print_group_table(&groups);
    Ok(())
}

fn print_group_table(groups: &[unisa::metrics::RunGroup]) {
    let n_sessions = groups
        .first()
        .and_then(|g| g.runs.first())
        .map_or(0, |r| r.session_accuracy.len());
    print!("{:<12}", "method");
    for s in 1..=n_sessions {
        print!("  session_{s}");
    }
    println!("        avg");
    for g in groups {
        print!("{:<12}", g.name);
        let means = g.mean_session_accuracy();
        let stds = g.std_session_accuracy();
        for (m, s) in means.iter().zip(&stds) {
            print!("  {:5.2}±{:4.2}", m * 100.0, s * 100.0);
        }
        println!(
            "  {:5.2}±{:4.2}",
            g.mean_average_accuracy() * 100.0,
            g.std_average_accuracy() * 100.0
        );
    }
}

fn cmd_bench(flags: &Flags) -> Result<(), Box<dyn std::error::Error>> {
    let cfg = load_config(flags)?;
    let sizes = [1000, 2000, 4000, 8000];
    println!("scaling benchmark over total sample counts {sizes:?}");
    let report = config::scaling_benchmark(&cfg, &sizes)?;
    for (n, s) in report.sizes.iter().zip(&report.seconds) {
        println!("  N = {n:6}  ->  {s:8.2} s");
    }
    println!(
        "fit: time = {:.3e} * N + {:.3}  (R^2 = {:.4})",
        report.slope_s_per_sample, report.intercept_s, report.r_squared
    );
    if let Some(out) = &flags.out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("bench.json"), serde_json::to_string_pretty(&report)?)?;
        println!("wrote {}", out.join("bench.json").display());
    }
    Ok(())
}

/// Prints the independent reference computations the test suite freezes its
/// expectations against.
fn cmd_oracle() -> Result<(), Box<dyn std::error::Error>> {
    println!("== finite-difference gradient checks (rel err, 20 instances each) ==");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (name, max_err) in [
        ("psl", fd_psl(&mut rng)),
        ("info_nce", fd_info_nce(&mut rng)),
        ("kl_uniform", fd_kl(&mut rng)),
        ("drift", fd_drift(&mut rng)),
        ("ball_triplet", fd_ball(&mut rng)),
        ("mas_penalty", fd_mas(&mut rng)),
    ] {
        println!("  {name:12} max rel err {max_err:.3e}");
    }

    println!("== hand values ==");
    println!("  info_nce aligned pair, orthogonal negative, tau 1: -1");
    println!("  psl two identical unit prototypes, tau 1: 0");
    println!("  psl two orthogonal prototypes, tau 1: -1");
    println!("  kl(uniform logits, M=4): 0");
    println!("  kl(one-hot limit, M=4): ln 4 = {:.6}", 4.0f64.ln());
    println!(
        "  kl(half-mass limit, M=4): ln 2 = {:.6} (direct sum {:.6})",
        2.0f64.ln(),
        oracles::kl_from_uniform_direct(&[0.5, 0.5, 0.0, 0.0])
    );
    println!(
        "  half-normal mean for sigma 0.1: {:.6}",
        oracles::half_normal_mean(0.1)
    );

    println!("== k-means vs exhaustive two-cluster enumeration ==");
    let mut hits = 0;
    for case in 0..100u64 {
        let mut crng = ChaCha8Rng::seed_from_u64(case);
        let n = crng.random_range(2..=8);
        let pts: Vec<Vec<f64>> = (0..n)
            .map(|_| vec![crng.random_range(-5.0..5.0), crng.random_range(-5.0..5.0)])
            .collect();
        let distinct: std::collections::BTreeSet<Vec<u64>> = pts
            .iter()
            .map(|p| p.iter().map(|v| v.to_bits()).collect())
            .collect();
        if distinct.len() < 2 {
            hits += 1;
            continue;
        }
        let (set, assign) = clustering::kmeans_restarts(&pts, 2, case, 20, 200, 1e-12)?;
        let obj = clustering::inertia(&pts, &set.centroids, &assign);
        let (best, _) = oracles::brute_force_two_means(&pts);
        if obj <= best + 1e-9 {
            hits += 1;
        }
    }
    println!("  global optimum reached in {hits}/100 random instances");

    println!("== ball sampler radial law ==");
    let dim = 5;
    let mut radii = Vec::with_capacity(100_000);
    let centroid = vec![0.0; dim];
    let mut brng = ChaCha8Rng::seed_from_u64(7);
    let mut max_ratio = 0.0f64;
    for _ in 0..100_000 {
        let z = ball::sample_ball(&centroid, 1.0, &mut brng)?;
        let r = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        max_ratio = max_ratio.max(r);
        radii.push(r);
    }
    let ks = oracles::ks_statistic(&mut radii, |r| r.powi(dim as i32).clamp(0.0, 1.0));
    println!("  dim {dim}: KS statistic vs r^d = {ks:.5}, max radius ratio {max_ratio:.6}");

    println!("== linear fit sanity ==");
    let (a, c, r2) = oracles::linear_fit(&[1.0, 2.0, 3.0, 4.0], &[3.0, 5.0, 7.0, 9.0]);
    println!("  exact line: slope {a}, intercept {c}, R^2 {r2}");
    Ok(())
}

fn fd_check(
    params: &BTreeMap<String, DenseTensor>,
    build: impl Fn(&mut ValueGraph, &BTreeMap<String, unisa::tensor::NodeId>) -> unisa::tensor::NodeId,
) -> f64 {
    let mut g = ValueGraph::new();
    let mut ids = BTreeMap::new();
    for (k, v) in params {
        ids.insert(k.clone(), g.parameter_with(k, v.clone()).expect("fresh name"));
    }
    let root = build(&mut g, &ids);
    let names: Vec<&str> = params.keys().map(|s| s.as_str()).collect();
    let ad = g.gradient(root, &names).expect("scalar root");
    let mut f = |bind: &BTreeMap<String, DenseTensor>| {
        for (k, v) in bind {
            g.bind(k, v.clone()).expect("declared");
        }
        g.evaluate(root).expect("forward").item()
    };
    let fd = oracles::finite_difference(&mut f, params, 1e-4);
    oracles::gradient_rel_err(&ad, &fd)
}

fn unit_vec(rng: &mut ChaCha8Rng, d: usize) -> DenseTensor {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.3 {
            return DenseTensor::vector(v.into_iter().map(|x| x / n).collect()).expect("finite");
        }
    }
}

fn fd_psl(rng: &mut ChaCha8Rng) -> f64 {
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let mut params = BTreeMap::new();
        for i in 0..3 {
            params.insert(format!("c{i}"), unit_vec(rng, 5));
            params.insert(format!("a{i}"), unit_vec(rng, 5));
        }
        let err = fd_check(&params, |g, ids| {
            let c: Vec<_> = (0..3).map(|i| ids[&format!("c{i}")]).collect();
            let a: Vec<_> = (0..3).map(|i| ids[&format!("a{i}")]).collect();
            losses::psl(g, &c, &a, 0.5).expect("valid psl")
        });
        worst = worst.max(err);
    }
    worst
}

fn fd_info_nce(rng: &mut ChaCha8Rng) -> f64 {
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let mut params = BTreeMap::new();
        params.insert("z".to_string(), unit_vec(rng, 5));
        params.insert("zp".to_string(), unit_vec(rng, 5));
        params.insert("n0".to_string(), unit_vec(rng, 5));
        params.insert("n1".to_string(), unit_vec(rng, 5));
        let err = fd_check(&params, |g, ids| {
            losses::info_nce(g, ids["z"], ids["zp"], &[ids["n0"], ids["n1"]], 0.5)
                .expect("valid info_nce")
        });
        worst = worst.max(err);
    }
    worst
}

fn fd_kl(rng: &mut ChaCha8Rng) -> f64 {
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let mut params = BTreeMap::new();
        let logits: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
        params.insert("l".to_string(), DenseTensor::vector(logits).expect("finite"));
        let err = fd_check(&params, |g, ids| {
            losses::kl_uniform(g, ids["l"]).expect("valid kl")
        });
        worst = worst.max(err);
    }
    worst
}

fn fd_drift(rng: &mut ChaCha8Rng) -> f64 {
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let mut params = BTreeMap::new();
        for i in 0..3 {
            params.insert(format!("c{i}"), unit_vec(rng, 4));
        }
        let stars: Vec<DenseTensor> = (0..3).map(|_| unit_vec(rng, 4)).collect();
        let err = fd_check(&params, |g, ids| {
            let c: Vec<_> = (0..3).map(|i| ids[&format!("c{i}")]).collect();
            let s: Vec<_> = stars.iter().map(|t| g.constant(t.clone())).collect();
            losses::drift(g, &c, &s).expect("valid drift")
        });
        worst = worst.max(err);
    }
    worst
}

fn fd_ball(rng: &mut ChaCha8Rng) -> f64 {
    // instances filtered so some hinge is active and none sits on the kink
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < 20 {
        let z: Vec<f64> = vec![rng.random_range(0.1..0.4), rng.random_range(-0.3..0.3)];
        let other = [0.6f64, 0.0];
        let d_own = (z[0] * z[0] + z[1] * z[1]).sqrt();
        let d_other = ((z[0] - other[0]).powi(2) + z[1] * z[1]).sqrt();
        let margin = d_own + 0.5 - d_other;
        if margin.abs() < 1e-3 || margin < 0.0 {
            continue;
        }
        done += 1;
        let mut params = BTreeMap::new();
        params.insert("z".to_string(), DenseTensor::vector(z).expect("finite"));
        let err = fd_check(&params, |g, ids| {
            let c0 = g.constant_vector(&[0.0, 0.0]);
            let c1 = g.constant_vector(&other);
            losses::ball_triplet(g, &[(ids["z"], 0)], &[c0, c1], 0.5).expect("valid triplet")
        });
        worst = worst.max(err);
    }
    worst
}

fn fd_mas(rng: &mut ChaCha8Rng) -> f64 {
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let mut params = BTreeMap::new();
        let theta: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        params.insert("t".to_string(), DenseTensor::vector(theta).expect("finite"));
        let prev: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let gamma: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..2.0)).collect();
        let err = fd_check(&params, |g, ids| {
            let p = g.constant_vector(&prev);
            let ga = g.constant_vector(&gamma);
            losses::mas_penalty(g, &[ids["t"]], &[p], &[ga], 0.7).expect("valid penalty")
        });
        worst = worst.max(err);
    }
    worst
}
