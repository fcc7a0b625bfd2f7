//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line
//! (run with `--nocapture` to see them on success). Timed criteria hold a
//! global gate so their budgets are measured without interference from
//! parallel test threads.

use std::collections::BTreeMap;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use unisa::clustering;
use unisa::config::{ablation_rows, DatasetParams, RunConfig, SplitParams};
use unisa::data;
use unisa::losses::{self, BaseTerms, FewshotTerms, LossWeights};
use unisa::model::{ModelState, NetworkPath, NetworkShape};
use unisa::oracles;
use unisa::runlog::RunLog;
use unisa::tensor::{DenseTensor, NodeId, ValueGraph};
use unisa::trainer::{self, AblationFlags, TrainConfig};

static GATE: Mutex<()> = Mutex::new(());

fn gate() -> MutexGuard<'static, ()> {
    GATE.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

/// The benchmark configuration: 21-class blobs, a 12-class base task plus
/// three 3-way 5-shot tasks. Mirrors configs/benchmark.conf.
fn benchmark_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    cfg.weights.tau = 0.14;
    cfg
}

fn benchmark_split(seed: u64) -> data::TaskSequence {
    let dataset = data::generate_blobs(21, 16, 100, 8.0, 1.0, seed).unwrap();
    let (seq, _) = data::split_tasks(&dataset, 12, 3, 5, 3, 25, 0.2, seed).unwrap();
    seq
}

const BENCH_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct BenchResults {
    /// group name -> mean average accuracy over the five seeds
    group_avg: BTreeMap<String, f64>,
    /// worst-seed base-task clustering accuracy under the best matching
    worst_base_matched: f64,
    elapsed_s: f64,
}

fn bench() -> &'static BenchResults {
    static CELL: OnceLock<BenchResults> = OnceLock::new();
    CELL.get_or_init(|| {
        let start = Instant::now();
        let mut group_avg = BTreeMap::new();

        let mut rows: Vec<(String, AblationFlags, usize)> = vec![
            ("full".to_string(), AblationFlags::default(), 5),
            ("frozen".to_string(), AblationFlags::default(), 0),
        ];
        for (name, flags) in ablation_rows().into_iter().skip(1) {
            rows.push((name.to_string(), flags, 5));
        }

        for (name, flags, epochs_fs) in rows {
            let mut total = 0.0;
            for &seed in &BENCH_SEEDS {
                let seq = benchmark_split(seed);
                let mut cfg = benchmark_config(seed);
                cfg.epochs_fewshot = epochs_fs;
                cfg.ablation = flags;
                let metrics =
                    trainer::run_sequence(&seq, &cfg, &mut RunLog::disabled()).unwrap();
                total += metrics.average_accuracy / BENCH_SEEDS.len() as f64;
            }
            group_avg.insert(name, total);
        }

        // base-session clustering accuracy, Hungarian-matched, per seed
        let mut worst_base_matched = f64::INFINITY;
        for &seed in &BENCH_SEEDS {
            let seq = benchmark_split(seed);
            let cfg = benchmark_config(seed);
            let sess = trainer::base_session(&seq, &cfg, &mut RunLog::disabled()).unwrap();
            let pseudo: Vec<usize> = seq
                .base
                .train
                .iter()
                .map(|x| {
                    let z = sess
                        .model
                        .embed_head(
                            &DenseTensor::vector(x.clone()).unwrap(),
                            NetworkPath::Target,
                        )
                        .unwrap();
                    clustering::assign(z.data(), &sess.clusters[0]).unwrap()
                })
                .collect();
            let acc = oracles::matched_clustering_accuracy(&pseudo, &seq.base.train_truth);
            worst_base_matched = worst_base_matched.min(acc);
        }

        BenchResults {
            group_avg,
            worst_base_matched,
            elapsed_s: start.elapsed().as_secs_f64(),
        }
    })
}

// ---- criterion 1: gradient suite ----

fn fd_rel_err(
    params: &BTreeMap<String, DenseTensor>,
    build: impl Fn(&mut ValueGraph, &BTreeMap<String, NodeId>) -> NodeId,
) -> f64 {
    let mut g = ValueGraph::new();
    let mut ids = BTreeMap::new();
    for (k, v) in params {
        ids.insert(k.clone(), g.parameter_with(k, v.clone()).unwrap());
    }
    let root = build(&mut g, &ids);
    let names: Vec<&str> = params.keys().map(|s| s.as_str()).collect();
    let ad = g.gradient(root, &names).unwrap();
    let mut f = |bind: &BTreeMap<String, DenseTensor>| {
        for (k, v) in bind {
            g.bind(k, v.clone()).unwrap();
        }
        g.evaluate(root).unwrap().item()
    };
    let fd = oracles::finite_difference(&mut f, params, 1e-4);
    oracles::gradient_rel_err(&ad, &fd)
}

fn unit_vec(rng: &mut ChaCha8Rng, d: usize) -> DenseTensor {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.3 {
            return DenseTensor::vector(v.into_iter().map(|x| x / n).collect()).unwrap();
        }
    }
}

fn plain_vec(rng: &mut ChaCha8Rng, d: usize, lo: f64, hi: f64) -> DenseTensor {
    DenseTensor::vector((0..d).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// z kept off the triplet kink with at least one open hinge.
fn triplet_sample(rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let z: Vec<f64> = vec![rng.random_range(0.1..0.4), rng.random_range(-0.3..0.3)];
        let d_own = (z[0] * z[0] + z[1] * z[1]).sqrt();
        let d_other = ((z[0] - 0.6).powi(2) + z[1] * z[1]).sqrt();
        if d_own + 0.5 - d_other > 1e-3 {
            return z;
        }
    }
}

#[test]
fn criterion_1_gradient_suite() {
    let _g = gate();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut bump = |name: &'static str, err: f64, worst: &mut BTreeMap<&str, f64>| {
        let slot = worst.entry(name).or_insert(0.0);
        if err > *slot {
            *slot = err;
        }
    };

    for _ in 0..20 {
        // psl over three prototypes, both lists differentiable
        let mut params = BTreeMap::new();
        for i in 0..3 {
            params.insert(format!("c{i}"), unit_vec(&mut rng, 5));
            params.insert(format!("a{i}"), unit_vec(&mut rng, 5));
        }
        let err = fd_rel_err(&params, |g, ids| {
            let c: Vec<_> = (0..3).map(|i| ids[&format!("c{i}")]).collect();
            let a: Vec<_> = (0..3).map(|i| ids[&format!("a{i}")]).collect();
            losses::psl(g, &c, &a, 0.5).unwrap()
        });
        bump("psl", err, &mut worst);

        // psa with a constant target
        let mut params = BTreeMap::new();
        params.insert("online".to_string(), plain_vec(&mut rng, 6, -1.0, 1.0));
        let target = plain_vec(&mut rng, 6, -1.0, 1.0);
        let err = fd_rel_err(&params, |g, ids| {
            let t = g.constant(target.clone());
            losses::psa(g, ids["online"], t).unwrap()
        });
        bump("psa", err, &mut worst);

        // kl on random logits
        let mut params = BTreeMap::new();
        params.insert("l".to_string(), plain_vec(&mut rng, 6, -2.0, 2.0));
        let err = fd_rel_err(&params, |g, ids| losses::kl_uniform(g, ids["l"]).unwrap());
        bump("kl_uniform", err, &mut worst);

        // drift against constant starred prototypes
        let mut params = BTreeMap::new();
        for i in 0..3 {
            params.insert(format!("c{i}"), unit_vec(&mut rng, 4));
        }
        let stars: Vec<DenseTensor> = (0..3).map(|_| unit_vec(&mut rng, 4)).collect();
        let err = fd_rel_err(&params, |g, ids| {
            let c: Vec<_> = (0..3).map(|i| ids[&format!("c{i}")]).collect();
            let s: Vec<_> = stars.iter().map(|t| g.constant(t.clone())).collect();
            losses::drift(g, &c, &s).unwrap()
        });
        bump("drift", err, &mut worst);

        // triplet with an open hinge
        let mut params = BTreeMap::new();
        params.insert(
            "z".to_string(),
            DenseTensor::vector(triplet_sample(&mut rng)).unwrap(),
        );
        let err = fd_rel_err(&params, |g, ids| {
            let c0 = g.constant_vector(&[0.0, 0.0]);
            let c1 = g.constant_vector(&[0.6, 0.0]);
            losses::ball_triplet(g, &[(ids["z"], 0)], &[c0, c1], 0.5).unwrap()
        });
        bump("ball_triplet", err, &mut worst);

        // importance penalty
        let mut params = BTreeMap::new();
        params.insert("t".to_string(), plain_vec(&mut rng, 6, -1.0, 1.0));
        let prev = plain_vec(&mut rng, 6, -1.0, 1.0);
        let gamma = plain_vec(&mut rng, 6, 0.0, 2.0);
        let err = fd_rel_err(&params, |g, ids| {
            let p = g.constant(prev.clone());
            let ga = g.constant(gamma.clone());
            losses::mas_penalty(g, &[ids["t"]], &[p], &[ga], 0.7).unwrap()
        });
        bump("mas_penalty", err, &mut worst);

        // instance-level contrastive reference
        let mut params = BTreeMap::new();
        params.insert("z".to_string(), unit_vec(&mut rng, 5));
        params.insert("zp".to_string(), unit_vec(&mut rng, 5));
        params.insert("n0".to_string(), unit_vec(&mut rng, 5));
        params.insert("n1".to_string(), unit_vec(&mut rng, 5));
        let err = fd_rel_err(&params, |g, ids| {
            losses::info_nce(g, ids["z"], ids["zp"], &[ids["n0"], ids["n1"]], 0.5).unwrap()
        });
        bump("info_nce", err, &mut worst);

        // the base composite over live component graphs
        let mut params = BTreeMap::new();
        for i in 0..2 {
            params.insert(format!("c{i}"), unit_vec(&mut rng, 4));
        }
        params.insert("online".to_string(), plain_vec(&mut rng, 4, -1.0, 1.0));
        params.insert("l".to_string(), plain_vec(&mut rng, 4, -2.0, 2.0));
        let target = plain_vec(&mut rng, 4, -1.0, 1.0);
        let stars: Vec<DenseTensor> = (0..2).map(|_| unit_vec(&mut rng, 4)).collect();
        let aug: Vec<DenseTensor> = (0..2).map(|_| unit_vec(&mut rng, 4)).collect();
        let weights = LossWeights::default();
        let err = fd_rel_err(&params, |g, ids| {
            let c: Vec<_> = (0..2).map(|i| ids[&format!("c{i}")]).collect();
            let a: Vec<_> = aug.iter().map(|t| g.constant(t.clone())).collect();
            let s: Vec<_> = stars.iter().map(|t| g.constant(t.clone())).collect();
            let t = g.constant(target.clone());
            let terms = BaseTerms {
                psl: Some(losses::psl(g, &c, &a, 0.5).unwrap()),
                psa: Some(losses::psa(g, ids["online"], t).unwrap()),
                kl: Some(losses::kl_uniform(g, ids["l"]).unwrap()),
                drift: Some(losses::drift(g, &c, &s).unwrap()),
            };
            losses::base_loss(g, &terms, &weights).unwrap().0
        });
        bump("base_loss", err, &mut worst);

        // the few-shot composite
        let mut params = BTreeMap::new();
        for i in 0..2 {
            params.insert(format!("c{i}"), unit_vec(&mut rng, 4));
        }
        params.insert("online".to_string(), plain_vec(&mut rng, 4, -1.0, 1.0));
        params.insert("l".to_string(), plain_vec(&mut rng, 4, -2.0, 2.0));
        params.insert(
            "z".to_string(),
            DenseTensor::vector(triplet_sample(&mut rng)).unwrap(),
        );
        params.insert("t".to_string(), plain_vec(&mut rng, 6, -1.0, 1.0));
        let target = plain_vec(&mut rng, 4, -1.0, 1.0);
        let aug: Vec<DenseTensor> = (0..2).map(|_| unit_vec(&mut rng, 4)).collect();
        let prev = plain_vec(&mut rng, 6, -1.0, 1.0);
        let gamma = plain_vec(&mut rng, 6, 0.0, 2.0);
        let err = fd_rel_err(&params, |g, ids| {
            let c: Vec<_> = (0..2).map(|i| ids[&format!("c{i}")]).collect();
            let a: Vec<_> = aug.iter().map(|t| g.constant(t.clone())).collect();
            let t = g.constant(target.clone());
            let c0 = g.constant_vector(&[0.0, 0.0]);
            let c1 = g.constant_vector(&[0.6, 0.0]);
            let p = g.constant(prev.clone());
            let ga = g.constant(gamma.clone());
            let terms = FewshotTerms {
                psl: Some(losses::psl(g, &c, &a, 0.5).unwrap()),
                psa: Some(losses::psa(g, ids["online"], t).unwrap()),
                kl: Some(losses::kl_uniform(g, ids["l"]).unwrap()),
                ball: Some(
                    losses::ball_triplet(g, &[(ids["z"], 0)], &[c0, c1], 0.5).unwrap(),
                ),
                mas: Some(losses::mas_penalty(g, &[ids["t"]], &[p], &[ga], 0.7).unwrap()),
            };
            losses::fewshot_loss(g, &terms, &weights).unwrap().0
        });
        bump("fewshot_loss", err, &mut worst);
    }

    let elapsed = start.elapsed().as_secs_f64();
    let max_err = worst.values().cloned().fold(0.0f64, f64::max);
    let pass = max_err < 1e-4 && elapsed < 60.0;
    println!(
        "criterion 1 (gradient suite): {} — max rel err {max_err:.2e} over {:?}, {elapsed:.1} s",
        if pass { "PASS" } else { "FAIL" },
        worst.keys().collect::<Vec<_>>()
    );
    assert!(max_err < 1e-4, "worst errors: {worst:?}");
    assert!(elapsed < 60.0, "gradient suite took {elapsed:.1} s");
}

#[test]
fn criterion_2_ball_generator() {
    let _g = gate();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);

    // containment: ten thousand draws per cluster
    let clusters = [
        (vec![0.0; 16], 0.7),
        (vec![1.5; 16], 1.3),
        (vec![-2.0; 16], 0.05),
    ];
    let mut max_ratio = 0.0f64;
    for (centroid, sigma) in &clusters {
        for _ in 0..10_000 {
            let z = unisa::ball::sample_ball(centroid, *sigma, &mut rng).unwrap();
            let r = z
                .iter()
                .zip(centroid)
                .map(|(a, c)| (a - c) * (a - c))
                .sum::<f64>()
                .sqrt();
            max_ratio = max_ratio.max(r / sigma);
        }
    }

    // radial law at one hundred thousand draws
    let dim = 16;
    let centroid = vec![0.0; dim];
    let mut radii = Vec::with_capacity(100_000);
    for _ in 0..100_000 {
        let z = unisa::ball::sample_ball(&centroid, 1.0, &mut rng).unwrap();
        radii.push(z.iter().map(|v| v * v).sum::<f64>().sqrt());
    }
    let ks = oracles::ks_statistic(&mut radii, |r| r.powi(dim as i32).clamp(0.0, 1.0));

    let elapsed = start.elapsed().as_secs_f64();
    let pass = max_ratio <= 1.0 + 1e-12 && ks < 0.02 && elapsed < 10.0;
    println!(
        "criterion 2 (ball generator): {} — max radius ratio {max_ratio:.9}, KS {ks:.4}, {elapsed:.1} s",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(max_ratio <= 1.0 + 1e-12);
    assert!(ks < 0.02, "KS statistic {ks}");
    assert!(elapsed < 10.0, "ball checks took {elapsed:.1} s");
}

#[test]
fn criterion_3_kl_bounds() {
    let _g = gate();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for m in [2usize, 4, 8] {
        let bound = (m as f64).ln();
        for _ in 0..1000 {
            let logits: Vec<f64> = (0..m).map(|_| rng.random_range(-40.0..40.0)).collect();
            let mut g = ValueGraph::new();
            let l = g.constant(DenseTensor::vector(logits).unwrap());
            let kl = losses::kl_uniform(&mut g, l).unwrap();
            let v = g.evaluate(kl).unwrap().item();
            assert!(v >= -1e-12 && v <= bound + 1e-9, "M {m}: kl {v}");
        }
        // endpoints
        let mut g = ValueGraph::new();
        let flat = g.constant(DenseTensor::zeros(&[m]));
        let kl = losses::kl_uniform(&mut g, flat).unwrap();
        assert!(g.evaluate(kl).unwrap().item().abs() < 1e-9);

        let mut g = ValueGraph::new();
        let mut hot = vec![0.0; m];
        hot[0] = 50.0;
        let h = g.constant(DenseTensor::vector(hot).unwrap());
        let kl = losses::kl_uniform(&mut g, h).unwrap();
        assert!((g.evaluate(kl).unwrap().item() - bound).abs() < 1e-6);
    }
    println!("criterion 3 (KL bounds): PASS — 3000 random logit vectors within [0, log M], endpoints exact");
}

#[test]
fn criterion_4_clamp_invariant() {
    let _g = gate();
    let seq = benchmark_split(0);
    let cfg = benchmark_config(0);
    assert_eq!(cfg.bound_b, 0.01);
    let mut sess = trainer::base_session(&seq, &cfg, &mut RunLog::disabled()).unwrap();
    let mut violations = 0usize;
    for task in &seq.fewshot {
        // the trainer asserts the band in-loop at every epoch boundary and
        // errors out on any violation
        sess = match trainer::train_fewshot(task, sess, &cfg, &mut RunLog::disabled()) {
            Ok(s) => s,
            Err(e) => panic!("in-loop clamp invariant violated: {e}"),
        };
        let dev = sess.model.max_anchor_deviation().unwrap();
        if dev > cfg.bound_b + 1e-12 {
            violations += 1;
        }
    }
    let dev = sess.model.max_anchor_deviation().unwrap();
    println!(
        "criterion 4 (clamp invariant): {} — {violations} violations, final max |phi - anchor| = {dev:.6} <= b + 1e-12",
        if violations == 0 { "PASS" } else { "FAIL" }
    );
    assert_eq!(violations, 0);
}

#[test]
fn criterion_5_kmeans_oracle() {
    let _g = gate();
    let start = Instant::now();
    let mut hits = 0usize;
    let mut cases = 0usize;
    let mut case_seed = 0u64;
    while cases < 100 {
        let mut rng = ChaCha8Rng::seed_from_u64(case_seed);
        case_seed += 1;
        let n = rng.random_range(2..=8);
        let pts: Vec<Vec<f64>> = (0..n)
            .map(|_| vec![rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)])
            .collect();
        let distinct: std::collections::BTreeSet<Vec<u64>> = pts
            .iter()
            .map(|p| p.iter().map(|v| v.to_bits()).collect())
            .collect();
        if distinct.len() < 2 {
            continue;
        }
        cases += 1;
        let (set, assign) =
            clustering::kmeans_restarts(&pts, 2, case_seed, 20, 200, 1e-12).unwrap();
        let obj = clustering::inertia(&pts, &set.centroids, &assign);
        let (best, _) = oracles::brute_force_two_means(&pts);
        if obj <= best + 1e-9 {
            hits += 1;
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let pass = hits == 100 && elapsed < 5.0;
    println!(
        "criterion 5 (k-means vs brute force): {} — {hits}/100 global optima, {elapsed:.2} s",
        if pass { "PASS" } else { "FAIL" }
    );
    assert_eq!(hits, 100);
    assert!(elapsed < 5.0, "k-means oracle took {elapsed:.2} s");
}

#[test]
fn criterion_6a_base_clustering() {
    let _g = gate();
    let b = bench();
    let pass = b.worst_base_matched >= 0.90;
    println!(
        "criterion 6a (base clustering >= 0.90): {} — worst seed {:.4}, benchmark total {:.0} s",
        if pass { "PASS" } else { "FAIL" },
        b.worst_base_matched,
        b.elapsed_s
    );
    assert!(b.elapsed_s < 300.0, "benchmark took {:.0} s", b.elapsed_s);
    assert!(pass, "worst-seed base clustering {:.4}", b.worst_base_matched);
}

#[test]
fn criterion_6b_beats_frozen_baseline() {
    let _g = gate();
    let b = bench();
    let full = b.group_avg["full"];
    let frozen = b.group_avg["frozen"];
    let gap_points = (full - frozen) * 100.0;
    let pass = gap_points >= 5.0;
    println!(
        "criterion 6b (full >= frozen + 5 points): {} — full {:.2}%, frozen {:.2}%, gap {gap_points:+.2} points",
        if pass { "PASS" } else { "FAIL" },
        full * 100.0,
        frozen * 100.0
    );
    assert!(
        pass,
        "adaptation gap over the update-free baseline is {gap_points:+.2} points, below the required +5"
    );
}

#[test]
fn criterion_6c_full_beats_each_ablation() {
    let _g = gate();
    let b = bench();
    let full = b.group_avg["full"];
    let mut all_pass = true;
    let mut detail = String::new();
    for name in ["A_no_flat", "B_no_wide_kl", "C_no_psl", "D_no_psa", "E_no_ball"] {
        let avg = b.group_avg[name];
        let ok = full >= avg;
        all_pass &= ok;
        detail.push_str(&format!("{name} {:+.2} ", (full - avg) * 100.0));
    }
    println!(
        "criterion 6c (full >= each ablation): {} — margins in points: {detail}",
        if all_pass { "PASS" } else { "FAIL" }
    );
    assert!(all_pass, "ablation margins: {detail}");
}

#[test]
fn criterion_7_linear_complexity() {
    let _g = gate();
    let start = Instant::now();
    let cfg = RunConfig {
        dataset: DatasetParams::default(),
        split: SplitParams::default(),
        train: benchmark_config(0),
        out_dir: std::env::temp_dir().join("unisa-acceptance-bench"),
    };
    let report = unisa::config::scaling_benchmark(&cfg, &[1000, 2000, 4000, 8000]).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    let pass = report.r_squared >= 0.95 && elapsed < 600.0;
    println!(
        "criterion 7 (linear runtime): {} — R^2 = {:.4} over N = {:?} ({:?} s), total {elapsed:.0} s",
        if pass { "PASS" } else { "FAIL" },
        report.r_squared,
        report.sizes,
        report
            .seconds
            .iter()
            .map(|s| (s * 100.0).round() / 100.0)
            .collect::<Vec<_>>()
    );
    assert!(report.r_squared >= 0.95, "R^2 = {}", report.r_squared);
    assert!(elapsed < 600.0, "scaling benchmark took {elapsed:.0} s");
}

#[test]
fn criterion_8_deterministic_metrics() {
    let _g = gate();
    // identical config and seed, two fresh runs, byte-identical metrics.json
    let run_once = |dir: &std::path::Path| {
        let dataset = data::generate_blobs(15, 16, 100, 8.0, 1.0, 3).unwrap();
        let (seq, _) = data::split_tasks(&dataset, 12, 3, 5, 1, 25, 0.2, 3).unwrap();
        let mut cfg = benchmark_config(3);
        cfg.epochs_base = 8;
        cfg.epochs_fewshot = 3;
        let metrics = trainer::run_sequence(&seq, &cfg, &mut RunLog::disabled()).unwrap();
        let group = unisa::metrics::RunGroup {
            name: "unisa".to_string(),
            runs: vec![metrics],
        };
        let paths = unisa::metrics::report(&[group], dir, None).unwrap();
        std::fs::read(paths.metrics_json).unwrap()
    };
    let base = std::env::temp_dir().join(format!("unisa-determinism-{}", std::process::id()));
    let a = run_once(&base.join("a"));
    let b = run_once(&base.join("b"));
    let pass = a == b;
    println!(
        "criterion 8 (deterministic replay): {} — two metrics.json files of {} bytes are byte-identical",
        if pass { "PASS" } else { "FAIL" },
        a.len()
    );
    std::fs::remove_dir_all(&base).ok();
    assert!(pass);
}

#[test]
fn criterion_9_moving_average_endpoints() {
    let _g = gate();
    let shape = NetworkShape::dense(6, vec![12], 8, 6);

    // m = 1 keeps the target fixed bit-for-bit
    let mut fixed = ModelState::init(shape.clone(), 0.01, 1.0, 11).unwrap();
    let before = fixed.phi_target().clone();
    let w = fixed.qualified("phi.l0.w").unwrap().clone();
    let moved =
        DenseTensor::new(w.shape().to_vec(), w.data().iter().map(|v| v + 0.7).collect()).unwrap();
    fixed.set_qualified("phi.l0.w", moved.clone()).unwrap();
    fixed.momentum_update();
    let fixed_ok = &before == fixed.phi_target();

    // m = 0 copies the online extractor exactly
    let mut copy = ModelState::init(shape, 0.01, 0.0, 11).unwrap();
    copy.set_qualified("phi.l0.w", moved).unwrap();
    copy.momentum_update();
    let copy_ok = copy.phi_target() == copy.phi()
        && copy
            .phi_target()
            .values()
            .zip(copy.phi().values())
            .all(|(a, b)| {
                a.data()
                    .iter()
                    .zip(b.data())
                    .all(|(x, y)| x.to_bits() == y.to_bits())
            });

    let pass = fixed_ok && copy_ok;
    println!(
        "criterion 9 (moving-average endpoints): {} — m=1 fixed point {fixed_ok}, m=0 exact copy {copy_ok}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(fixed_ok);
    assert!(copy_ok);
}
