//! Run configuration: a line-oriented key-value file with bracketed
//! sections, plus the experiment orchestration built on top of it (single
//! runs, the ablation sweep, and the runtime-scaling benchmark).
//!
//! An empty file is a complete, runnable default configuration. Unknown
//! keys are parse errors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{self, DataError, TaskSequence};
use crate::metrics::{self, MetricsError, RunGroup, SessionMetrics};
use crate::model::NetworkShape;
use crate::oracles;
use crate::runlog::RunLog;
use crate::trainer::{self, AblationFlags, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid value for `{field}`: {message}")]
    Validation { field: String, message: String },
    #[error("output path {0} already holds a run (metrics.json exists)")]
    OutputOccupied(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Synthetic dataset parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetParams {
    pub n_classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    pub class_sep: f64,
    pub cluster_std: f64,
    pub image_mode: bool,
    pub image_side: usize,
    pub image_noise_std: f64,
}

impl Default for DatasetParams {
    fn default() -> Self {
        Self {
            n_classes: 21,
            dim: 16,
            samples_per_class: 100,
            class_sep: 8.0,
            cluster_std: 1.0,
            image_mode: false,
            image_side: 16,
            image_noise_std: 0.1,
        }
    }
}

/// Task-splitting parameters. Defaults mirror a 21-class benchmark split
/// into a 12-class base task and three 3-way few-shot tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitParams {
    pub base_classes: usize,
    pub ways: usize,
    pub shots: usize,
    pub n_fewshot_tasks: usize,
    pub anchor_budget_base: usize,
    pub test_fraction: f64,
}

impl Default for SplitParams {
    fn default() -> Self {
        Self {
            base_classes: 12,
            ways: 3,
            shots: 5,
            n_fewshot_tasks: 3,
            anchor_budget_base: 25,
            test_fraction: 0.2,
        }
    }
}

/// Everything a run needs: dataset, split, training, ablation switches, and
/// output location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: DatasetParams,
    pub split: SplitParams,
    pub train: TrainConfig,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetParams::default(),
            split: SplitParams::default(),
            train: TrainConfig::default(),
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    /// Builds the dataset and task split this config describes, seeded from
    /// the training seed.
    pub fn build_sequence(&self) -> Result<TaskSequence, ConfigError> {
        let dataset = if self.dataset.image_mode {
            data::generate_textured_images(
                self.dataset.n_classes,
                self.dataset.image_side,
                self.dataset.samples_per_class,
                self.dataset.image_noise_std,
                self.train.seed,
            )?
        } else {
            data::generate_blobs(
                self.dataset.n_classes,
                self.dataset.dim,
                self.dataset.samples_per_class,
                self.dataset.class_sep,
                self.dataset.cluster_std,
                self.train.seed,
            )?
        };
        let (sequence, _) = data::split_tasks(
            &dataset,
            self.split.base_classes,
            self.split.ways,
            self.split.shots,
            self.split.n_fewshot_tasks,
            self.split.anchor_budget_base,
            self.split.test_fraction,
            self.train.seed,
        )?;
        Ok(sequence)
    }
}

fn parse_bool(field: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(ConfigError::Validation {
            field: field.to_string(),
            message: format!("`{value}` is not a bool"),
        }),
    }
}

fn parse_num<T: std::str::FromStr>(field: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Validation {
        field: field.to_string(),
        message: e.to_string(),
    })
}

fn parse_dims(field: &str, value: &str) -> Result<Vec<usize>, ConfigError> {
    value
        .split(',')
        .map(|p| parse_num::<usize>(field, p.trim()))
        .collect()
}

/// Parses a config file. Sections are `[dataset]`, `[split]`, `[model]`,
/// `[train]`, `[weights]`, `[augment]`, `[ablation]`, `[output]`; keys are
/// `key = value` lines; `#` starts a comment. Unknown sections or keys are
/// errors, and every numeric field is range-checked.
pub fn parse_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path)?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::default();
    let mut hidden_dims = cfg.train.network.hidden_dims.clone();
    let mut feature_dim = cfg.train.network.feature_dim;
    let mut projected_dim = cfg.train.network.projected_dim;
    let mut conv_extractor = false;
    let mut conv_channels = [4usize, 8usize];

    let mut section = String::new();
    for (i, raw_line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw_line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('[') {
            if !line.ends_with(']') {
                return Err(ConfigError::Parse {
                    line: line_no,
                    message: "unterminated section header".into(),
                });
            }
            section = line[1..line.len() - 1].trim().to_string();
            let known = [
                "dataset", "split", "model", "train", "weights", "augment", "ablation", "output",
            ];
            if !known.contains(&section.as_str()) {
                return Err(ConfigError::Parse {
                    line: line_no,
                    message: format!("unknown section `{section}`"),
                });
            }
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ConfigError::Parse {
                line: line_no,
                message: "expected `key = value`".into(),
            });
        };
        let key = key.trim();
        let value = value.trim();
        let qualified = format!("{section}.{key}");
        match qualified.as_str() {
            "dataset.n_classes" => cfg.dataset.n_classes = parse_num(&qualified, value)?,
            "dataset.dim" => cfg.dataset.dim = parse_num(&qualified, value)?,
            "dataset.samples_per_class" => {
                cfg.dataset.samples_per_class = parse_num(&qualified, value)?
            }
            "dataset.class_sep" => cfg.dataset.class_sep = parse_num(&qualified, value)?,
            "dataset.cluster_std" => cfg.dataset.cluster_std = parse_num(&qualified, value)?,
            "dataset.image_mode" => cfg.dataset.image_mode = parse_bool(&qualified, value)?,
            "dataset.image_side" => cfg.dataset.image_side = parse_num(&qualified, value)?,
            "dataset.image_noise_std" => {
                cfg.dataset.image_noise_std = parse_num(&qualified, value)?
            }
            "split.base_classes" => cfg.split.base_classes = parse_num(&qualified, value)?,
            "split.ways" => cfg.split.ways = parse_num(&qualified, value)?,
            "split.shots" => cfg.split.shots = parse_num(&qualified, value)?,
            "split.n_fewshot_tasks" => cfg.split.n_fewshot_tasks = parse_num(&qualified, value)?,
            "split.anchor_budget_base" => {
                cfg.split.anchor_budget_base = parse_num(&qualified, value)?
            }
            "split.test_fraction" => cfg.split.test_fraction = parse_num(&qualified, value)?,
            "model.hidden_dims" => hidden_dims = parse_dims(&qualified, value)?,
            "model.feature_dim" => feature_dim = parse_num(&qualified, value)?,
            "model.projected_dim" => projected_dim = parse_num(&qualified, value)?,
            "model.extractor" => match value {
                "dense" => conv_extractor = false,
                "conv" => conv_extractor = true,
                other => {
                    return Err(ConfigError::Validation {
                        field: qualified,
                        message: format!("`{other}` is not `dense` or `conv`"),
                    })
                }
            },
            "model.conv_channels" => {
                let dims = parse_dims(&qualified, value)?;
                if dims.len() != 2 {
                    return Err(ConfigError::Validation {
                        field: qualified,
                        message: "expected two comma-separated channel counts".into(),
                    });
                }
                conv_channels = [dims[0], dims[1]];
            }
            "train.epochs_base" => cfg.train.epochs_base = parse_num(&qualified, value)?,
            "train.epochs_fewshot" => cfg.train.epochs_fewshot = parse_num(&qualified, value)?,
            "train.batch_size" => cfg.train.batch_size = parse_num(&qualified, value)?,
            "train.lr_base" => cfg.train.lr_base = parse_num(&qualified, value)?,
            "train.lr_fewshot_max" => cfg.train.lr_fewshot_max = parse_num(&qualified, value)?,
            "train.lr_fewshot_min" => cfg.train.lr_fewshot_min = parse_num(&qualified, value)?,
            "train.bound_b" => cfg.train.bound_b = parse_num(&qualified, value)?,
            "train.m_perturbations" => cfg.train.m_perturbations = parse_num(&qualified, value)?,
            "train.s_synthetic" => cfg.train.s_synthetic = parse_num(&qualified, value)?,
            "train.momentum_m" => cfg.train.momentum_m = parse_num(&qualified, value)?,
            "train.seed" => cfg.train.seed = parse_num(&qualified, value)?,
            "train.sgd_momentum" => cfg.train.sgd_momentum = parse_num(&qualified, value)?,
            "train.weight_decay" => cfg.train.weight_decay = parse_num(&qualified, value)?,
            "weights.lambda1" => cfg.train.weights.lambda1 = parse_num(&qualified, value)?,
            "weights.lambda2" => cfg.train.weights.lambda2 = parse_num(&qualified, value)?,
            "weights.lambda3" => cfg.train.weights.lambda3 = parse_num(&qualified, value)?,
            "weights.lambda4" => cfg.train.weights.lambda4 = parse_num(&qualified, value)?,
            "weights.lambda5" => cfg.train.weights.lambda5 = parse_num(&qualified, value)?,
            "weights.tau" => cfg.train.weights.tau = parse_num(&qualified, value)?,
            "weights.sigma_psa" => cfg.train.weights.sigma_psa = parse_num(&qualified, value)?,
            "weights.margin_r" => cfg.train.weights.margin_r = parse_num(&qualified, value)?,
            "augment.jitter_std" => cfg.train.augment.jitter_std = parse_num(&qualified, value)?,
            "augment.scale_lo" => cfg.train.augment.scale_range.0 = parse_num(&qualified, value)?,
            "augment.scale_hi" => cfg.train.augment.scale_range.1 = parse_num(&qualified, value)?,
            "augment.flip_prob" => cfg.train.augment.flip_prob = parse_num(&qualified, value)?,
            "ablation.disable_flat" => {
                cfg.train.ablation.disable_flat = parse_bool(&qualified, value)?
            }
            "ablation.disable_wide_kl" => {
                cfg.train.ablation.disable_wide_kl = parse_bool(&qualified, value)?
            }
            "ablation.disable_psl" => {
                cfg.train.ablation.disable_psl = parse_bool(&qualified, value)?
            }
            "ablation.disable_psa" => {
                cfg.train.ablation.disable_psa = parse_bool(&qualified, value)?
            }
            "ablation.disable_ball" => {
                cfg.train.ablation.disable_ball = parse_bool(&qualified, value)?
            }
            "ablation.disable_mas" => {
                cfg.train.ablation.disable_mas = parse_bool(&qualified, value)?
            }
            "output.out_dir" => cfg.out_dir = PathBuf::from(value),
            _ => {
                return Err(ConfigError::Parse {
                    line: line_no,
                    message: format!("unknown key `{qualified}`"),
                })
            }
        }
    }

    let input_dim = if cfg.dataset.image_mode {
        cfg.dataset.image_side * cfg.dataset.image_side
    } else {
        cfg.dataset.dim
    };
    cfg.train.network = if conv_extractor {
        NetworkShape::conv(1, cfg.dataset.image_side, conv_channels, feature_dim, projected_dim)
    } else {
        NetworkShape::dense(input_dim, hidden_dims, feature_dim, projected_dim)
    };

    validate_run_config(&cfg)?;
    Ok(cfg)
}

/// Field-level validation with spec'd ranges. Stricter than
/// `TrainConfig::validate`: learning rates from a config file must be
/// positive (except the cosine floor).
fn validate_run_config(cfg: &RunConfig) -> Result<(), ConfigError> {
    let field_err = |field: &str, message: &str| ConfigError::Validation {
        field: field.to_string(),
        message: message.to_string(),
    };
    if cfg.dataset.n_classes < 2 {
        return Err(field_err("dataset.n_classes", "must be >= 2"));
    }
    if cfg.dataset.dim < 2 {
        return Err(field_err("dataset.dim", "must be >= 2"));
    }
    if cfg.dataset.class_sep <= 0.0 {
        return Err(field_err("dataset.class_sep", "must be > 0"));
    }
    if cfg.dataset.cluster_std < 0.0 {
        return Err(field_err("dataset.cluster_std", "must be >= 0"));
    }
    if !(0.0 < cfg.split.test_fraction && cfg.split.test_fraction < 1.0) {
        return Err(field_err("split.test_fraction", "must be in (0, 1)"));
    }
    if cfg.train.bound_b < 0.0 {
        return Err(field_err("train.bound_b", "must be >= 0"));
    }
    if cfg.train.lr_base <= 0.0 {
        return Err(field_err("train.lr_base", "must be > 0"));
    }
    if cfg.train.lr_fewshot_max <= 0.0 {
        return Err(field_err("train.lr_fewshot_max", "must be > 0"));
    }
    if cfg.train.lr_fewshot_min < 0.0 {
        return Err(field_err("train.lr_fewshot_min", "must be >= 0"));
    }
    if cfg.train.m_perturbations < 1 {
        return Err(field_err("train.m_perturbations", "must be >= 1"));
    }
    if cfg.train.s_synthetic < 1 {
        return Err(field_err("train.s_synthetic", "must be >= 1"));
    }
    if let Err(m) = cfg.train.weights.validate() {
        return Err(field_err("weights", &m));
    }
    cfg.train
        .validate()
        .map_err(|e| field_err("train", &e.to_string()))?;
    Ok(())
}

/// One seeded run of the configured experiment.
pub fn run_experiment(
    cfg: &RunConfig,
    seed: u64,
    log: &mut RunLog,
) -> Result<SessionMetrics, ConfigError> {
    let mut cfg = cfg.clone();
    cfg.train.seed = seed;
    let sequence = cfg.build_sequence()?;
    Ok(trainer::run_sequence(&sequence, &cfg.train, log)?)
}

/// The ablation sweep: the full configuration plus one row per disabled
/// mechanism, mirroring rows A (no flat), B (no uniformity KL), C (no
/// scattering), D (no alignment), E (no synthetic triplet).
pub fn ablation_rows() -> Vec<(&'static str, AblationFlags)> {
    let base = AblationFlags::default();
    vec![
        ("full", base),
        (
            "A_no_flat",
            AblationFlags {
                disable_flat: true,
                ..base
            },
        ),
        (
            "B_no_wide_kl",
            AblationFlags {
                disable_wide_kl: true,
                ..base
            },
        ),
        (
            "C_no_psl",
            AblationFlags {
                disable_psl: true,
                ..base
            },
        ),
        (
            "D_no_psa",
            AblationFlags {
                disable_psa: true,
                ..base
            },
        ),
        (
            "E_no_ball",
            AblationFlags {
                disable_ball: true,
                ..base
            },
        ),
    ]
}

/// Worker cap for multi-seed runs: the `UNISA_THREADS` environment variable
/// when set, otherwise the available parallelism.
pub fn worker_cap() -> usize {
    std::env::var("UNISA_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

/// Runs one named configuration across seeds, in parallel up to the worker
/// cap. Results come back in seed order regardless of scheduling.
pub fn run_seeds(
    cfg: &RunConfig,
    name: &str,
    seeds: &[u64],
    with_logs: bool,
) -> Result<RunGroup, ConfigError> {
    let cap = worker_cap().max(1);
    let mut runs: Vec<Option<SessionMetrics>> = vec![None; seeds.len()];
    let mut errors: Vec<String> = Vec::new();
    for chunk in seeds
        .iter()
        .enumerate()
        .collect::<Vec<_>>()
        .chunks(cap.max(1))
    {
        let results: Vec<(usize, Result<SessionMetrics, String>)> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&(i, &seed)| {
                    let cfg = cfg.clone();
                    let name = name.to_string();
                    scope.spawn(move || {
                        let mut log = if with_logs {
                            let dir = cfg.out_dir.join(&name);
                            std::fs::create_dir_all(&dir).ok();
                            RunLog::to_file(&dir.join(format!("runlog-seed{seed}.jsonl")))
                                .unwrap_or_else(|_| RunLog::disabled())
                        } else {
                            RunLog::disabled()
                        };
                        (
                            i,
                            run_experiment(&cfg, seed, &mut log).map_err(|e| e.to_string()),
                        )
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("worker does not panic"))
                .collect()
        });
        for (i, result) in results {
            match result {
                Ok(m) => runs[i] = Some(m),
                Err(e) => errors.push(e),
            }
        }
    }
    if let Some(e) = errors.into_iter().next() {
        return Err(ConfigError::Validation {
            field: "run".into(),
            message: e,
        });
    }
    Ok(RunGroup {
        name: name.to_string(),
        runs: runs.into_iter().map(|r| r.expect("checked above")).collect(),
    })
}

/// Wall-time fit of the full protocol against total sample count.
#[derive(Debug, Clone, Serialize)]
pub struct ScalingReport {
    pub sizes: Vec<usize>,
    pub seconds: Vec<f64>,
    pub slope_s_per_sample: f64,
    pub intercept_s: f64,
    pub r_squared: f64,
}

/// Runs the configured protocol at each total sample count (same class
/// geometry, scaled samples per class) and fits `time = a*N + c`.
pub fn scaling_benchmark(cfg: &RunConfig, sizes: &[usize]) -> Result<ScalingReport, ConfigError> {
    if sizes.len() < 3 {
        return Err(ConfigError::Validation {
            field: "sizes".into(),
            message: "need at least 3 sizes".into(),
        });
    }
    if sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(ConfigError::Validation {
            field: "sizes".into(),
            message: "sizes must be strictly increasing".into(),
        });
    }
    let mut seconds = Vec::with_capacity(sizes.len());
    let mut actual_sizes = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let mut c = cfg.clone();
        c.dataset.samples_per_class = (n / c.dataset.n_classes).max(2);
        let sequence = c.build_sequence()?;
        let total: usize = std::iter::once(&sequence.base)
            .chain(&sequence.fewshot)
            .map(|t| t.train.len() + t.test.len())
            .sum();
        let mut log = RunLog::disabled();
        let start = Instant::now();
        trainer::run_sequence(&sequence, &c.train, &mut log)?;
        seconds.push(start.elapsed().as_secs_f64());
        actual_sizes.push(total);
    }
    let xs: Vec<f64> = actual_sizes.iter().map(|&n| n as f64).collect();
    let (slope, intercept, r2) = oracles::linear_fit(&xs, &seconds);
    Ok(ScalingReport {
        sizes: actual_sizes,
        seconds,
        slope_s_per_sample: slope,
        intercept_s: intercept,
        r_squared: r2,
    })
}

/// Refuses to reuse an output directory that already holds a metrics file.
pub fn claim_out_dir(out_dir: &Path) -> Result<(), ConfigError> {
    if out_dir.join("metrics.json").exists() {
        return Err(ConfigError::OutputOccupied(out_dir.to_path_buf()));
    }
    std::fs::create_dir_all(out_dir)?;
    Ok(())
}

/// Convenience wrapper: run seeds, write `metrics.json` + `sessions.csv`.
pub fn run_and_report(
    cfg: &RunConfig,
    groups: &[(String, AblationFlags)],
    seeds: &[u64],
    reference: Option<&str>,
) -> Result<Vec<RunGroup>, ConfigError> {
    claim_out_dir(&cfg.out_dir)?;
    let mut results = Vec::with_capacity(groups.len());
    for (name, flags) in groups {
        let mut c = cfg.clone();
        c.train.ablation = *flags;
        results.push(run_seeds(&c, name, seeds, true)?);
    }
    metrics::report(&results, &cfg.out_dir, reference)?;
    Ok(results)
}

/// Lookup table used by the CLI `--shots` override.
pub fn with_shots(cfg: &RunConfig, shots: usize) -> RunConfig {
    let mut c = cfg.clone();
    c.split.shots = shots;
    c
}

/// Echo of the effective configuration, for headers and debugging.
pub fn config_echo(cfg: &RunConfig) -> serde_json::Value {
    serde_json::to_value(cfg).expect("config serializes")
}

/// Key-value map view of a config section from a parsed file, used by tests
/// that need to poke at raw fields.
pub fn to_flat_map(cfg: &RunConfig) -> BTreeMap<String, String> {
    let v = config_echo(cfg);
    let mut out = BTreeMap::new();
    flatten("", &v, &mut out);
    out
}

fn flatten(prefix: &str, v: &serde_json::Value, out: &mut BTreeMap<String, String>) {
    match v {
        serde_json::Value::Object(map) => {
            for (k, val) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, val, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.to_string());
        }
    }
}
