//! Configuration files, subcommand drivers, and result export.
//!
//! Exit codes are fixed for scripting: 0 success, 2 configuration errors
//! (unparseable config, invalid strategy/model pairing, bad flag
//! combinations), 3 I/O errors (unwritable output), 4 unreadable or
//! corrupt checkpoints.
//!
//! The `STACKPLAN_OUT` environment variable supplies the default output
//! root when neither `--out` nor the config names one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::acquisition::StrategyKind;
use crate::domain::{
    plan_from_records, plan_to_records, ActionRecord, Block, BlockGenConfig, LabeledPlan,
    NoiseConfig, TaskObjective,
};
use crate::learner::{
    balanced_test_set, ActiveLearnConfig, Dataset, Learner, RunConfig, RunRecord,
};
use crate::model::{
    Arch, Checkpoint, ModelClass, ModelConfig, PlanReadout, SsReadout, TrainConfig,
};
use crate::planner::{evaluate_suite, FeasibilityModel, RegretSummary};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_CHECKPOINT: i32 = 4;

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "STACKPLAN_OUT";

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn config(message: impl Into<String>) -> Self {
        CliError { code: EXIT_CONFIG, message: message.into() }
    }
    fn io(message: impl Into<String>) -> Self {
        CliError { code: EXIT_IO, message: message.into() }
    }
    fn checkpoint(message: impl Into<String>) -> Self {
        CliError { code: EXIT_CHECKPOINT, message: message.into() }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.message)
    }
}

impl std::error::Error for CliError {}

/// One experiment, flattened into a single JSON document. Every field has a
/// default, so a minimal config can name just the strategy and model class;
/// the fully resolved settings are echoed into the output directory for
/// provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub arch: Arch,
    pub model_class: ModelClass,
    pub strategy: StrategyKind,

    pub ensemble_size: usize,
    pub batch_size: usize,
    pub pool_size: usize,
    pub iterations: usize,
    pub l_max: usize,
    pub init_towers: usize,
    pub init_size_range: Option<[usize; 2]>,
    pub validation_fraction: f64,
    pub noise: NoiseConfig,
    pub warm_start: bool,

    pub hidden: usize,
    pub length_scale: f64,
    pub ss_readout: SsReadout,
    pub plan_readout: PlanReadout,

    pub learning_rate: f64,
    pub train_batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,

    pub blocks: BlockGenConfig,
    pub block_count: usize,
    pub accuracy_sizes: Vec<usize>,
    pub accuracy_per_size: usize,

    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let active = ActiveLearnConfig::default();
        let model = ModelConfig::default();
        let train = TrainConfig::default();
        ExperimentConfig {
            seed: active.seed,
            arch: model.arch,
            model_class: ModelClass::Ss,
            strategy: active.strategy,
            ensemble_size: active.ensemble_size,
            batch_size: active.batch_size,
            pool_size: active.pool_size,
            iterations: active.iterations,
            l_max: active.l_max,
            init_towers: active.init_towers,
            init_size_range: active.init_size_range,
            validation_fraction: active.validation_fraction,
            noise: active.noise,
            warm_start: active.warm_start,
            hidden: model.hidden,
            length_scale: model.length_scale,
            ss_readout: model.ss_readout,
            plan_readout: model.plan_readout,
            learning_rate: train.learning_rate,
            train_batch_size: train.batch_size,
            max_epochs: train.max_epochs,
            patience: train.patience,
            blocks: BlockGenConfig::default(),
            block_count: 10,
            accuracy_sizes: (2..=7).collect(),
            accuracy_per_size: 1000,
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::config(format!("cannot parse config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.strategy.model_class() != self.model_class {
            return Err(CliError::config(format!(
                "strategy '{}' requires the {} model class",
                self.strategy.name(),
                match self.strategy.model_class() {
                    ModelClass::Comp => "comp",
                    ModelClass::Ss => "ss",
                }
            )));
        }
        self.run_config()
            .validate()
            .map_err(|e| CliError::config(e.to_string()))
    }

    pub fn run_config(&self) -> RunConfig {
        RunConfig {
            active: ActiveLearnConfig {
                ensemble_size: self.ensemble_size,
                batch_size: self.batch_size,
                pool_size: self.pool_size,
                iterations: self.iterations,
                l_max: self.l_max,
                init_towers: self.init_towers,
                init_size_range: self.init_size_range,
                validation_fraction: self.validation_fraction,
                strategy: self.strategy,
                noise: self.noise,
                seed: self.seed,
                warm_start: self.warm_start,
            },
            model: ModelConfig {
                arch: self.arch,
                hidden: self.hidden,
                length_scale: self.length_scale,
                ss_readout: self.ss_readout,
                plan_readout: self.plan_readout,
            },
            train: TrainConfig {
                learning_rate: self.learning_rate,
                batch_size: self.train_batch_size,
                max_epochs: self.max_epochs,
                patience: self.patience,
                validation_fraction: self.validation_fraction,
                seed: self.seed,
            },
            block_gen: self.blocks.clone(),
            block_count: self.block_count,
            accuracy_sizes: self.accuracy_sizes.clone(),
            accuracy_per_size: self.accuracy_per_size,
        }
    }
}

fn default_out_root() -> PathBuf {
    std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("stackplan-out"))
}

fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents)
        .and_then(|_| fs::rename(&tmp, path))
        .map_err(|e| CliError::io(format!("cannot write {}: {e}", path.display())))
}

/// Loop progress persisted alongside the dataset and model checkpoints.
#[derive(Debug, Serialize, Deserialize)]
struct LoopState {
    iteration: usize,
    towers_built: usize,
}

/// Run (or resume) the experimentation loop described by a config file.
///
/// The output directory receives `config_echo.json`, an append-only
/// `run_log.jsonl` with one record per phase, rolling `dataset_latest.json`
/// / `ensemble_latest.json` / `state.json` checkpoints, and a final
/// `ensemble_final.json`.
pub fn cmd_learn(
    config_path: &Path,
    out_override: Option<&Path>,
    resume: Option<&Path>,
) -> Result<PathBuf, CliError> {
    let cfg = ExperimentConfig::load(config_path)?;
    let run_cfg = cfg.run_config();

    let out_dir: PathBuf = match (out_override, resume, &cfg.output_dir) {
        (Some(path), _, _) => path.to_path_buf(),
        (None, Some(path), _) => path.to_path_buf(),
        (None, None, Some(path)) => path.clone(),
        (None, None, None) => default_out_root().join(format!(
            "{}-{}-seed{}",
            cfg.strategy.name(),
            match cfg.arch {
                Arch::Tgn => "tgn",
                Arch::Fcgn => "fcgn",
            },
            cfg.seed
        )),
    };
    fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::io(format!("cannot create {}: {e}", out_dir.display())))?;

    write_atomic(
        &out_dir.join("config_echo.json"),
        serde_json::to_string_pretty(&cfg).unwrap().as_bytes(),
    )?;

    let log_path = out_dir.join("run_log.jsonl");
    let mut learner;
    if let Some(resume_dir) = resume {
        let state: LoopState = read_json(&resume_dir.join("state.json"))
            .map_err(|e| CliError::checkpoint(format!("cannot resume: {e}")))?;
        let dataset: Dataset = read_json(&resume_dir.join("dataset_latest.json"))
            .map_err(|e| CliError::checkpoint(format!("cannot resume: {e}")))?;
        let ckpt = Checkpoint::load(&resume_dir.join("ensemble_latest.json"))
            .map_err(CliError::checkpoint)?;
        learner = Learner::resume(run_cfg, ckpt.ensemble(), dataset, state.iteration)
            .map_err(|e| CliError::config(e.to_string()))?;
        if !log_path.exists() {
            return Err(CliError::checkpoint(format!(
                "resume directory {} has no run_log.jsonl",
                resume_dir.display()
            )));
        }
    } else {
        let (fresh, init_record) =
            Learner::initialize(run_cfg).map_err(|e| CliError::config(e.to_string()))?;
        learner = fresh;
        fs::write(&log_path, format!("{}\n", serde_json::to_string(&init_record).unwrap()))
            .map_err(|e| CliError::io(format!("cannot write {}: {e}", log_path.display())))?;
        persist(&out_dir, &learner, &cfg)?;
    }

    while learner.iteration < cfg.iterations {
        let record = learner.run_iteration().map_err(|e| CliError::config(e.to_string()))?;
        append_log(&log_path, &record)?;
        persist(&out_dir, &learner, &cfg)?;
    }

    let final_ckpt = Checkpoint::new(&learner.ensemble, cfg.model_class, cfg.seed);
    write_atomic(
        &out_dir.join("ensemble_final.json"),
        serde_json::to_string(&final_ckpt).unwrap().as_bytes(),
    )?;
    Ok(out_dir)
}

fn append_log(path: &Path, record: &RunRecord) -> Result<(), CliError> {
    let mut file = fs::OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| CliError::io(format!("cannot open {}: {e}", path.display())))?;
    writeln!(file, "{}", serde_json::to_string(record).unwrap())
        .map_err(|e| CliError::io(format!("cannot write {}: {e}", path.display())))
}

fn persist(out_dir: &Path, learner: &Learner, cfg: &ExperimentConfig) -> Result<(), CliError> {
    write_atomic(
        &out_dir.join("dataset_latest.json"),
        serde_json::to_string(&learner.dataset).unwrap().as_bytes(),
    )?;
    let ckpt = Checkpoint::new(&learner.ensemble, cfg.model_class, cfg.seed);
    write_atomic(
        &out_dir.join("ensemble_latest.json"),
        serde_json::to_string(&ckpt).unwrap().as_bytes(),
    )?;
    let state = LoopState { iteration: learner.iteration, towers_built: learner.towers_built };
    write_atomic(&out_dir.join("state.json"), serde_json::to_string(&state).unwrap().as_bytes())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, String> {
    let text =
        fs::read_to_string(path).map_err(|e| format!("read {}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("parse {}: {e}", path.display()))
}

/// Which feasibility model `evaluate` runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalModelKind {
    Learned,
    Analytical,
    Simulation,
}

impl std::str::FromStr for EvalModelKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "learned" => Ok(EvalModelKind::Learned),
            "analytical" => Ok(EvalModelKind::Analytical),
            "simulation" => Ok(EvalModelKind::Simulation),
            other => Err(format!("unknown model '{other}'")),
        }
    }
}

/// Settings for `cmd_evaluate`.
#[derive(Debug, Clone)]
pub struct EvaluateArgs {
    pub model: EvalModelKind,
    /// Required for the learned model.
    pub checkpoint: Option<PathBuf>,
    /// `None` evaluates all three objectives.
    pub task: Option<TaskObjective>,
    pub trials: usize,
    /// Sigma of the simulation baseline's perturbations.
    pub noise_sigma: f64,
    pub n_perturb: usize,
    /// Execution noise applied when the chosen tower is built; 0 keeps the
    /// evaluation noiseless.
    pub exec_sigma: f64,
    pub n_samples: usize,
    pub seed: u64,
    /// Evaluation block set; generated from the seed when absent.
    pub blocks_file: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for EvaluateArgs {
    fn default() -> Self {
        EvaluateArgs {
            model: EvalModelKind::Analytical,
            checkpoint: None,
            task: None,
            trials: 50,
            noise_sigma: 0.005,
            n_perturb: 10,
            exec_sigma: 0.0,
            n_samples: 2000,
            seed: 0,
            blocks_file: None,
            out_dir: None,
        }
    }
}

/// Per-task summary written alongside the CSV.
#[derive(Debug, Serialize, Deserialize)]
pub struct EvaluateSummary {
    pub model: String,
    pub seed: u64,
    pub trials: usize,
    pub n_samples: usize,
    pub exec_sigma: f64,
    pub tasks: BTreeMap<String, RegretSummary>,
}

// Stream ids mirroring the learner's: evaluation blocks come from the
// held-out stream, never the training one.
const STREAM_EVAL_BLOCKS: u64 = 2;
const STREAM_EVAL_TRIALS: u64 = 3 << 20;

/// Run planning trials against a feasibility model and export per-trial
/// regrets (CSV) plus a summary (JSON).
pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<PathBuf, CliError> {
    let model = match args.model {
        EvalModelKind::Analytical => FeasibilityModel::Analytical,
        EvalModelKind::Simulation => {
            FeasibilityModel::Simulation { n_perturb: args.n_perturb, sigma: args.noise_sigma }
        }
        EvalModelKind::Learned => {
            let path = args
                .checkpoint
                .as_ref()
                .ok_or_else(|| CliError::config("--model learned requires --checkpoint"))?;
            let ckpt = Checkpoint::load(path).map_err(CliError::checkpoint)?;
            FeasibilityModel::Learned { ensemble: ckpt.ensemble(), class: ckpt.model_class }
        }
    };

    let eval_blocks: Vec<Block> = match &args.blocks_file {
        Some(path) => read_json(path).map_err(CliError::checkpoint)?,
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
            rng.set_stream(STREAM_EVAL_BLOCKS);
            crate::domain::sample_blocks(&mut rng, &BlockGenConfig::default(), 10, 1000)
                .map_err(|e| CliError::config(e.to_string()))?
        }
    };

    let tasks: Vec<TaskObjective> = match args.task {
        Some(task) => vec![task],
        None => TaskObjective::ALL.to_vec(),
    };
    let noise = if args.exec_sigma > 0.0 {
        NoiseConfig::with_sigma(args.exec_sigma)
    } else {
        NoiseConfig::disabled()
    };

    let out_dir = args
        .out_dir
        .clone()
        .unwrap_or_else(|| default_out_root().join(format!("eval-{}-seed{}", model.name(), args.seed)));
    fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::io(format!("cannot create {}: {e}", out_dir.display())))?;

    let mut csv_buf = Vec::new();
    let mut summaries = BTreeMap::new();
    {
        let mut writer = csv::Writer::from_writer(&mut csv_buf);
        writer
            .write_record(["trial", "task", "model", "v_gt", "realized", "regret"])
            .map_err(|e| CliError::io(e.to_string()))?;
        for (t, task) in tasks.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
            rng.set_stream(STREAM_EVAL_TRIALS + t as u64);
            let (summary, results) = evaluate_suite(
                &model,
                *task,
                &eval_blocks,
                args.trials,
                args.n_samples,
                &noise,
                &mut rng,
            );
            for (i, r) in results.iter().enumerate() {
                writer
                    .write_record([
                        i.to_string(),
                        task.name().to_string(),
                        model.name().to_string(),
                        r.v_gt.to_string(),
                        r.realized_reward.to_string(),
                        r.regret.to_string(),
                    ])
                    .map_err(|e| CliError::io(e.to_string()))?;
            }
            summaries.insert(task.name().to_string(), summary);
        }
        writer.flush().map_err(|e| CliError::io(e.to_string()))?;
    }
    write_atomic(&out_dir.join("results.csv"), &csv_buf)?;

    let summary = EvaluateSummary {
        model: model.name().to_string(),
        seed: args.seed,
        trials: args.trials,
        n_samples: args.n_samples,
        exec_sigma: args.exec_sigma,
        tasks: summaries,
    };
    write_atomic(
        &out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary).unwrap().as_bytes(),
    )?;
    Ok(out_dir)
}

/// One labeled tower in the oracle test-set file.
#[derive(Debug, Serialize, Deserialize)]
pub struct OracleTower {
    pub size: usize,
    pub plan: Vec<ActionRecord>,
    pub step_labels: Vec<bool>,
    pub overall: bool,
}

/// On-disk balanced oracle test set.
#[derive(Debug, Serialize, Deserialize)]
pub struct OracleFile {
    pub seed: u64,
    pub sizes: Vec<usize>,
    pub count_per_size: usize,
    pub blocks: Vec<Block>,
    pub towers: Vec<OracleTower>,
}

impl OracleFile {
    /// Rebuild the labeled plans against the embedded block set.
    pub fn labeled_plans(&self) -> Result<Vec<LabeledPlan>, String> {
        self.towers
            .iter()
            .map(|t| {
                let plan =
                    plan_from_records(&t.plan, &self.blocks).map_err(|e| e.to_string())?;
                Ok(LabeledPlan {
                    plan,
                    step_labels: t.step_labels.clone(),
                    overall: t.overall,
                })
            })
            .collect()
    }
}

/// Parse an inclusive size range written as `A..B` (or a single size `A`).
pub fn parse_size_range(text: &str) -> Result<Vec<usize>, String> {
    if let Some((lo, hi)) = text.split_once("..") {
        let lo: usize = lo.trim().parse().map_err(|_| format!("bad size range '{text}'"))?;
        let hi: usize =
            hi.trim().trim_start_matches('=').parse().map_err(|_| format!("bad size range '{text}'"))?;
        if lo < 2 || hi < lo {
            return Err(format!("size range '{text}' must satisfy 2 <= A <= B"));
        }
        Ok((lo..=hi).collect())
    } else {
        let size: usize = text.trim().parse().map_err(|_| format!("bad size '{text}'"))?;
        if size < 2 {
            return Err("tower sizes start at 2".into());
        }
        Ok(vec![size])
    }
}

/// Emit a balanced oracle-labeled test set: `count` towers per size, half
/// feasible and half infeasible, rejection-sampled against the analytic
/// oracle.
pub fn cmd_oracle(
    count: usize,
    sizes: &[usize],
    out_file: &Path,
    seed: u64,
) -> Result<(), CliError> {
    if count < 1 || sizes.is_empty() {
        return Err(CliError::config("oracle generation needs --count >= 1 and a size range"));
    }
    let mut block_rng = ChaCha8Rng::seed_from_u64(seed);
    block_rng.set_stream(STREAM_EVAL_BLOCKS);
    let max_size = *sizes.iter().max().unwrap();
    let block_count = 10.max(max_size);
    let blocks =
        crate::domain::sample_blocks(&mut block_rng, &BlockGenConfig::default(), block_count, 1000)
            .map_err(|e| CliError::config(e.to_string()))?;

    let mut tower_rng = ChaCha8Rng::seed_from_u64(seed);
    tower_rng.set_stream(STREAM_EVAL_BLOCKS + 1);
    let by_size = balanced_test_set(&blocks, sizes, count, &mut tower_rng);

    let towers: Vec<OracleTower> = by_size
        .iter()
        .flat_map(|(&size, list)| {
            list.iter().map(move |lp| OracleTower {
                size,
                plan: plan_to_records(&lp.plan),
                step_labels: lp.step_labels.clone(),
                overall: lp.overall,
            })
        })
        .collect();

    let file = OracleFile {
        seed,
        sizes: sizes.to_vec(),
        count_per_size: count,
        blocks,
        towers,
    };
    if let Some(parent) = out_file.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .map_err(|e| CliError::io(format!("cannot create {}: {e}", parent.display())))?;
        }
    }
    write_atomic(out_file, serde_json::to_string(&file).unwrap().as_bytes())
}

/// Re-evaluate a results CSV's regrets per task (used to cross-check the
/// summary medians).
pub fn regrets_from_csv(csv_text: &str) -> Result<BTreeMap<String, Vec<f64>>, String> {
    let mut reader = csv::Reader::from_reader(csv_text.as_bytes());
    let mut out: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for row in reader.records() {
        let row = row.map_err(|e| e.to_string())?;
        let task = row.get(1).ok_or("missing task column")?.to_string();
        let regret: f64 =
            row.get(5).ok_or("missing regret column")?.parse().map_err(|e| format!("{e}"))?;
        out.entry(task).or_default().push(regret);
    }
    Ok(out)
}
