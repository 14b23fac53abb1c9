//! The experimentation loop: generate a candidate pool, score it, execute
//! the most informative towers in the simulator, fold the labels into the
//! dataset, and retrain the ensemble.
//!
//! Every random draw derives from the master seed through fixed ChaCha
//! streams keyed by phase and iteration, so runs are bit-reproducible and a
//! resumed run continues exactly where the interrupted one left off.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

use crate::acquisition::{
    generate_pool, sample_uniform_plan, score_complete, score_greedy, score_incremental,
    score_sequential, select_batch, AcquisitionError, ScoredPlan, StrategyKind, SuccessSet,
};
use crate::domain::{
    execute, Block, BlockGenConfig, DomainError, LabeledPlan, NoiseConfig, Plan,
};
use crate::model::{
    augment, plan_feasibility_ss, predict_comp, train, Ensemble, Example, ModelClass,
    ModelConfig, TrainConfig,
};

#[derive(Debug, Error)]
pub enum LearnerError {
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Acquisition(#[from] AcquisitionError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

/// Loop-level settings: how many experiments, how they are chosen, and how
/// the simulator labels them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActiveLearnConfig {
    /// Ensemble size N.
    pub ensemble_size: usize,
    /// Towers executed per iteration (n_b).
    pub batch_size: usize,
    /// Candidate pool size per iteration (n_s).
    pub pool_size: usize,
    /// Number of experimentation iterations (n_i).
    pub iterations: usize,
    /// Maximum plan length.
    pub l_max: usize,
    /// Towers executed before the first iteration.
    pub init_towers: usize,
    /// Length range for initialization towers; derived from the model class
    /// when absent (2-5 for whole-plan models, 2 for per-step models).
    pub init_size_range: Option<[usize; 2]>,
    /// Fraction of collected towers routed to the validation split.
    pub validation_fraction: f64,
    pub strategy: StrategyKind,
    /// Execution noise used when labeling towers.
    pub noise: NoiseConfig,
    /// Master seed; every stream in the run derives from it.
    pub seed: u64,
    /// Retrain from current member parameters instead of fresh ones.
    pub warm_start: bool,
}

impl Default for ActiveLearnConfig {
    fn default() -> Self {
        ActiveLearnConfig {
            ensemble_size: 10,
            batch_size: 10,
            pool_size: 200,
            iterations: 36,
            l_max: 5,
            init_towers: 40,
            init_size_range: None,
            validation_fraction: 0.2,
            strategy: StrategyKind::Sequential,
            noise: NoiseConfig::disabled(),
            seed: 0,
            warm_start: true,
        }
    }
}

/// Everything a run needs: loop settings, model and optimizer settings,
/// block generation, and the held-out accuracy metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub active: ActiveLearnConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub block_gen: BlockGenConfig,
    /// Training block set size (a disjoint set of the same size backs the
    /// accuracy metric).
    pub block_count: usize,
    /// Tower sizes tracked by the held-out accuracy metric; empty disables
    /// the metric.
    pub accuracy_sizes: Vec<usize>,
    /// Towers per size in the metric set, half feasible and half not.
    pub accuracy_per_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            active: ActiveLearnConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            block_gen: BlockGenConfig::default(),
            block_count: 10,
            accuracy_sizes: (2..=7).collect(),
            accuracy_per_size: 1000,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), LearnerError> {
        let a = &self.active;
        if a.ensemble_size < 1 {
            return Err(LearnerError::InvalidConfig("ensemble_size must be >= 1".into()));
        }
        if a.batch_size > a.pool_size {
            return Err(LearnerError::InvalidConfig(format!(
                "batch_size {} exceeds pool_size {}",
                a.batch_size, a.pool_size
            )));
        }
        if a.l_max < 2 || a.l_max > self.block_count {
            return Err(LearnerError::InvalidConfig(format!(
                "l_max {} must be in 2..=block_count ({})",
                a.l_max, self.block_count
            )));
        }
        if !(0.0..1.0).contains(&a.validation_fraction) || a.validation_fraction <= 0.0 {
            return Err(LearnerError::InvalidConfig(
                "validation_fraction must be in (0, 1)".into(),
            ));
        }
        if let Some([lo, hi]) = a.init_size_range {
            if lo < 2 || lo > hi || hi > a.l_max {
                return Err(LearnerError::InvalidConfig(format!(
                    "init_size_range [{lo}, {hi}] must satisfy 2 <= lo <= hi <= l_max"
                )));
            }
        }
        self.block_gen.validate()?;
        Ok(())
    }

    fn model_class(&self) -> ModelClass {
        self.active.strategy.model_class()
    }

    fn init_sizes(&self) -> [usize; 2] {
        if let Some(range) = self.active.init_size_range {
            return range;
        }
        match self.model_class() {
            ModelClass::Comp => [2, self.active.l_max.min(5)],
            ModelClass::Ss => [2, 2],
        }
    }
}

// Stream ids for the per-phase generators. Iteration-scoped streams leave
// room for 2^20 iterations.
const STREAM_TRAIN_BLOCKS: u64 = 1;
const STREAM_EVAL_BLOCKS: u64 = 2;
const STREAM_TEST_SET: u64 = 3;
const STREAM_INIT_PLANS: u64 = 4;
const STREAM_INIT_EXEC: u64 = 5;
const STREAM_POOL_BASE: u64 = 1 << 20;
const STREAM_EXEC_BASE: u64 = 2 << 20;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn train_seed(seed: u64, iteration: usize) -> u64 {
    seed.wrapping_add(7919u64.wrapping_mul(iteration as u64 + 1))
}

fn cold_init_seed(seed: u64, iteration: usize) -> u64 {
    seed.wrapping_add(31337u64.wrapping_mul(iteration as u64 + 1))
}

/// Labeled records split for training, plus the success index that drives
/// the extension strategies. Raw counts track towers before augmentation.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
    /// Distinct towers whose every step succeeded, in observation order.
    pub successes: Vec<Plan>,
    raw_train_records: usize,
    raw_val_records: usize,
    #[serde(skip)]
    success_index: SuccessSet,
}

impl Dataset {
    pub fn raw_train_records(&self) -> usize {
        self.raw_train_records
    }

    pub fn raw_val_records(&self) -> usize {
        self.raw_val_records
    }

    pub fn success_index(&self) -> &SuccessSet {
        &self.success_index
    }

    /// Rebuild the transient success index (after deserialization).
    pub fn rebuild_index(&mut self) {
        self.success_index = SuccessSet::new();
        for plan in &self.successes {
            self.success_index.insert(plan);
        }
    }

    /// Fold one executed tower into the dataset: extract its records, pick
    /// a split that keeps the validation share on target, and append the
    /// four rotations of every record to that split.
    fn absorb(&mut self, lp: &LabeledPlan, class: ModelClass, val_fraction: f64) {
        let records = records_from_execution(lp, class);
        if records.is_empty() {
            return;
        }
        let n = records.len();
        let total_after = (self.raw_train_records + self.raw_val_records + n) as f64;
        let if_val = (self.raw_val_records + n) as f64 - val_fraction * total_after;
        let if_train = self.raw_val_records as f64 - val_fraction * total_after;
        let to_val = if_val.abs() < if_train.abs();

        let target = if to_val {
            self.raw_val_records += n;
            &mut self.validation
        } else {
            self.raw_train_records += n;
            &mut self.train
        };
        for record in records {
            for copy in augment(&LabeledPlan {
                plan: record.plan.clone(),
                step_labels: vec![record.label],
                overall: record.label,
            }) {
                target.push(Example { plan: copy.plan, label: record.label, class });
            }
        }

        if lp.overall && !self.success_index.contains(&lp.plan) {
            self.success_index.insert(&lp.plan);
            self.successes.push(lp.plan.clone());
        }
    }
}

/// Training records observed when a tower is executed.
///
/// Whole-plan models take one record per tower. Per-step models take one
/// record per *attempted* step: step 1 is assumed, steps after the first
/// failure were never tried. A tower failing at step 3 of 5 yields records
/// for steps 2 and 3 only.
pub fn records_from_execution(lp: &LabeledPlan, class: ModelClass) -> Vec<Example> {
    match class {
        ModelClass::Comp => {
            vec![Example { plan: lp.plan.clone(), label: lp.overall, class }]
        }
        ModelClass::Ss => {
            let mut records = Vec::new();
            for i in 2..=lp.plan.len() {
                let label = lp.step_labels[i - 1];
                records.push(Example { plan: lp.plan.prefix(i), label, class });
                if !label {
                    break;
                }
            }
            records
        }
    }
}

/// Per-iteration metrics, one JSON line each in the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    /// 0 is initialization; experimentation iterations count from 1.
    pub iteration: usize,
    pub towers_built: usize,
    pub train_records: usize,
    pub val_records: usize,
    pub raw_train_records: usize,
    pub raw_val_records: usize,
    /// Extension strategy found no usable successes and fell back to a
    /// random two-block pool.
    pub pool_fallback: bool,
    pub pool_score_mean: f64,
    pub pool_score_max: f64,
    /// Lowest score admitted into the executed batch.
    pub batch_score_min: f64,
    /// Balanced accuracy per tower size on the held-out oracle set.
    pub accuracy: BTreeMap<usize, f64>,
}

/// Oracle-labeled towers balanced per size, used for the held-out accuracy
/// metric. Generated by rejection sampling: draw uniform towers and keep
/// them until each size holds `per_size/2` feasible and `per_size/2`
/// infeasible ones.
pub fn balanced_test_set<R: Rng>(
    blocks: &[Block],
    sizes: &[usize],
    per_size: usize,
    rng: &mut R,
) -> BTreeMap<usize, Vec<LabeledPlan>> {
    let mut out = BTreeMap::new();
    for &size in sizes {
        let want_each = per_size / 2;
        let mut feasible = 0usize;
        let mut infeasible = 0usize;
        let mut towers = Vec::with_capacity(want_each * 2);
        while feasible < want_each || infeasible < want_each {
            let plan = sample_uniform_plan(blocks, size, rng);
            let lp = execute(&plan, &NoiseConfig::disabled(), rng);
            if lp.overall && feasible < want_each {
                feasible += 1;
                towers.push(lp);
            } else if !lp.overall && infeasible < want_each {
                infeasible += 1;
                towers.push(lp);
            }
        }
        out.insert(size, towers);
    }
    out
}

/// Balanced accuracy (mean of per-class accuracies) of the ensemble on one
/// labeled tower set, thresholding the model-class feasibility at 1/2.
pub fn balanced_accuracy(ens: &Ensemble, class: ModelClass, towers: &[LabeledPlan]) -> f64 {
    let mut hits = [0usize; 2];
    let mut counts = [0usize; 2];
    let predictions: Vec<bool> = towers
        .par_iter()
        .map(|lp| {
            let p = match class {
                ModelClass::Comp => predict_comp(ens, &lp.plan),
                ModelClass::Ss => plan_feasibility_ss(ens, &lp.plan),
            };
            p >= 0.5
        })
        .collect();
    for (lp, predicted) in towers.iter().zip(predictions) {
        let idx = lp.overall as usize;
        counts[idx] += 1;
        if predicted == lp.overall {
            hits[idx] += 1;
        }
    }
    let mut acc = 0.0;
    let mut classes = 0;
    for k in 0..2 {
        if counts[k] > 0 {
            acc += hits[k] as f64 / counts[k] as f64;
            classes += 1;
        }
    }
    acc / classes.max(1) as f64
}

/// The experimentation loop state.
pub struct Learner {
    pub cfg: RunConfig,
    pub blocks: Vec<Block>,
    pub ensemble: Ensemble,
    pub dataset: Dataset,
    /// Completed experimentation iterations (0 right after initialization).
    pub iteration: usize,
    pub towers_built: usize,
    test_set: BTreeMap<usize, Vec<LabeledPlan>>,
}

impl Learner {
    /// Build the training world, execute the initialization towers, and
    /// train the freshly initialized ensemble on them.
    pub fn initialize(cfg: RunConfig) -> Result<(Learner, RunRecord), LearnerError> {
        cfg.validate()?;
        let seed = cfg.active.seed;
        let class = cfg.model_class();

        let mut block_rng = stream_rng(seed, STREAM_TRAIN_BLOCKS);
        let blocks = crate::domain::sample_blocks(&mut block_rng, &cfg.block_gen, cfg.block_count, 0)?;

        let test_set = if cfg.accuracy_sizes.is_empty() {
            BTreeMap::new()
        } else {
            let mut eval_block_rng = stream_rng(seed, STREAM_EVAL_BLOCKS);
            let eval_blocks = crate::domain::sample_blocks(
                &mut eval_block_rng,
                &cfg.block_gen,
                cfg.block_count,
                1000,
            )?;
            let mut test_rng = stream_rng(seed, STREAM_TEST_SET);
            balanced_test_set(&eval_blocks, &cfg.accuracy_sizes, cfg.accuracy_per_size, &mut test_rng)
        };

        let [size_lo, size_hi] = cfg.init_sizes();
        let mut plan_rng = stream_rng(seed, STREAM_INIT_PLANS);
        let mut exec_rng = stream_rng(seed, STREAM_INIT_EXEC);
        let mut dataset = Dataset::default();
        for _ in 0..cfg.active.init_towers {
            let size = plan_rng.gen_range(size_lo..=size_hi);
            let plan = sample_uniform_plan(&blocks, size, &mut plan_rng);
            let lp = execute(&plan, &cfg.active.noise, &mut exec_rng);
            dataset.absorb(&lp, class, cfg.active.validation_fraction);
        }

        let fresh = Ensemble::init(cfg.model, cfg.active.ensemble_size, seed);
        let train_cfg = TrainConfig { seed: train_seed(seed, 0), ..cfg.train };
        let ensemble = train(&fresh, &dataset.train, &dataset.validation, &train_cfg);

        let mut learner = Learner {
            cfg,
            blocks,
            ensemble,
            dataset,
            iteration: 0,
            towers_built: 0,
            test_set,
        };
        learner.towers_built = learner.cfg.active.init_towers;
        let record = learner.record(0, false, 0.0, 0.0, 0.0);
        Ok((learner, record))
    }

    /// Restore a run from persisted state; the test set and block world are
    /// regenerated from the master seed.
    pub fn resume(
        cfg: RunConfig,
        ensemble: Ensemble,
        mut dataset: Dataset,
        iteration: usize,
    ) -> Result<Learner, LearnerError> {
        cfg.validate()?;
        dataset.rebuild_index();
        let seed = cfg.active.seed;
        let mut block_rng = stream_rng(seed, STREAM_TRAIN_BLOCKS);
        let blocks = crate::domain::sample_blocks(&mut block_rng, &cfg.block_gen, cfg.block_count, 0)?;
        let test_set = if cfg.accuracy_sizes.is_empty() {
            BTreeMap::new()
        } else {
            let mut eval_block_rng = stream_rng(seed, STREAM_EVAL_BLOCKS);
            let eval_blocks = crate::domain::sample_blocks(
                &mut eval_block_rng,
                &cfg.block_gen,
                cfg.block_count,
                1000,
            )?;
            let mut test_rng = stream_rng(seed, STREAM_TEST_SET);
            balanced_test_set(&eval_blocks, &cfg.accuracy_sizes, cfg.accuracy_per_size, &mut test_rng)
        };
        let towers_built = cfg.active.init_towers + iteration * cfg.active.batch_size;
        Ok(Learner { cfg, blocks, ensemble, dataset, iteration, towers_built, test_set })
    }

    /// One experimentation iteration: pool, score, execute the top batch,
    /// absorb the labels, retrain.
    pub fn run_iteration(&mut self) -> Result<RunRecord, LearnerError> {
        let iter = self.iteration + 1;
        let seed = self.cfg.active.seed;
        let strategy = self.cfg.active.strategy;
        let class = self.cfg.model_class();

        let mut pool_rng = stream_rng(seed, STREAM_POOL_BASE + iter as u64);
        let pool = generate_pool(
            strategy,
            &self.dataset.successes,
            &self.blocks,
            &mut pool_rng,
            self.cfg.active.pool_size,
            self.cfg.active.l_max,
        )?;

        let scored: Vec<ScoredPlan> = if strategy.bypasses_scoring() {
            pool.plans.iter().map(|p| ScoredPlan { plan: p.clone(), score: 0.0 }).collect()
        } else {
            let ens = &self.ensemble;
            let successes = self.dataset.success_index();
            pool.plans
                .par_iter()
                .map(|plan| {
                    let score = match strategy {
                        StrategyKind::Complete => score_complete(ens, plan),
                        StrategyKind::Sequential => score_sequential(ens, plan),
                        StrategyKind::Incremental => score_incremental(ens, successes, plan),
                        StrategyKind::Greedy => score_greedy(ens, plan),
                        StrategyKind::RandomComp | StrategyKind::RandomSs => 0.0,
                    };
                    ScoredPlan { plan: plan.clone(), score }
                })
                .collect()
        };

        let batch = select_batch(&scored, self.cfg.active.batch_size);
        let batch_score_min = {
            let mut scores: Vec<f64> = scored.iter().map(|s| s.score).collect();
            scores.sort_by(|a, b| b.partial_cmp(a).unwrap());
            scores[batch.len() - 1]
        };

        let mut exec_rng = stream_rng(seed, STREAM_EXEC_BASE + iter as u64);
        for plan in &batch {
            let lp = execute(plan, &self.cfg.active.noise, &mut exec_rng);
            self.dataset.absorb(&lp, class, self.cfg.active.validation_fraction);
        }

        let start = if self.cfg.active.warm_start {
            self.ensemble.clone()
        } else {
            Ensemble::init(self.cfg.model, self.cfg.active.ensemble_size, cold_init_seed(seed, iter))
        };
        let train_cfg = TrainConfig { seed: train_seed(seed, iter), ..self.cfg.train };
        self.ensemble = train(&start, &self.dataset.train, &self.dataset.validation, &train_cfg);

        self.iteration = iter;
        self.towers_built += batch.len();

        let pool_score_mean =
            scored.iter().map(|s| s.score).sum::<f64>() / scored.len().max(1) as f64;
        let pool_score_max = scored.iter().map(|s| s.score).fold(0.0, f64::max);
        Ok(self.record(iter, pool.fallback, pool_score_mean, pool_score_max, batch_score_min))
    }

    fn record(
        &self,
        iteration: usize,
        pool_fallback: bool,
        pool_score_mean: f64,
        pool_score_max: f64,
        batch_score_min: f64,
    ) -> RunRecord {
        let class = self.cfg.model_class();
        let accuracy: BTreeMap<usize, f64> = self
            .test_set
            .iter()
            .map(|(&size, towers)| (size, balanced_accuracy(&self.ensemble, class, towers)))
            .collect();
        RunRecord {
            iteration,
            towers_built: self.towers_built,
            train_records: self.dataset.train.len(),
            val_records: self.dataset.validation.len(),
            raw_train_records: self.dataset.raw_train_records,
            raw_val_records: self.dataset.raw_val_records,
            pool_fallback,
            pool_score_mean,
            pool_score_max,
            batch_score_min,
            accuracy,
        }
    }

    /// Towers labeled per size by the held-out metric set (empty when the
    /// metric is disabled).
    pub fn test_set(&self) -> &BTreeMap<usize, Vec<LabeledPlan>> {
        &self.test_set
    }
}

/// Run initialization plus `iterations` loop steps, collecting one record
/// per phase. Fully deterministic in the master seed.
pub fn run(cfg: RunConfig) -> Result<Vec<RunRecord>, LearnerError> {
    let iterations = cfg.active.iterations;
    let (mut learner, init_record) = Learner::initialize(cfg)?;
    let mut records = vec![init_record];
    for _ in 0..iterations {
        records.push(learner.run_iteration()?);
    }
    Ok(records)
}
