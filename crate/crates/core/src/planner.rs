//! Evaluation phase: Monte-Carlo planning against a feasibility model and
//! normalized-regret measurement.
//!
//! A trial samples candidate towers that use all five drawn blocks, picks
//! the candidate maximizing expected value (feasibility times reward), and
//! builds it in the simulator. Regret is measured against the best reward
//! among the analytically constructable candidates of the *same* sample
//! set, so a planner using the analytic model in a noiseless world achieves
//! regret zero by construction.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::acquisition::sample_uniform_plan;
use crate::domain::{
    constructability_labels, execute, reward, Block, NoiseConfig, Plan, TaskObjective,
};
use crate::model::{plan_feasibility_ss, predict_comp, Ensemble, ModelClass};

/// Number of blocks drawn for each planning trial.
pub const TRIAL_BLOCKS: usize = 5;

/// Feasibility model driving the planner.
#[derive(Debug, Clone)]
pub enum FeasibilityModel {
    /// Exact noiseless constructability.
    Analytical,
    /// Accepts a plan only if `n_perturb` noisy copies all stay
    /// constructable.
    Simulation { n_perturb: usize, sigma: f64 },
    /// A trained ensemble, queried per its model class.
    Learned { ensemble: Ensemble, class: ModelClass },
}

impl FeasibilityModel {
    /// The noisy-simulation baseline at its default operating point:
    /// ten perturbations of 5 mm.
    pub fn simulation_default() -> Self {
        FeasibilityModel::Simulation { n_perturb: 10, sigma: 0.005 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            FeasibilityModel::Analytical => "analytical",
            FeasibilityModel::Simulation { .. } => "simulation",
            FeasibilityModel::Learned { .. } => "learned",
        }
    }
}

/// Predicted probability that a plan is feasible. The analytic and
/// simulation baselines return hard 0/1 judgements; the generator is
/// consumed only by the simulation baseline's perturbation draws.
pub fn feasibility<R: Rng>(model: &FeasibilityModel, plan: &Plan, rng: &mut R) -> f64 {
    match model {
        FeasibilityModel::Analytical => {
            if constructability_labels(plan).iter().all(|&l| l) {
                1.0
            } else {
                0.0
            }
        }
        FeasibilityModel::Simulation { n_perturb, sigma } => {
            let noise = NoiseConfig::with_sigma(*sigma);
            for _ in 0..*n_perturb {
                if !execute(plan, &noise, rng).overall {
                    return 0.0;
                }
            }
            1.0
        }
        FeasibilityModel::Learned { ensemble, class } => match class {
            ModelClass::Comp => predict_comp(ensemble, plan),
            ModelClass::Ss => plan_feasibility_ss(ensemble, plan),
        },
    }
}

/// Outcome of one planning trial.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalResult {
    pub chosen_plan: Plan,
    /// The model's feasibility estimate for the chosen plan.
    pub predicted_feasibility: f64,
    /// Reward actually collected: the tower's value if its simulated
    /// execution stood, zero if it fell.
    pub realized_reward: f64,
    /// Best reward among analytically constructable candidates in the same
    /// sample set.
    pub v_gt: f64,
    /// (v_gt - realized) / v_gt, in [0, 1]; 1 whenever the tower fell.
    pub regret: f64,
}

fn sample_candidates<R: Rng>(blocks: &[Block], n_samples: usize, rng: &mut R) -> Vec<Plan> {
    (0..n_samples).map(|_| sample_uniform_plan(blocks, blocks.len(), rng)).collect()
}

fn argmax_expected_value<R: Rng>(
    candidates: &[Plan],
    task: TaskObjective,
    model: &FeasibilityModel,
    rng: &mut R,
) -> (usize, f64) {
    let mut best_idx = 0;
    let mut best_value = f64::NEG_INFINITY;
    let mut best_feas = 0.0;
    for (i, plan) in candidates.iter().enumerate() {
        let feas = feasibility(model, plan, rng);
        let value = feas * reward(plan, task);
        if value > best_value {
            best_value = value;
            best_idx = i;
            best_feas = feas;
        }
    }
    (best_idx, best_feas)
}

/// Sample `n_samples` towers using all the given blocks and return the one
/// with the highest expected value under the model (ties keep the first
/// sampled), along with its predicted feasibility.
pub fn monte_carlo_plan<R: Rng>(
    blocks: &[Block],
    task: TaskObjective,
    model: &FeasibilityModel,
    n_samples: usize,
    rng: &mut R,
) -> (Plan, f64) {
    assert!(n_samples >= 1);
    assert_eq!(blocks.len(), TRIAL_BLOCKS, "planning trials draw exactly five blocks");
    let candidates = sample_candidates(blocks, n_samples, rng);
    let (idx, feas) = argmax_expected_value(&candidates, task, model, rng);
    (candidates[idx].clone(), feas)
}

/// Run one full planning trial: sample candidates, pick the best under the
/// model, execute it with the evaluation noise, and score regret against
/// the analytically best candidate of the same sample set.
pub fn evaluate<R: Rng>(
    blocks: &[Block],
    task: TaskObjective,
    model: &FeasibilityModel,
    n_samples: usize,
    noise: &NoiseConfig,
    rng: &mut R,
) -> EvalResult {
    assert!(n_samples >= 1);
    assert_eq!(blocks.len(), TRIAL_BLOCKS, "planning trials draw exactly five blocks");
    let candidates = sample_candidates(blocks, n_samples, rng);
    let (idx, predicted_feasibility) = argmax_expected_value(&candidates, task, model, rng);
    let chosen_plan = candidates[idx].clone();

    let v_gt = candidates
        .iter()
        .filter(|p| constructability_labels(p).iter().all(|&l| l))
        .map(|p| reward(p, task))
        .fold(0.0, f64::max);

    let stood = execute(&chosen_plan, noise, rng).overall;
    let realized_reward = if stood { reward(&chosen_plan, task) } else { 0.0 };

    let regret = if v_gt > 0.0 {
        ((v_gt - realized_reward) / v_gt).clamp(0.0, 1.0)
    } else if realized_reward > 0.0 {
        0.0
    } else {
        1.0
    };

    EvalResult { chosen_plan, predicted_feasibility, realized_reward, v_gt, regret }
}

/// Median and quartiles of per-trial regret.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegretSummary {
    pub trials: usize,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    pub mean: f64,
}

impl RegretSummary {
    pub fn from_regrets(regrets: &[f64]) -> Self {
        assert!(!regrets.is_empty());
        let mut sorted = regrets.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        RegretSummary {
            trials: sorted.len(),
            median: quantile(&sorted, 0.5),
            q25: quantile(&sorted, 0.25),
            q75: quantile(&sorted, 0.75),
            mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
        }
    }
}

/// Linear-interpolation quantile of an already sorted slice.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty() && (0.0..=1.0).contains(&q));
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Repeat `evaluate` with fresh 5-block draws from the evaluation block set.
pub fn evaluate_suite<R: Rng>(
    model: &FeasibilityModel,
    task: TaskObjective,
    eval_blocks: &[Block],
    n_trials: usize,
    n_samples: usize,
    noise: &NoiseConfig,
    rng: &mut R,
) -> (RegretSummary, Vec<EvalResult>) {
    assert!(n_trials >= 1);
    assert!(eval_blocks.len() >= TRIAL_BLOCKS);
    let results: Vec<EvalResult> = (0..n_trials)
        .map(|_| {
            let mut idx: Vec<usize> = (0..eval_blocks.len()).collect();
            for i in 0..TRIAL_BLOCKS {
                let j = rng.gen_range(i..idx.len());
                idx.swap(i, j);
            }
            let drawn: Vec<Block> =
                idx.iter().take(TRIAL_BLOCKS).map(|&i| eval_blocks[i].clone()).collect();
            evaluate(&drawn, task, model, n_samples, noise, rng)
        })
        .collect();
    let regrets: Vec<f64> = results.iter().map(|r| r.regret).collect();
    (RegretSummary::from_regrets(&regrets), results)
}

/// Export per-trial results as CSV rows
/// (`trial,task,model,v_gt,realized,regret`).
pub fn write_results_csv<W: Write>(
    out: W,
    task: TaskObjective,
    model_name: &str,
    results: &[EvalResult],
) -> csv::Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(["trial", "task", "model", "v_gt", "realized", "regret"])?;
    for (i, r) in results.iter().enumerate() {
        writer.write_record([
            i.to_string(),
            task.name().to_string(),
            model_name.to_string(),
            r.v_gt.to_string(),
            r.realized_reward.to_string(),
            r.regret.to_string(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}
