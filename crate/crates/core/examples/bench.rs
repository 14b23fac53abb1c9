use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stackplan::acquisition::StrategyKind;
use stackplan::domain::*;
use stackplan::learner::*;
use stackplan::model::*;
use stackplan::planner::*;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let strategy = match args.get(1).map(|s| s.as_str()) {
        Some("incremental") => StrategyKind::Incremental,
        Some("random_ss") => StrategyKind::RandomSs,
        Some("greedy") => StrategyKind::Greedy,
        Some("complete") => StrategyKind::Complete,
        _ => StrategyKind::Sequential,
    };
    let seed: u64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1);
    let iters: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(36);
    let hidden: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(64);
    let lr: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(3e-3);
    let max_epochs: usize = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(60);
    let patience: usize = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(6);

    let cfg = RunConfig {
        active: ActiveLearnConfig {
            ensemble_size: 10,
            batch_size: 10,
            pool_size: 200,
            iterations: iters,
            l_max: 5,
            init_towers: 40,
            strategy,
            seed,
            ..Default::default()
        },
        model: ModelConfig { hidden, ..Default::default() },
        train: TrainConfig { learning_rate: lr, max_epochs, patience, ..Default::default() },
        accuracy_sizes: vec![],
        accuracy_per_size: 0,
        ..Default::default()
    };
    let class = strategy.model_class();

    let t0 = Instant::now();
    let (mut learner, _) = Learner::initialize(cfg.clone()).unwrap();
    let t_init = t0.elapsed().as_secs_f64();
    let mut t_iters = 0.0;
    for i in 0..iters {
        let ti = Instant::now();
        learner.run_iteration().unwrap();
        t_iters += ti.elapsed().as_secs_f64();
        if (i + 1) % 12 == 0 {
            eprintln!("  iter {} done, cumulative iter time {:.0}s, records {}", i + 1, t_iters, learner.dataset.train.len());
        }
    }

    // accuracy on held-out novel-block test sets
    let t_acc0 = Instant::now();
    let mut eval_block_rng = ChaCha8Rng::seed_from_u64(seed);
    eval_block_rng.set_stream(2);
    let eval_blocks = sample_blocks(&mut eval_block_rng, &BlockGenConfig::default(), 10, 1000).unwrap();
    let mut test_rng = ChaCha8Rng::seed_from_u64(seed);
    test_rng.set_stream(3);
    let sets = balanced_test_set(&eval_blocks, &[2, 5, 7], 1000, &mut test_rng);
    let mut accs = Vec::new();
    for (&size, towers) in &sets {
        accs.push((size, balanced_accuracy(&learner.ensemble, class, towers)));
    }
    let t_acc = t_acc0.elapsed().as_secs_f64();

    // regret on tallest tower, noiseless execution
    let t_ev0 = Instant::now();
    let model = FeasibilityModel::Learned { ensemble: learner.ensemble.clone(), class };
    let mut trial_rng = ChaCha8Rng::seed_from_u64(seed);
    trial_rng.set_stream(3 << 20);
    let (summary, _) = evaluate_suite(
        &model, TaskObjective::TallestTower, &eval_blocks, 50, 2000,
        &NoiseConfig::disabled(), &mut trial_rng,
    );
    let t_ev = t_ev0.elapsed().as_secs_f64();

    println!(
        "strategy={} seed={seed} h={hidden} lr={lr} ep={max_epochs}/{patience}: init {t_init:.0}s iters {t_iters:.0}s acc {t_acc:.0}s eval {t_ev:.0}s | accs {:?} | regret med {:.3} q25 {:.3} q75 {:.3} mean {:.3}",
        strategy.name(), accs, summary.median, summary.q25, summary.q75, summary.mean
    );
}
