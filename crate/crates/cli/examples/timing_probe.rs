// Scratch timing probe; not part of the deliverable surface.
use seqident::engine::{aggregate_cell, run_cell, RuleKind};
use seqident_core::model::{GroundTruth, ProblemConfig};
use seqident_core::rules::compute_thresholds;

fn main() {
    let cfg = ProblemConfig::homogeneous_gaussian(10, 1, 6, 5.0, 1e-3, 1e-3, 0.5).unwrap();
    let thr = compute_thresholds(&cfg);
    for m in [1usize, 3, 6] {
        for rule in [RuleKind::Ordering, RuleKind::Probabilistic] {
            let truth = GroundTruth::new((0..m).collect(), &cfg).unwrap();
            let start = std::time::Instant::now();
            let trials = 4000;
            let recs = run_cell(&cfg, &truth, 0, rule, &thr, trials, 7, 1_000_000).unwrap();
            let stats = aggregate_cell(rule, &truth, &recs);
            let dt = start.elapsed().as_secs_f64();
            let sd = stats.se_stopping_time * (trials as f64).sqrt();
            println!(
                "m={m} rule={:<13} meanT={:8.2} sd={:7.2} fp={:.4} fn={:.4} ratio={:.3} wall={:.2}s ({:.0} ns/step)",
                rule.label(),
                stats.mean_stopping_time,
                sd,
                stats.fp_rate,
                stats.fn_rate,
                stats.budget_ratio,
                dt,
                dt * 1e9 / (stats.mean_stopping_time * trials as f64)
            );
        }
    }
}
