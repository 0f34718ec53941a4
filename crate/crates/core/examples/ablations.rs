//! Runs the toy order and reward ablations and prints one row each.
//!
//! Usage: `cargo run --release --example ablations -- [steps] [seed]`

use std::time::Instant;

use tforge::grpo::{run_experiment, TrainConfig};
use tforge::reward::{RewardComponents, RewardConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(500);
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    let on = RewardComponents::default();
    let rows: Vec<(&str, &str, RewardComponents)> = vec![
        ("full", "cAd", on),
        ("no-distill", "cAd", RewardComponents { distill: false, ..on }),
        ("no-gate", "cAd", RewardComponents { gate: false, ..on }),
        ("no-sim", "cAd", RewardComponents { sim: false, ..on }),
        ("no-concise", "cAd", RewardComponents { concise: false, ..on }),
        ("order", "Acd", on),
        ("order", "dcA", on),
        ("order", "cdA", on),
    ];
    println!(
        "{:<11} {:<5} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>7}",
        "run", "order", "train_c", "train_d", "train_ok", "inf_c", "inf_ok", "brev_c", "curve_ok", "secs"
    );
    for (name, order, comps) in rows {
        let cfg = TrainConfig { steps, seed, order: order.parse().unwrap(), ..TrainConfig::default() };
        let reward = RewardConfig { components: comps, ..RewardConfig::default() };
        let t = Instant::now();
        let r = run_experiment(&cfg, &reward).expect("run");
        let f = &r.final_eval;
        // success averaged over the whole training curve
        let curve = r.steps.iter().map(|s| s.success_rate).sum::<f64>() / r.steps.len().max(1) as f64;
        println!(
            "{:<11} {:<5} {:>8.2} {:>8.2} {:>8.3} {:>8.2} {:>8.3} {:>8.2} {:>8.3} {:>7.1}",
            name,
            order,
            f.training.mean_len_c,
            f.training.mean_len_d,
            f.training.success_rate,
            f.inference.mean_len_c,
            f.inference.success_rate,
            f.inference_brevity.mean_len_c,
            curve,
            t.elapsed().as_secs_f64()
        );
    }
}
