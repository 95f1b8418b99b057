//! Trains every ablated variant with the same seed and compares held-out
//! accuracy with the full model.

use glind::data::{generate_shift_benchmark, split_by_domain, Preset, ShiftConfig};
use glind::rng::{self, Purpose};
use glind::train::{run_ablation, TrainingConfig, Variant};

fn main() -> glind::Result<()> {
    let bench = generate_shift_benchmark(&ShiftConfig {
        n: 600,
        ..ShiftConfig::preset(Preset::KnnShift, 2)
    })?;
    let (ds, g) = bench.union()?;
    let cfg = TrainingConfig {
        epochs: 80,
        seed: 2,
        ..TrainingConfig::default()
    };
    let split = split_by_domain(
        &ds,
        &bench.config.train_domains,
        cfg.valid_fraction,
        &bench.config.test_domains,
        rng::stream_seed(cfg.seed, Purpose::Split, 0, 0),
    )?;
    for v in Variant::ALL {
        let h = run_ablation(&ds, &g, &split, &cfg, v)?.history;
        println!(
            "{:<10} valid {:.4}  test {:.4}  per domain {:.3?}",
            v.name(),
            h.best_valid,
            h.best_test,
            h.best_test_per_domain
        );
    }
    Ok(())
}
