//! Sweeps the number of diffusivity hypotheses per layer.

use glind::data::{generate_shift_benchmark, split_by_domain, Preset, ShiftConfig};
use glind::rng::{self, Purpose};
use glind::train::{sweep, TrainingConfig};

fn main() -> glind::Result<()> {
    let bench = generate_shift_benchmark(&ShiftConfig {
        n: 400,
        ..ShiftConfig::preset(Preset::AngleShift, 0)
    })?;
    let (ds, g) = bench.union()?;
    let base = TrainingConfig {
        epochs: 50,
        ..TrainingConfig::default()
    };
    let split = split_by_domain(
        &ds,
        &bench.config.train_domains,
        base.valid_fraction,
        &bench.config.test_domains,
        rng::stream_seed(base.seed, Purpose::Split, 0, 0),
    )?;
    let values: Vec<String> = (2..=10).map(|k| k.to_string()).collect();
    let jobs = std::thread::available_parallelism().map_or(1, |n| n.get());
    for row in sweep(&ds, &g, &split, &base, "K", &values, jobs)? {
        println!(
            "K = {:<3} valid {:.4}  test {:.4}  best epoch {}",
            row.value, row.valid_metric, row.test_metric, row.best_epoch
        );
    }
    Ok(())
}
