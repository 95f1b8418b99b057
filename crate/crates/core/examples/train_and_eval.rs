//! Trains a diffusion model on a reduced shift benchmark, scores each held-out
//! domain and round-trips the checkpoint.

use glind::artifacts::{decode_checkpoint, encode_checkpoint};
use glind::data::{generate_shift_benchmark, split_by_domain, Preset, ShiftConfig};
use glind::layers::LayerKind;
use glind::rng::{self, Purpose};
use glind::train::{evaluate_by_domain, train, TrainingConfig};

fn main() -> glind::Result<()> {
    let bench = generate_shift_benchmark(&ShiftConfig {
        n: 400,
        ..ShiftConfig::preset(Preset::KnnShift, 1)
    })?;
    let (ds, g) = bench.union()?;
    for kind in LayerKind::ALL {
        let cfg = TrainingConfig {
            kind,
            epochs: 60,
            seed: 1,
            ..TrainingConfig::default()
        };
        let split = split_by_domain(
            &ds,
            &bench.config.train_domains,
            cfg.valid_fraction,
            &bench.config.test_domains,
            rng::stream_seed(cfg.seed, Purpose::Split, 0, 0),
        )?;
        let out = train(&ds, &g, &split, &cfg)?;
        let h = &out.history;
        let first = &h.epochs[0];
        let last = h.epochs.last().expect("epochs ran");
        println!(
            "{}: loss {:.3} -> {:.3}, best epoch {}, valid {:.3}, test {:.3} in {:.1}s",
            kind.name(),
            first.train_loss,
            last.train_loss,
            h.best_epoch,
            h.best_valid,
            h.best_test,
            h.wall_clock_seconds
        );
        let restored = decode_checkpoint(&encode_checkpoint(&out.model)?)?;
        let (mean, per) = evaluate_by_domain(&restored, &ds, &g, &split.test)?;
        println!("  restored checkpoint: test {mean:.3}, per domain {per:.3?}");
    }
    Ok(())
}
