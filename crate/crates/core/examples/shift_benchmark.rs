//! Compares the full model with the single-branch unregularized baseline and
//! the unregularized variant on the synthetic k-NN shift benchmark.

use clap::Parser;
use glind::data::{generate_shift_benchmark, split_by_domain, Preset, ShiftConfig};
use glind::rng::{self, Purpose};
use glind::train::{train, TrainingConfig, Variant};

#[derive(Parser)]
struct Args {
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value = "knn-shift")]
    preset: String,
    #[arg(long)]
    separation: Option<f64>,
    #[arg(long)]
    spread: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    influenced: Option<f64>,
    #[arg(long)]
    marker: Option<f64>,
    /// Extra `key=value` training settings.
    #[arg(long = "set")]
    set: Vec<String>,
}

fn main() -> glind::Result<()> {
    let args = Args::parse();
    let preset: Preset = args.preset.parse()?;
    let mut base = TrainingConfig {
        epochs: args.epochs,
        ..TrainingConfig::default()
    };
    for kv in &args.set {
        let (k, v) = kv.split_once('=').expect("key=value");
        base.set(k, v)?;
    }
    let (mut wins, mut reg_wins, mut gain) = (0, 0, 0.0);
    for seed in 0..args.seeds {
        let mut cfg = ShiftConfig::preset(preset, seed);
        cfg.separation = args.separation.unwrap_or(cfg.separation);
        cfg.spread = args.spread.unwrap_or(cfg.spread);
        cfg.gamma = args.gamma.unwrap_or(cfg.gamma);
        cfg.influenced = args.influenced.unwrap_or(cfg.influenced);
        cfg.marker = args.marker.unwrap_or(cfg.marker);
        let bench = generate_shift_benchmark(&cfg)?;
        let (ds, g) = bench.union()?;
        let run = |c: &TrainingConfig| -> glind::Result<f64> {
            let split = split_by_domain(
                &ds,
                &cfg.train_domains,
                c.valid_fraction,
                &cfg.test_domains,
                rng::stream_seed(c.seed, Purpose::Split, 0, 0),
            )?;
            Ok(train(&ds, &g, &split, c)?.history.best_test)
        };
        let full = TrainingConfig { seed, ..base.clone() };
        let erm = TrainingConfig {
            hypotheses: 1,
            lambda: 0.0,
            ..full.clone()
        };
        let (a, b, c) = (run(&full)?, run(&erm)?, run(&Variant::WoReg.apply(&full))?);
        println!("seed {seed}: full {a:.4}  baseline {b:.4}  w/o-Reg {c:.4}");
        wins += (a > b) as usize;
        reg_wins += (a > c) as usize;
        gain += a - b;
    }
    println!(
        "full beats baseline in {wins}/{} seeds (mean gain {:.2} points); beats w/o-Reg in {reg_wins}/{}",
        args.seeds,
        100.0 * gain / args.seeds as f64,
        args.seeds
    );
    Ok(())
}
