//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use glind::autodiff::{Tape, Var};
use glind::data::{generate_shift_benchmark, split_by_domain, write_benchmark, Preset, ShiftConfig};
use glind::layers::{hypothesis_update, sample_branch, GumbelMode, LayerKind};
use glind::metrics::argmax;
use glind::model::{dropout_mask, Model};
use glind::objective::supervised_loss_var;
use glind::optim::Adam;
use glind::rng::{self, Purpose};
use glind::train::{partition, train, Environment, TrainingConfig, Variant};
use glind::verify::{
    attention_equivalence_suite, conservation_suite, gradcheck_all, theorem1_suite, OracleReport, ATTENTION_TRIALS,
    CONSERVATION_TRIALS, GRADCHECK_INSTANCES_PER_KIND, THEOREM1_TRIALS,
};
use glind::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

const BENCH_SEEDS: u64 = 5;
const BENCH_EPOCHS: usize = 200;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn failures(reports: &[OracleReport]) -> Vec<String> {
    reports
        .iter()
        .filter(|r| !r.passed)
        .map(|r| {
            format!(
                "{} [{}] measured {:e} vs {:e}",
                r.check, r.instance, r.measured, r.tolerance
            )
        })
        .collect()
}

fn worst(reports: &[OracleReport], check: &str) -> f64 {
    reports
        .iter()
        .filter(|r| r.check.starts_with(check))
        .map(|r| r.measured)
        .fold(0.0, f64::max)
}

fn suite_outcome(reports: &[OracleReport], elapsed: Duration, limit: Duration) -> Result<(), String> {
    let bad = failures(reports);
    ensure(
        bad.is_empty(),
        format!("{} failing checks, first: {}", bad.len(), bad.join("; ")),
    )?;
    ensure(elapsed < limit, format!("took {elapsed:.2?}, limit {limit:?}"))
}

fn gradient_fidelity() -> Outcome {
    let t = Instant::now();
    let reports = gradcheck_all(0);
    let elapsed = t.elapsed();
    suite_outcome(&reports, elapsed, Duration::from_secs(60))?;
    let instances = 3 * GRADCHECK_INSTANCES_PER_KIND;
    ensure(instances >= 20, format!("only {instances} instances"))?;
    let kinds = LayerKind::ALL
        .iter()
        .filter(|k| reports.iter().any(|r| r.check.contains(k.name())))
        .count();
    ensure(kinds == 3, "a layer kind is missing from the gradient checks")?;
    ensure(
        reports.iter().any(|r| r.check.contains("objective")),
        "the objective is missing from the gradient checks",
    )?;
    let max = reports.iter().map(|r| r.measured).fold(0.0, f64::max);
    Ok(format!(
        "{} reports over {instances} model instances, max relative error {max:.2e}, {elapsed:.2?}",
        reports.len()
    ))
}

fn bound_holds() -> Outcome {
    let t = Instant::now();
    let reports = theorem1_suite(THEOREM1_TRIALS, 0);
    let elapsed = t.elapsed();
    ensure(THEOREM1_TRIALS == 50, "trial count changed")?;
    suite_outcome(&reports, elapsed, Duration::from_secs(60))?;
    let bounds = reports.iter().filter(|r| r.check.contains("bound")).count();
    let equalities = reports.iter().filter(|r| r.check.contains("equality")).count();
    ensure(
        bounds == 50 && equalities == 50,
        format!("{bounds} bound and {equalities} equality checks"),
    )?;
    Ok(format!(
        "0 violations in {bounds} trials, worst equality gap {:.2e}, {elapsed:.2?}",
        worst(&reports, "theorem1.equality")
    ))
}

fn linear_attention() -> Outcome {
    let reports = attention_equivalence_suite(ATTENTION_TRIALS, 0);
    ensure(ATTENTION_TRIALS == 20, "trial count changed")?;
    suite_outcome(&reports, Duration::ZERO, Duration::from_secs(60))?;
    ensure(
        reports
            .iter()
            .any(|r| r.instance.contains("N=64") && r.instance.contains("d=16")),
        "no N = 64, d = 16 instance",
    )?;
    let linear = reports.iter().filter(|r| r.check.contains("linear")).count();
    ensure(linear == 20, format!("{linear} operation-count checks"))?;
    Ok(format!(
        "20 instances, worst relative error {:.2e}, operation count exactly linear",
        worst(&reports, "attention.equivalence")
    ))
}

fn conservation() -> Outcome {
    let reports = conservation_suite(CONSERVATION_TRIALS, 0);
    ensure(CONSERVATION_TRIALS == 20, "trial count changed")?;
    suite_outcome(&reports, Duration::ZERO, Duration::from_secs(60))?;
    for kind in LayerKind::ALL {
        let n = reports
            .iter()
            .filter(|r| r.check.contains("fixed") && r.check.contains(kind.name()))
            .count();
        ensure(
            n == 20,
            format!("{n} zero-weight fixed-point checks for {}", kind.name()),
        )?;
    }
    Ok(format!(
        "20 graphs, worst symmetric drift {:.2e}, consensus exact for every kind",
        worst(&reports, "conservation.symmetric")
    ))
}

/// A single-hypothesis residual network trained by hand from the layer
/// building blocks; returns the loss of every epoch.
fn plain_residual_losses(
    envs: &[Environment],
    task: glind::data::Task,
    output_dim: usize,
    cfg: &TrainingConfig,
) -> Vec<f64> {
    let init = Model::new(cfg.model_config(envs[0].dataset.feature_dim(), output_dim), cfg.seed).unwrap();
    let model_cfg = init.config.clone();
    let opts = model_cfg.layer_options();
    let names: Vec<String> = init
        .params
        .names()
        .iter()
        .filter(|n| !n.ends_with(".gate"))
        .cloned()
        .collect();
    let mut params: Vec<Tensor> = names.iter().map(|n| init.params.get(n).unwrap().clone()).collect();
    let mut adam = Adam::new(params.iter(), cfg.adam());
    let train_idx: Vec<usize> = (0..envs.len()).filter(|&i| !envs[i].train.is_empty()).collect();
    let mut losses = Vec::new();
    for epoch in 0..cfg.epochs {
        let tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
        let at = |name: &str| names.iter().position(|n| n == name).map(|i| vars[i]);
        let mut total: Option<Var> = None;
        for (slot, &i) in train_idx.iter().enumerate() {
            let env = &envs[i];
            let seed = rng::derive(cfg.seed, slot as u64);
            let n = env.dataset.len();
            let x = tape.constant(env.dataset.features().clone());
            let pre = tape.matmul_nt(x, at("input.weight").unwrap());
            let pre = tape.add(pre, at("input.bias").unwrap());
            let mut z = tape.relu(pre);
            for l in 0..model_cfg.layers {
                let p = format!("layer{l}.branch0");
                let branch = glind::layers::BranchVars {
                    w_s: at(&format!("{p}.w_s")),
                    w_d: at(&format!("{p}.w_d")).unwrap(),
                    w_a: at(&format!("{p}.w_a")),
                    c: at(&format!("{p}.c")),
                    w_k: at(&format!("{p}.w_k")),
                    w_q: at(&format!("{p}.w_q")),
                };
                let update = hypothesis_update(&tape, z, &env.graph, model_cfg.kind, &branch, &opts);
                let step = tape.scale(update, opts.alpha_res);
                z = tape.relu(tape.add(z, step));
                if model_cfg.dropout > 0.0 {
                    let mut r = rng::stream(seed, Purpose::Dropout, epoch as u64, l as u64);
                    let mask = tape.constant(dropout_mask(n, model_cfg.hidden, model_cfg.dropout, &mut r));
                    z = tape.mul(z, mask);
                }
            }
            let logits = tape.matmul_nt(z, at("output.weight").unwrap());
            let logits = tape.add(logits, at("output.bias").unwrap());
            let loss = supervised_loss_var(&tape, logits, env.dataset.labels(), &env.train, task).unwrap();
            total = Some(match total {
                None => loss,
                Some(t) => tape.add(t, loss),
            });
        }
        let total = total.unwrap();
        losses.push(tape.item(total));
        let grads = tape.backward(total).unwrap();
        let grads: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();
        adam.step(params.iter_mut(), &grads).unwrap();
    }
    losses
}

fn erm_reduction() -> Outcome {
    let bench = generate_shift_benchmark(&ShiftConfig {
        n: 160,
        dim: 6,
        ..ShiftConfig::preset(Preset::KnnShift, 8)
    })
    .unwrap();
    let (ds, g) = bench.union().unwrap();
    let mut epochs = 0;
    for kind in LayerKind::ALL {
        let cfg = TrainingConfig {
            kind,
            hypotheses: 1,
            lambda: 0.0,
            hidden: 12,
            dropout: 0.2,
            epochs: 12,
            seed: 21,
            ..TrainingConfig::default()
        };
        let split = split_by_domain(
            &ds,
            &bench.config.train_domains,
            cfg.valid_fraction,
            &bench.config.test_domains,
            rng::stream_seed(cfg.seed, Purpose::Split, 0, 0),
        )
        .unwrap();
        let glind_losses: Vec<f64> = train(&ds, &g, &split, &cfg)
            .map_err(|e| e.to_string())?
            .history
            .epochs
            .iter()
            .map(|e| e.train_loss)
            .collect();
        let envs = partition(&ds, &g, &split).unwrap();
        let plain = plain_residual_losses(&envs, ds.task(), ds.output_dim(), &cfg);
        for (e, (a, b)) in glind_losses.iter().zip(&plain).enumerate() {
            ensure(
                a.to_bits() == b.to_bits(),
                format!("{} epoch {e}: {a:e} vs plain residual {b:e}", kind.name()),
            )?;
        }
        ensure(glind_losses.len() == plain.len(), "history lengths differ")?;
        epochs += plain.len();
    }
    Ok(format!(
        "gcn, gat and trans losses bit-identical to the plain residual network over {epochs} epochs"
    ))
}

struct BenchRun {
    full: f64,
    baseline: f64,
    without_reg: f64,
}

fn benchmark_runs() -> Result<(Vec<BenchRun>, Duration), String> {
    let t = Instant::now();
    let mut runs = Vec::new();
    for seed in 0..BENCH_SEEDS {
        let shift = ShiftConfig::preset(Preset::KnnShift, seed);
        ensure(
            shift.n == 2000 && shift.dim == 16 && shift.classes == 4,
            "benchmark is not N = 2000, D = 16, C = 4",
        )?;
        let ks: Vec<usize> = shift.domains.iter().map(|d| d.k).collect();
        ensure(ks == [2, 3, 4, 8, 9, 10], format!("domains use k = {ks:?}"))?;
        let bench = generate_shift_benchmark(&shift).map_err(|e| e.to_string())?;
        let (ds, g) = bench.union().map_err(|e| e.to_string())?;
        let full = TrainingConfig {
            kind: LayerKind::Gcn,
            hypotheses: 4,
            lambda: 1.0,
            epochs: BENCH_EPOCHS,
            seed,
            ..TrainingConfig::default()
        };
        let baseline = TrainingConfig {
            hypotheses: 1,
            lambda: 0.0,
            ..full.clone()
        };
        let split = split_by_domain(
            &ds,
            &shift.train_domains,
            full.valid_fraction,
            &shift.test_domains,
            rng::stream_seed(seed, Purpose::Split, 0, 0),
        )
        .map_err(|e| e.to_string())?;
        let score = |c: &TrainingConfig| -> Result<f64, String> {
            Ok(train(&ds, &g, &split, c).map_err(|e| e.to_string())?.history.best_test)
        };
        let run = BenchRun {
            full: score(&full)?,
            baseline: score(&baseline)?,
            without_reg: score(&Variant::WoReg.apply(&full))?,
        };
        println!(
            "  seed {seed}: full {:.4}  K=1,λ=0 {:.4}  w/o-Reg {:.4}",
            run.full, run.baseline, run.without_reg
        );
        runs.push(run);
    }
    Ok((runs, t.elapsed()))
}

fn ood_gain(runs: &[BenchRun], elapsed: Duration) -> Outcome {
    let wins = runs.iter().filter(|r| r.full > r.baseline).count();
    let gain = 100.0 * runs.iter().map(|r| r.full - r.baseline).sum::<f64>() / runs.len() as f64;
    let summary = format!("full model wins {wins}/5 seeds, mean gain {gain:+.2} points, {elapsed:.0?} CPU");
    ensure(
        wins >= 4 && gain > 1.0 && elapsed < Duration::from_secs(600),
        summary.clone(),
    )?;
    Ok(summary)
}

fn ablation_direction(runs: &[BenchRun]) -> Outcome {
    let drops = runs.iter().filter(|r| r.without_reg < r.full).count();
    let summary = format!("w/o-Reg below the full model in {drops}/5 seeds");
    ensure(drops >= 3, summary.clone())?;
    Ok(summary)
}

fn gumbel_gate() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst_sum: f64 = 0.0;
    for trial in 0..200u64 {
        let k = 1 + (trial % 7) as usize;
        let logits = Tensor::uniform(25, k, 30.0, &mut rng);
        let pi = glind::autodiff::softmax_rows(&logits);
        for tau in [1e-3, 0.1, 1.0, 10.0, 1e6] {
            for mode in [GumbelMode::PaperLiteral, GumbelMode::LogSpace] {
                let h = sample_branch(&pi, tau, trial, mode).map_err(|e| e.to_string())?;
                for r in 0..h.rows() {
                    worst_sum = worst_sum.max((h.row(r).iter().sum::<f64>() - 1.0).abs());
                }
            }
        }
    }
    ensure(worst_sum <= 1e-9, format!("row sum off by {worst_sum:e}"))?;

    let pi = glind::autodiff::softmax_rows(&Tensor::uniform(50, 5, 5.0, &mut rng));
    let mut worst_uniform: f64 = 0.0;
    for mode in [GumbelMode::PaperLiteral, GumbelMode::LogSpace] {
        let h = sample_branch(&pi, 1e6, 3, mode).map_err(|e| e.to_string())?;
        worst_uniform = worst_uniform.max(h.data().iter().map(|v| (v - 0.2).abs()).fold(0.0, f64::max));
    }
    ensure(
        worst_uniform < 1e-3,
        format!("tau = 1e6 deviates {worst_uniform:e} from uniform"),
    )?;

    let draws = 10_000;
    let uniform = Tensor::filled(draws, 2, 0.5);
    let mut freqs = Vec::new();
    for mode in [GumbelMode::PaperLiteral, GumbelMode::LogSpace] {
        let h = sample_branch(&uniform, 1.0, 2024, mode).map_err(|e| e.to_string())?;
        let first = (0..draws).filter(|&r| argmax(h.row(r)) == 0).count() as f64 / draws as f64;
        ensure((first - 0.5).abs() <= 0.02, format!("argmax frequency {first}"))?;
        freqs.push(first);
    }
    Ok(format!(
        "row sums within {worst_sum:.1e}, tau = 1e6 within {worst_uniform:.1e} of uniform, argmax frequency of branch 0 per mode {freqs:.4?}"
    ))
}

fn read_tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn glind_cli(args: &[&str]) -> i32 {
    glind::cli::run(std::iter::once("glind").chain(args.iter().copied()))
}

fn determinism() -> Outcome {
    let tmp = tempfile::TempDir::new().map_err(|e| e.to_string())?;
    let root = tmp.path();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    for name in ["synth-a", "synth-b"] {
        let out = s(&root.join(name));
        ensure(
            glind_cli(&["synth", "--preset", "angle-shift", "--seed", "6", "--out-dir", &out]) == 0,
            "synth failed",
        )?;
    }
    let synth = read_tree(&root.join("synth-a"));
    ensure(synth == read_tree(&root.join("synth-b")), "synth outputs differ")?;

    let bench = generate_shift_benchmark(&ShiftConfig {
        n: 200,
        dim: 5,
        ..ShiftConfig::preset(Preset::KnnShift, 4)
    })
    .unwrap();
    write_benchmark(&root.join("data"), &bench).map_err(|e| e.to_string())?;
    let cfg = root.join("run.cfg");
    fs::write(
        &cfg,
        "manifest = data/manifest.json\nepochs = 15\nhidden = 10\ndropout = 0.3\n",
    )
    .unwrap();
    let mut runs = Vec::new();
    for name in ["train-a", "train-b"] {
        let out = root.join(name);
        ensure(
            glind_cli(&["train", "--config", &s(&cfg), "--seed", "13", "--out-dir", &s(&out)]) == 0,
            "train failed",
        )?;
        let report: serde_json::Value = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
        runs.push((
            serde_json::to_vec(&report["metrics"]).unwrap(),
            fs::read(out.join("history.jsonl")).unwrap(),
            fs::read(out.join("model.glnd")).unwrap(),
        ));
    }
    ensure(runs[0].0 == runs[1].0, "report metrics differ")?;
    ensure(runs[0].1 == runs[1].1, "history.jsonl differs")?;
    ensure(runs[0].2 == runs[1].2, "model.glnd differs")?;
    Ok(format!(
        "synth reproduced {} files byte for byte; train reproduced report metrics, history and checkpoint",
        synth.len()
    ))
}

fn main() {
    let mut all = true;
    let mut report = |n: usize, name: &str, outcome: Outcome| match &outcome {
        Ok(msg) => println!("PASS criterion {n} ({name}): {msg}"),
        Err(msg) => {
            all = false;
            println!("FAIL criterion {n} ({name}): {msg}");
        }
    };
    report(1, "gradient fidelity", gradient_fidelity());
    report(2, "variational bound", bound_holds());
    report(3, "linear attention", linear_attention());
    report(4, "conservation and fixed points", conservation());
    report(5, "ERM reduction", erm_reduction());
    match benchmark_runs() {
        Ok((runs, elapsed)) => {
            report(6, "directional OOD gain", ood_gain(&runs, elapsed));
            report(7, "ablation direction", ablation_direction(&runs));
        }
        Err(e) => {
            report(6, "directional OOD gain", Err(e.clone()));
            report(7, "ablation direction", Err(e));
        }
    }
    report(8, "Gumbel gate", gumbel_gate());
    report(9, "determinism", determinism());
    if !all {
        std::process::exit(1);
    }
}
