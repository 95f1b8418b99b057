//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::artifacts::{load_checkpoint, save_checkpoint, write_history, Report};
use crate::data::{
    build_knn_graph, generate_shift_benchmark, load_dataset, load_features, load_manifest, split_by_domain,
    write_benchmark, write_edges, Dataset, DatasetPaths, KnnSpec, Metric, Preset, ShiftConfig, Split, Task,
};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::rng::{self, Purpose};
use crate::train::{evaluate_by_domain, run_ablation, sweep, train, TrainOutcome, TrainingConfig, Variant};
use crate::verify::{all_passed, run_suite, write_reports, Suite};

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  a verification check failed, or training diverged
  2  usage error: bad flags, unreadable or malformed input, invalid configuration";

const CONFIG_HELP: &str = "\
Configuration file: one `key = value` per line, `#` starts a comment.
Relative paths resolve against the file's directory. Unknown keys are rejected.

Data (give `manifest`, or `features`, `labels` and `domains`):
  manifest         benchmark manifest written by `synth`          [default: none]
  features         tab-separated features file                    [default: none]
  labels           labels file (class index, real or NA)          [default: none]
  edges            edge list file                                 [default: no edges]
  domains          domain id per instance                         [default: none]
  task             classification | binary | regression           [default: classification]
  train_domains    comma-separated domain ids                     [default: from manifest]
  test_domains     comma-separated domain ids                     [default: from manifest]

Model and training:
  kind             gcn | gat | trans                              [default: gcn]
  layers           diffusion layers L                             [default: 2]
  hidden           hidden width d                                 [default: 32]
  hypotheses (K)   diffusivity hypotheses per layer               [default: 4]
  tau              Gumbel-Softmax temperature                     [default: 1]
  alpha            residual step size                             [default: 0.5]
  lambda           weight of the KL regularizer                   [default: 1]
  lr               Adam learning rate                             [default: 0.01]
  weight_decay     decoupled weight decay                         [default: 0.0005]
  dropout          dropout probability                            [default: 0]
  epochs           training epochs                                [default: 500]
  seed             run seed (initialization, noise, split)        [default: 0]
  prior            mixture | posterior-average                    [default: mixture]
  gumbel           paper-literal | log-space                      [default: paper-literal]
  gumbel_noise     per-node | shared                              [default: per-node]
  attn             literal | softmax (gat edge weights)           [default: literal]
  slope            leaky ReLU slope (gat)                         [default: 0.2]
  pseudo_t         pseudo dataset size, or auto                   [default: auto = 1% of training instances]
  p_edge           pseudo edge probability, or auto               [default: auto = mean training density]
  residual         true | false                                   [default: true]
  self_feature     true | false                                   [default: true]
  stop_prior_grad  true | false                                   [default: false]
  valid_fraction   share of training labels held out              [default: 0.25]";

#[derive(Parser, Debug)]
#[command(name = "glind", version, about = "Geometric diffusion networks under distribution shift", after_help = EXIT_CODES)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum KnnMetric {
    Euclidean,
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitRole {
    Train,
    Valid,
    Test,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build a k-nearest-neighbor graph over a features file.
    #[command(after_help = EXIT_CODES)]
    Knn {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long, value_enum, default_value = "euclidean")]
        metric: KnnMetric,
        /// Angle bias in degrees, in [0, 180); cosine only.
        #[arg(long)]
        theta: Option<f64>,
        /// Edge list to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a six-domain synthetic shift benchmark.
    #[command(after_help = EXIT_CODES)]
    Synth {
        /// knn-shift or angle-shift.
        #[arg(long)]
        preset: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train a model; writes history.jsonl, report.json and model.glnd.
    #[command(after_help = format!("{CONFIG_HELP}\n\n{EXIT_CODES}"))]
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a checkpoint on one split of the configured data; prints JSON.
    #[command(after_help = format!("{CONFIG_HELP}\n\n{EXIT_CODES}"))]
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitRole,
    },
    /// Train an ablated variant; writes history.jsonl, report.json and model.glnd.
    #[command(after_help = format!("{CONFIG_HELP}\n\n{EXIT_CODES}"))]
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// full, w/o-Reg, w/o-Mix, w/o-Multi, w/o-Res or w/o-Feat.
        #[arg(long)]
        variant: String,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train once per value of a configuration key; writes sweep.jsonl.
    #[command(after_help = format!("{CONFIG_HELP}\n\n{EXIT_CODES}"))]
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Configuration key, e.g. K or lambda.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        /// Runs executed at once.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Run verification suites; writes oracle-report.jsonl.
    #[command(after_help = EXIT_CODES)]
    Verify {
        /// gradcheck, theorem1, attention, conservation or all.
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
}

/// Training setup read from a configuration file.
#[derive(Clone, Debug)]
pub struct RunSetup {
    pub training: TrainingConfig,
    pub dataset: Dataset,
    pub graph: Graph,
    pub train_domains: Vec<u32>,
    pub test_domains: Vec<u32>,
    pub split: Split,
}

impl RunSetup {
    /// Replaces the seed and redraws the validation split with it.
    pub fn reseed(&mut self, seed: u64) -> Result<()> {
        self.training.seed = seed;
        self.split = split_for(&self.dataset, &self.train_domains, &self.test_domains, &self.training)?;
        Ok(())
    }
}

fn parse_domains(key: &str, value: &str) -> Result<Vec<u32>> {
    value
        .split(',')
        .map(|t| t.trim())
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse()
                .map_err(|_| Error::config(format!("invalid domain id `{t}` in `{key}`")))
        })
        .collect()
}

/// Reads a configuration file and loads the data it names.
pub fn load_setup(path: &Path) -> Result<RunSetup> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut training = TrainingConfig::default();
    let (mut manifest, mut features, mut labels, mut edges, mut domains) = (None, None, None, None, None);
    let mut task = Task::Classification;
    let (mut train_domains, mut test_domains) = (None, None);
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let load_err = |message: String| Error::Load {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| load_err(format!("expected `key = value`, found `{line}`")))?;
        let (key, value) = (key.trim(), value.trim());
        let file = || Some(base.join(value));
        match key {
            "manifest" => manifest = file(),
            "features" => features = file(),
            "labels" => labels = file(),
            "edges" => edges = file(),
            "domains" => domains = file(),
            "task" => task = value.parse().map_err(|e: Error| load_err(e.to_string()))?,
            "train_domains" => train_domains = Some(parse_domains(key, value).map_err(|e| load_err(e.to_string()))?),
            "test_domains" => test_domains = Some(parse_domains(key, value).map_err(|e| load_err(e.to_string()))?),
            _ => training.set(key, value).map_err(|e| load_err(e.to_string()))?,
        }
    }
    let (dataset, graph, default_train, default_test) = match (manifest, features) {
        (Some(m), None) => {
            let (man, ds, g) = load_manifest(&m)?;
            (ds, g, Some(man.train_domains), Some(man.test_domains))
        }
        (None, Some(f)) => {
            let need = |p: Option<PathBuf>, key: &str| {
                p.ok_or_else(|| Error::config(format!("`features` given without `{key}`")))
            };
            let paths = DatasetPaths {
                features: f,
                labels: need(labels, "labels")?,
                edges,
                domains: need(domains, "domains")?,
            };
            let (ds, g) = load_dataset(&paths, task)?;
            (ds, g, None, None)
        }
        (Some(_), Some(_)) => return Err(Error::config("give either `manifest` or `features`, not both")),
        (None, None) => return Err(Error::config("no data: set `manifest` or `features`")),
    };
    let train_domains = train_domains
        .or(default_train)
        .ok_or_else(|| Error::config("`train_domains` is required without a manifest"))?;
    let test_domains = test_domains
        .or(default_test)
        .ok_or_else(|| Error::config("`test_domains` is required without a manifest"))?;
    training.validate()?;
    let split = split_for(&dataset, &train_domains, &test_domains, &training)?;
    Ok(RunSetup {
        training,
        dataset,
        graph,
        train_domains,
        test_domains,
        split,
    })
}

fn split_for(ds: &Dataset, train: &[u32], test: &[u32], cfg: &TrainingConfig) -> Result<Split> {
    let seed = rng::stream_seed(cfg.seed, Purpose::Split, 0, 0);
    split_by_domain(ds, train, cfg.valid_fraction, test, seed)
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Divergence { .. } | Error::NonFinite(_) | Error::EnumerationTooLarge { .. } => 1,
        _ => 2,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_run(out_dir: &Path, outcome: &TrainOutcome, config: &TrainingConfig, variant: &str) -> Result<Report> {
    create_dir(out_dir)?;
    write_history(&out_dir.join("history.jsonl"), &outcome.history)?;
    save_checkpoint(&out_dir.join("model.glnd"), &outcome.model)?;
    let report = Report::new(&outcome.history, config, variant);
    report.write(&out_dir.join("report.json"))?;
    Ok(report)
}

fn print_report(r: &Report) {
    println!(
        "best epoch {} of {}: valid {} {:.4}, test {:.4}",
        r.best_epoch, r.metrics.epochs_run, r.metrics.metric, r.metrics.valid, r.metrics.test
    );
    for (d, v) in &r.metrics.test_per_domain {
        println!("  domain {d}: {v:.4}");
    }
}

#[derive(Serialize)]
struct EvalOutput {
    split: &'static str,
    metric: &'static str,
    value: f64,
    per_domain: std::collections::BTreeMap<u32, f64>,
}

fn run_command(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Knn {
            features,
            k,
            metric,
            theta,
            out,
        } => {
            let metric = match (metric, theta) {
                (KnnMetric::Euclidean, None) => Metric::Euclidean,
                (KnnMetric::Euclidean, Some(_)) => {
                    return Err(Error::Usage("--theta applies only to --metric cosine".into()))
                }
                (KnnMetric::Cosine, None) => Metric::Cosine,
                (KnnMetric::Cosine, Some(t)) => Metric::AngleBiasedCosine { theta_degrees: t },
            };
            let spec = KnnSpec::new(k, metric).map_err(|e| Error::Usage(e.to_string()))?;
            let x = load_features(&features)?;
            let g = build_knn_graph(&x, &spec)?;
            write_edges(&out, &g)?;
            println!(
                "{} edges over {} instances written to {}",
                g.num_edges(),
                g.num_nodes(),
                out.display()
            );
        }
        Command::Synth { preset, seed, out_dir } => {
            let preset: Preset = preset.parse()?;
            let bench = generate_shift_benchmark(&ShiftConfig::preset(preset, seed))?;
            create_dir(&out_dir)?;
            let manifest = write_benchmark(&out_dir, &bench)?;
            println!(
                "{} domains written to {} (train {:?}, test {:?})",
                manifest.domains.len(),
                out_dir.display(),
                manifest.train_domains,
                manifest.test_domains
            );
        }
        Command::Train { config, out_dir, seed } => {
            let mut setup = load_setup(&config)?;
            if let Some(s) = seed {
                setup.reseed(s)?;
            }
            let outcome = train(&setup.dataset, &setup.graph, &setup.split, &setup.training)?;
            print_report(&write_run(&out_dir, &outcome, &setup.training, Variant::Full.name())?);
        }
        Command::Eval {
            checkpoint,
            config,
            split,
        } => {
            let setup = load_setup(&config)?;
            let model = load_checkpoint(&checkpoint)?;
            let (name, rows) = match split {
                SplitRole::Train => ("train", &setup.split.train),
                SplitRole::Valid => ("valid", &setup.split.valid),
                SplitRole::Test => ("test", &setup.split.test),
            };
            let (value, per_domain) = evaluate_by_domain(&model, &setup.dataset, &setup.graph, rows)?;
            let out = EvalOutput {
                split: name,
                metric: crate::metrics::EvalMetric::for_task(setup.dataset.task()).name(),
                value,
                per_domain,
            };
            println!("{}", serde_json::to_string(&out).expect("output serializes"));
        }
        Command::Ablate {
            config,
            variant,
            out_dir,
            seed,
        } => {
            let variant: Variant = variant.parse()?;
            let mut setup = load_setup(&config)?;
            if let Some(s) = seed {
                setup.reseed(s)?;
            }
            let outcome = run_ablation(&setup.dataset, &setup.graph, &setup.split, &setup.training, variant)?;
            let applied = variant.apply(&setup.training);
            print_report(&write_run(&out_dir, &outcome, &applied, variant.name())?);
        }
        Command::Sweep {
            config,
            param,
            values,
            jobs,
            out_dir,
        } => {
            let setup = load_setup(&config)?;
            let rows = sweep(
                &setup.dataset,
                &setup.graph,
                &setup.split,
                &setup.training,
                &param,
                &values,
                jobs,
            )?;
            create_dir(&out_dir)?;
            let mut text = String::new();
            for r in &rows {
                text.push_str(&serde_json::to_string(r).expect("row serializes"));
                text.push('\n');
                println!(
                    "{} = {:<8} valid {:.4} test {:.4} (best epoch {}, seed {})",
                    r.param, r.value, r.valid_metric, r.test_metric, r.best_epoch, r.seed
                );
            }
            let path = out_dir.join("sweep.jsonl");
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Command::Verify { suite, seed, out_dir } => {
            let suite: Suite = suite.parse()?;
            let reports = run_suite(suite, seed);
            create_dir(&out_dir)?;
            write_reports(&out_dir.join("oracle-report.jsonl"), &reports)?;
            let failed: Vec<_> = reports.iter().filter(|r| !r.passed).collect();
            for r in &failed {
                println!(
                    "FAIL {} [{}]: measured {:e}, tolerance {:e}",
                    r.check, r.instance, r.measured, r.tolerance
                );
            }
            println!("{} of {} checks passed", reports.len() - failed.len(), reports.len());
            if !all_passed(&reports) {
                return Ok(1);
            }
        }
    }
    Ok(0)
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match run_command(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
