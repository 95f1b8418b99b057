//! Full-batch training over one or more domain graphs, model selection on
//! validation data, ablations and sweeps.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{SegmentNorm, Tape, Var};
use crate::data::{make_pseudo_dataset, Dataset, Label, PseudoConfig, PseudoDataset, Split, Task};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::layers::{GumbelMode, GumbelNoise, LayerKind};
use crate::metrics::EvalMetric;
use crate::model::{ForwardOptions, Model, ModelConfig};
use crate::objective::{mean_gate_var, objective_var};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;

/// Source of the prior the gates are regularized toward.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorMode {
    /// Mean gate probabilities over a random pseudo dataset.
    Mixture,
    /// Mean gate probabilities over the real instances of each domain.
    PosteriorAverage,
}

impl std::str::FromStr for PriorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mixture" => Ok(PriorMode::Mixture),
            "posterior-average" => Ok(PriorMode::PosteriorAverage),
            other => Err(Error::config(format!("unknown prior mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub kind: LayerKind,
    pub layers: usize,
    pub hidden: usize,
    pub hypotheses: usize,
    pub tau: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub epochs: usize,
    pub seed: u64,
    pub prior: PriorMode,
    pub gumbel: GumbelMode,
    pub gumbel_noise: GumbelNoise,
    pub attn: SegmentNorm,
    pub slope: f64,
    pub pseudo_t: Option<usize>,
    pub p_edge: Option<f64>,
    pub residual: bool,
    pub self_feature: bool,
    pub stop_prior_grad: bool,
    pub valid_fraction: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            kind: LayerKind::Gcn,
            layers: 2,
            hidden: 32,
            hypotheses: 4,
            tau: 1.0,
            alpha: 0.5,
            lambda: 1.0,
            lr: 0.01,
            weight_decay: 5e-4,
            dropout: 0.0,
            epochs: 500,
            seed: 0,
            prior: PriorMode::Mixture,
            gumbel: GumbelMode::PaperLiteral,
            gumbel_noise: GumbelNoise::PerNode,
            attn: SegmentNorm::Literal,
            slope: 0.2,
            pseudo_t: None,
            p_edge: None,
            residual: true,
            self_feature: true,
            stop_prior_grad: false,
            valid_fraction: 0.25,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_opt<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    match value.trim() {
        "auto" | "" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

impl TrainingConfig {
    /// Names accepted by [`TrainingConfig::set`].
    pub const KEYS: [&'static str; 23] = [
        "kind",
        "layers",
        "hidden",
        "hypotheses",
        "tau",
        "alpha",
        "lambda",
        "lr",
        "weight_decay",
        "dropout",
        "epochs",
        "seed",
        "prior",
        "gumbel",
        "gumbel_noise",
        "attn",
        "slope",
        "pseudo_t",
        "p_edge",
        "residual",
        "self_feature",
        "stop_prior_grad",
        "valid_fraction",
    ];

    /// Sets one field from its textual form. `K` is accepted for `hypotheses`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "kind" => self.kind = parse(key, value)?,
            "layers" | "L" => self.layers = parse(key, value)?,
            "hidden" | "d" => self.hidden = parse(key, value)?,
            "hypotheses" | "K" => self.hypotheses = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "prior" => self.prior = value.trim().parse()?,
            "gumbel" => self.gumbel = value.trim().parse()?,
            "gumbel_noise" => self.gumbel_noise = value.trim().parse()?,
            "attn" => {
                self.attn = match value.trim() {
                    "literal" => SegmentNorm::Literal,
                    "softmax" => SegmentNorm::Softmax,
                    other => return Err(Error::config(format!("unknown attention mode `{other}`"))),
                }
            }
            "slope" => self.slope = parse(key, value)?,
            "pseudo_t" => self.pseudo_t = parse_opt(key, value)?,
            "p_edge" => self.p_edge = parse_opt(key, value)?,
            "residual" => self.residual = parse(key, value)?,
            "self_feature" => self.self_feature = parse(key, value)?,
            "stop_prior_grad" => self.stop_prior_grad = parse(key, value)?,
            "valid_fraction" => self.valid_fraction = parse(key, value)?,
            other => return Err(Error::config(format!("unknown configuration key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("need at least one epoch"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("learning rate and weight decay must be nonnegative"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!("KL weight {} must be nonnegative", self.lambda)));
        }
        self.model_config(1, 1).validate()
    }

    pub fn model_config(&self, input_dim: usize, output_dim: usize) -> ModelConfig {
        ModelConfig {
            kind: self.kind,
            input_dim,
            hidden: self.hidden,
            output_dim,
            layers: self.layers,
            hypotheses: self.hypotheses,
            tau: self.tau,
            alpha_res: self.alpha,
            residual: self.residual,
            self_feature: self.self_feature,
            dropout: self.dropout,
            gumbel: self.gumbel,
            gumbel_noise: self.gumbel_noise,
            attn: self.attn,
            slope: self.slope,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// One domain's instances, graph and local split indices.
#[derive(Clone, Debug)]
pub struct Environment {
    pub domain: u32,
    /// Positions of this domain's instances in the full dataset.
    pub nodes: Vec<usize>,
    pub dataset: Dataset,
    pub graph: Graph,
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Splits the data into per-domain environments over induced subgraphs,
/// keeping only domains that hold split instances.
pub fn partition(dataset: &Dataset, graph: &Graph, split: &Split) -> Result<Vec<Environment>> {
    if graph.num_nodes() != dataset.len() {
        return Err(Error::dim(format!(
            "graph of {} nodes for {} instances",
            graph.num_nodes(),
            dataset.len()
        )));
    }
    let mut by_domain: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (u, &d) in dataset.domains().iter().enumerate() {
        by_domain.entry(d).or_default().push(u);
    }
    let mut envs = Vec::new();
    for (domain, nodes) in by_domain {
        let mut local = BTreeMap::new();
        for (i, &u) in nodes.iter().enumerate() {
            local.insert(u, i);
        }
        let pick = |set: &[usize]| -> Vec<usize> { set.iter().filter_map(|u| local.get(u).copied()).collect() };
        let (train, valid, test) = (pick(&split.train), pick(&split.valid), pick(&split.test));
        if train.is_empty() && valid.is_empty() && test.is_empty() {
            continue;
        }
        envs.push(Environment {
            domain,
            dataset: dataset.subset(&nodes),
            graph: graph.induced(&nodes),
            nodes,
            train,
            valid,
            test,
        });
    }
    Ok(envs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub supervised: f64,
    pub kl_per_layer: Vec<f64>,
    pub valid_metric: f64,
    pub test_metric: f64,
    pub test_per_domain: BTreeMap<u32, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub metric: EvalMetric,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_valid: f64,
    pub best_test: f64,
    pub best_test_per_domain: BTreeMap<u32, f64>,
    pub wall_clock_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters at the best-validation epoch.
    pub model: Model,
    pub history: RunHistory,
}

fn stack_outputs(parts: &[(Tensor, Vec<Label>, Vec<usize>)]) -> Result<(Tensor, Vec<Label>, Vec<usize>)> {
    let cols = parts.first().map_or(1, |p| p.0.cols());
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (out, lab, rows) in parts {
        for &r in rows {
            data.extend_from_slice(out.row(r));
            labels.push(lab[r]);
        }
    }
    let n = labels.len();
    Ok((Tensor::new(n, cols, data)?, labels, (0..n).collect()))
}

/// Pooled validation metric and per-domain test metrics.
fn score(model: &Model, envs: &[Environment], metric: EvalMetric) -> Result<(f64, BTreeMap<u32, f64>)> {
    let mut valid_parts = Vec::new();
    let mut tests = BTreeMap::new();
    for env in envs {
        if env.valid.is_empty() && env.test.is_empty() {
            continue;
        }
        let out = model.predict(env.dataset.features(), &env.graph)?;
        if !env.test.is_empty() {
            tests.insert(env.domain, metric.compute(&out, env.dataset.labels(), &env.test)?);
        }
        if !env.valid.is_empty() {
            valid_parts.push((out, env.dataset.labels().to_vec(), env.valid.clone()));
        }
    }
    let (out, labels, rows) = stack_outputs(&valid_parts)?;
    Ok((metric.compute(&out, &labels, &rows)?, tests))
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Pseudo dataset drawn from the training domains' instances.
pub fn pseudo_for(envs: &[Environment], config: &TrainingConfig) -> Result<PseudoDataset> {
    let train_envs: Vec<&Environment> = envs.iter().filter(|e| !e.train.is_empty()).collect();
    let first = train_envs
        .first()
        .ok_or_else(|| Error::config("no domain holds training instances"))?;
    let mut pool = first.dataset.clone();
    for e in &train_envs[1..] {
        pool = pool.concat(&e.dataset)?;
    }
    let density = mean(train_envs.iter().map(|e| e.graph.density()));
    let p_edge = config.p_edge.unwrap_or_else(|| density.max(crate::data::P_EDGE_FLOOR));
    let cfg = PseudoConfig {
        t: config.pseudo_t,
        p_edge: Some(p_edge),
    };
    make_pseudo_dataset(
        &pool,
        &Graph::empty(pool.len()),
        &cfg,
        rng::stream_seed(config.seed, Purpose::Pseudo, 0, 0),
    )
}

pub fn train(dataset: &Dataset, graph: &Graph, split: &Split, config: &TrainingConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let envs = partition(dataset, graph, split)?;
    train_environments(&envs, dataset.task(), dataset.output_dim(), config)
}

/// Training over prepared environments.
pub fn train_environments(
    envs: &[Environment],
    task: Task,
    output_dim: usize,
    config: &TrainingConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let start = Instant::now();
    let train_idx: Vec<usize> = (0..envs.len()).filter(|&i| !envs[i].train.is_empty()).collect();
    if train_idx.is_empty() || envs.iter().all(|e| e.valid.is_empty()) {
        return Err(Error::config("training needs nonempty train and validation splits"));
    }
    let input_dim = envs[0].dataset.feature_dim();
    let metric = EvalMetric::for_task(task);
    let mut model = Model::new(config.model_config(input_dim, output_dim), config.seed)?;
    let pseudo = match config.prior {
        PriorMode::Mixture if config.layers > 0 => Some(pseudo_for(envs, config)?),
        _ => None,
    };
    let mut adam = Adam::new(model.params.tensors(), config.adam());
    let mut records = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, BTreeMap<u32, f64>, Model)> = None;
    for epoch in 0..config.epochs {
        let tape = Tape::new();
        let bound = model.bind(&tape, true);
        let shared_prior = match &pseudo {
            Some(p) => Some(prior_from_pseudo(&tape, &model, &bound, p, config)?),
            None => None,
        };
        let mut total: Option<Var> = None;
        let mut supervised = 0.0;
        let mut kl_sum = vec![0.0; config.layers];
        for (slot, &i) in train_idx.iter().enumerate() {
            let env = &envs[i];
            let x = tape.constant(env.dataset.features().clone());
            let opts = ForwardOptions::train(rng::derive(config.seed, slot as u64), epoch as u64);
            let out = model.forward(&tape, &bound, x, &env.graph, &opts)?;
            let prior = match &shared_prior {
                Some(p) => p.clone(),
                None => {
                    let p = mean_gate_var(&tape, &out.gates);
                    if config.stop_prior_grad {
                        p.into_iter().map(|v| tape.detach(v)).collect()
                    } else {
                        p
                    }
                }
            };
            let obj = objective_var(
                &tape,
                out.logits,
                &out.gates,
                &prior,
                env.dataset.labels(),
                &env.train,
                task,
                config.lambda,
            )?;
            supervised += tape.item(obj.supervised);
            for (acc, &k) in kl_sum.iter_mut().zip(&obj.kl) {
                *acc += tape.item(k);
            }
            total = Some(match total {
                None => obj.total,
                Some(t) => tape.add(t, obj.total),
            });
        }
        let total = total.expect("at least one training environment");
        let loss = tape.item(total);
        if !loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                message: format!("training loss became {loss}"),
            });
        }
        let grads = tape.backward(total)?;
        let grads: Vec<Tensor> = bound.vars.iter().map(|&v| grads.wrt(v)).collect();
        adam.step(model.params.tensors_mut(), &grads)?;
        if model.params.tensors().iter().any(|t| !t.all_finite()) {
            return Err(Error::Divergence {
                epoch,
                message: "parameters became non-finite".into(),
            });
        }
        let (valid, tests) = score(&model, envs, metric)?;
        let test = mean(tests.values().copied());
        let n_train = train_idx.len() as f64;
        records.push(EpochRecord {
            epoch,
            train_loss: loss,
            supervised,
            kl_per_layer: kl_sum.iter().map(|k| k / n_train).collect(),
            valid_metric: valid,
            test_metric: test,
            test_per_domain: tests.clone(),
        });
        let improved = match &best {
            None => true,
            Some((_, b, _, _)) => metric.better(valid, *b),
        };
        if improved {
            best = Some((epoch, valid, tests, model.clone()));
        }
    }
    let (best_epoch, best_valid, best_tests, best_model) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        model: best_model,
        history: RunHistory {
            metric,
            best_test: mean(best_tests.values().copied()),
            best_test_per_domain: best_tests,
            epochs: records,
            best_epoch,
            best_valid,
            wall_clock_seconds: start.elapsed().as_secs_f64(),
        },
    })
}

/// Per-layer prior from a deterministic pass over the pseudo dataset.
fn prior_from_pseudo(
    tape: &Tape,
    model: &Model,
    bound: &crate::model::Bound,
    pseudo: &PseudoDataset,
    config: &TrainingConfig,
) -> Result<Vec<Var>> {
    let x = tape.constant(pseudo.features.clone());
    let out = model.forward(tape, bound, x, &pseudo.graph, &ForwardOptions::eval())?;
    let prior = mean_gate_var(tape, &out.gates);
    Ok(if config.stop_prior_grad {
        prior.into_iter().map(|v| tape.detach(v)).collect()
    } else {
        prior
    })
}

/// Metric of the model's deterministic outputs on labeled `indices`.
pub fn evaluate(model: &Model, dataset: &Dataset, graph: &Graph, indices: &[usize], metric: EvalMetric) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::Usage("evaluation over an empty index set".into()));
    }
    let out = model.predict(dataset.features(), graph)?;
    metric.compute(&out, dataset.labels(), indices)
}

/// Deterministic metric per domain over the split's `role` indices, and
/// their mean.
pub fn evaluate_by_domain(
    model: &Model,
    dataset: &Dataset,
    graph: &Graph,
    indices: &[usize],
) -> Result<(f64, BTreeMap<u32, f64>)> {
    let metric = EvalMetric::for_task(dataset.task());
    let split = Split {
        train: vec![],
        valid: vec![],
        test: indices.to_vec(),
    };
    let mut per = BTreeMap::new();
    for env in partition(dataset, graph, &split)? {
        let out = model.predict(env.dataset.features(), &env.graph)?;
        per.insert(env.domain, metric.compute(&out, env.dataset.labels(), &env.test)?);
    }
    if per.is_empty() {
        return Err(Error::Usage("evaluation over an empty index set".into()));
    }
    Ok((mean(per.values().copied()), per))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "w/o-Reg")]
    WoReg,
    #[serde(rename = "w/o-Mix")]
    WoMix,
    #[serde(rename = "w/o-Multi")]
    WoMulti,
    #[serde(rename = "w/o-Res")]
    WoRes,
    #[serde(rename = "w/o-Feat")]
    WoFeat,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "w/o-Reg" => Ok(Variant::WoReg),
            "w/o-Mix" => Ok(Variant::WoMix),
            "w/o-Multi" => Ok(Variant::WoMulti),
            "w/o-Res" => Ok(Variant::WoRes),
            "w/o-Feat" => Ok(Variant::WoFeat),
            other => Err(Error::Usage(format!(
                "unknown variant `{other}` (expected full, w/o-Reg, w/o-Mix, w/o-Multi, w/o-Res or w/o-Feat)"
            ))),
        }
    }
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::WoReg,
        Variant::WoMix,
        Variant::WoMulti,
        Variant::WoRes,
        Variant::WoFeat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WoReg => "w/o-Reg",
            Variant::WoMix => "w/o-Mix",
            Variant::WoMulti => "w/o-Multi",
            Variant::WoRes => "w/o-Res",
            Variant::WoFeat => "w/o-Feat",
        }
    }

    pub fn apply(self, config: &TrainingConfig) -> TrainingConfig {
        let mut c = config.clone();
        match self {
            Variant::Full => {}
            Variant::WoReg => c.lambda = 0.0,
            Variant::WoMix => c.prior = PriorMode::PosteriorAverage,
            Variant::WoMulti => c.hypotheses = 1,
            Variant::WoRes => c.residual = false,
            Variant::WoFeat => c.self_feature = false,
        }
        c
    }
}

pub fn run_ablation(
    dataset: &Dataset,
    graph: &Graph,
    split: &Split,
    config: &TrainingConfig,
    variant: Variant,
) -> Result<TrainOutcome> {
    train(dataset, graph, split, &variant.apply(config))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: String,
    pub value: String,
    pub valid_metric: f64,
    pub test_metric: f64,
    pub best_epoch: usize,
    pub seed: u64,
}

/// One training run per value of `param`, all with the base seed. Up to
/// `jobs` runs execute at once; rows keep the order of `values`.
pub fn sweep(
    dataset: &Dataset,
    graph: &Graph,
    split: &Split,
    base: &TrainingConfig,
    param: &str,
    values: &[String],
    jobs: usize,
) -> Result<Vec<SweepRow>> {
    let configs = values
        .iter()
        .map(|v| {
            let mut c = base.clone();
            c.set(param, v)?;
            c.validate()?;
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    let run = |(value, c): (&String, &TrainingConfig)| -> Result<SweepRow> {
        let out = train(dataset, graph, split, c)?;
        Ok(SweepRow {
            param: param.to_string(),
            value: value.clone(),
            valid_metric: out.history.best_valid,
            test_metric: out.history.best_test,
            best_epoch: out.history.best_epoch,
            seed: c.seed,
        })
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    pool.install(|| values.par_iter().zip(configs.par_iter()).map(run).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::split_by_domain;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Two well-separated blobs in two domains, 40 labeled instances each.
    fn toy() -> (Dataset, Graph, Split) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 80;
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for u in 0..n {
            let c = u % 2;
            let centre = if c == 0 { -1.5 } else { 1.5 };
            rows.push(vec![centre + rng.gen_range(-0.5..0.5), rng.gen_range(-1.0..1.0)]);
            labels.push(Label::Class(c));
        }
        let domains = (0..n).map(|u| (u / 40) as u32).collect();
        let ds = Dataset::new(
            Tensor::from_rows(&rows).unwrap(),
            labels,
            domains,
            Task::Classification,
            2,
        )
        .unwrap();
        let g = Graph::from_edges(n, (0..n - 2).filter(|u| u % 40 < 38).map(|u| (u, u + 2))).unwrap();
        let split = split_by_domain(&ds, &[0], 0.25, &[1], 1).unwrap();
        (ds, g, split)
    }

    fn quick(epochs: usize) -> TrainingConfig {
        TrainingConfig {
            hidden: 8,
            hypotheses: 2,
            epochs,
            ..TrainingConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let (ds, g, split) = toy();
        let cfg = TrainingConfig { lr: 0.0, ..quick(2) };
        let out = train(&ds, &g, &split, &cfg).unwrap();
        assert_eq!(out.history.epochs.len(), 2);
        let init = Model::new(cfg.model_config(2, 2), cfg.seed).unwrap();
        assert_eq!(out.model.params, init.params);
    }

    #[test]
    fn loss_decreases_on_separable_toy() {
        let (ds, g, split) = toy();
        let out = train(&ds, &g, &split, &quick(150)).unwrap();
        let h = &out.history;
        assert!(h.epochs.last().unwrap().supervised < h.epochs[0].supervised);
        let last = h.epochs.last().unwrap();
        assert!(last.test_metric > 0.9, "{}", last.test_metric);
    }

    #[test]
    fn reported_test_is_from_best_validation_epoch() {
        let (ds, g, split) = toy();
        let out = train(&ds, &g, &split, &quick(15)).unwrap();
        let h = &out.history;
        let best = &h.epochs[h.best_epoch];
        assert_eq!(best.test_metric, h.best_test);
        assert!(h.epochs.iter().all(|e| e.valid_metric <= h.best_valid));
        assert!(h.epochs[..h.best_epoch].iter().all(|e| e.valid_metric < h.best_valid));
    }

    #[test]
    fn runs_are_reproducible() {
        let (ds, g, split) = toy();
        let cfg = TrainingConfig {
            dropout: 0.2,
            ..quick(5)
        };
        let a = train(&ds, &g, &split, &cfg).unwrap();
        let b = train(&ds, &g, &split, &cfg).unwrap();
        assert_eq!(a.history.epochs, b.history.epochs);
    }

    #[test]
    fn ablations_adjust_config() {
        let base = TrainingConfig::default();
        assert_eq!(Variant::WoReg.apply(&base).lambda, 0.0);
        assert_eq!(Variant::WoMulti.apply(&base).hypotheses, 1);
        assert_eq!(Variant::WoMix.apply(&base).prior, PriorMode::PosteriorAverage);
        assert!(!Variant::WoRes.apply(&base).residual);
        assert!(!Variant::WoFeat.apply(&base).self_feature);
        let (ds, g, split) = toy();
        let out = run_ablation(&ds, &g, &split, &quick(3), Variant::WoReg).unwrap();
        assert!(out
            .history
            .epochs
            .iter()
            .all(|e| e.kl_per_layer.len() == 2 && e.train_loss == e.supervised));
        let multi = run_ablation(&ds, &g, &split, &quick(1), Variant::WoMulti).unwrap();
        assert!(multi.model.params.get("layer0.branch1.w_d").is_none());
        for v in [Variant::WoMix, Variant::WoRes, Variant::WoFeat] {
            run_ablation(&ds, &g, &split, &quick(2), v).unwrap();
        }
    }

    #[test]
    fn sweep_rows_follow_values() {
        let (ds, g, split) = toy();
        let values: Vec<String> = ["1", "2", "3"].map(String::from).to_vec();
        let rows = sweep(&ds, &g, &split, &quick(2), "K", &values, 2).unwrap();
        assert_eq!(
            rows.iter().map(|r| r.value.as_str()).collect::<Vec<_>>(),
            ["1", "2", "3"]
        );
        let single = sweep(&ds, &g, &split, &quick(2), "K", &values[1..2], 1).unwrap();
        let plain = train(&ds, &g, &split, &quick(2)).unwrap();
        assert_eq!(single[0].test_metric, plain.history.best_test);
        assert!(sweep(&ds, &g, &split, &quick(2), "nope", &values, 1).is_err());
    }

    #[test]
    fn config_keys_round_trip() {
        let mut c = TrainingConfig::default();
        for key in TrainingConfig::KEYS {
            let value = match key {
                "kind" => "gat",
                "prior" => "posterior-average",
                "gumbel" => "log-space",
                "gumbel_noise" => "shared",
                "attn" => "softmax",
                "residual" | "self_feature" | "stop_prior_grad" => "true",
                "pseudo_t" | "p_edge" => "auto",
                "tau" | "alpha" | "lambda" | "lr" | "weight_decay" | "dropout" | "slope" | "valid_fraction" => "0.1",
                _ => "3",
            };
            c.set(key, value).unwrap();
        }
        assert_eq!(c.kind, LayerKind::Gat);
        assert!(c.set("unknown", "1").is_err());
        assert!(c.set("layers", "two").is_err());
    }
}
