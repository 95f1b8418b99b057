//! The full network: input projection, diffusion layers, output projection.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{SegmentNorm, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::layers::{
    gate_probabilities_var, gumbel_noise, layer_update, sample_branch_var, BranchParams, BranchVars, GateState,
    GumbelMode, GumbelNoise, LayerKind, LayerOptions, LayerParams, LayerVars,
};
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: LayerKind,
    pub input_dim: usize,
    pub hidden: usize,
    pub output_dim: usize,
    pub layers: usize,
    pub hypotheses: usize,
    pub tau: f64,
    pub alpha_res: f64,
    pub residual: bool,
    pub self_feature: bool,
    pub dropout: f64,
    pub gumbel: GumbelMode,
    pub gumbel_noise: GumbelNoise,
    pub attn: SegmentNorm,
    pub slope: f64,
}

impl ModelConfig {
    pub fn new(kind: LayerKind, input_dim: usize, hidden: usize, output_dim: usize) -> Self {
        Self {
            kind,
            input_dim,
            hidden,
            output_dim,
            layers: 2,
            hypotheses: 4,
            tau: 1.0,
            alpha_res: 0.5,
            residual: true,
            self_feature: true,
            dropout: 0.0,
            gumbel: GumbelMode::PaperLiteral,
            gumbel_noise: GumbelNoise::PerNode,
            attn: SegmentNorm::Literal,
            slope: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.input_dim == 0 || self.hidden == 0 || self.output_dim == 0 {
            return fail(format!(
                "dimensions must be positive: input {}, hidden {}, output {}",
                self.input_dim, self.hidden, self.output_dim
            ));
        }
        if self.hypotheses == 0 {
            return fail("need at least one diffusivity hypothesis".into());
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return fail(format!("temperature {} must be positive", self.tau));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.alpha_res.is_finite() && self.alpha_res > 0.0) {
            return fail(format!("residual weight {} must be positive", self.alpha_res));
        }
        crate::autodiff::check_slope(self.slope)
    }

    pub fn layer_options(&self) -> LayerOptions {
        LayerOptions {
            alpha_res: self.alpha_res,
            residual: self.residual,
            slope: self.slope,
            attn: self.attn,
        }
    }

    /// Name, shape and fan-in of every parameter, in canonical order.
    pub fn layout(&self) -> Vec<(String, [usize; 2], usize)> {
        let (d, k) = (self.hidden, self.hypotheses);
        let mut out = vec![
            ("input.weight".to_string(), [d, self.input_dim], self.input_dim),
            ("input.bias".to_string(), [1, d], self.input_dim),
        ];
        for l in 0..self.layers {
            out.push((format!("layer{l}.gate"), [k, d], d));
            for b in 0..k {
                let p = format!("layer{l}.branch{b}");
                if self.self_feature {
                    out.push((format!("{p}.w_s"), [d, d], d));
                }
                out.push((format!("{p}.w_d"), [d, d], d));
                match self.kind {
                    LayerKind::Gcn => {}
                    LayerKind::Gat => {
                        out.push((format!("{p}.w_a"), [d, d], d));
                        out.push((format!("{p}.c"), [2, d], 2 * d));
                    }
                    LayerKind::Trans => {
                        out.push((format!("{p}.w_k"), [d, d], d));
                        out.push((format!("{p}.w_q"), [d, d], d));
                    }
                }
            }
        }
        out.push(("output.weight".to_string(), [self.output_dim, d], d));
        out.push(("output.bias".to_string(), [1, self.output_dim], d));
        out
    }
}

/// Named parameter tensors in canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl Params {
    pub fn from_named(named: Vec<(String, Tensor)>) -> Self {
        let index = named.iter().enumerate().map(|(i, (n, _))| (n.clone(), i)).collect();
        let (names, tensors) = named.into_iter().unzip();
        Self { names, tensors, index }
    }

    /// Uniform in `±1/√fan_in`, each tensor from a stream keyed by its name.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        Self::from_named(
            config
                .layout()
                .into_iter()
                .map(|(name, [r, c], fan_in)| {
                    let mut rng = rng::name_stream(seed, &name);
                    let t = Tensor::uniform(r, c, 1.0 / (fan_in as f64).sqrt(), &mut rng);
                    (name, t)
                })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.position(name).map(move |i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Checks names and shapes against `config`.
    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        let layout = config.layout();
        if layout.len() != self.len() {
            return Err(Error::config(format!(
                "configuration expects {} parameters, found {}",
                layout.len(),
                self.len()
            )));
        }
        for ((name, shape, _), (n, t)) in layout.iter().zip(self.iter()) {
            if name != n || *shape != t.shape() {
                return Err(Error::config(format!(
                    "parameter {n} {:?} does not match expected {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// Weights of layer `l` as a standalone structure.
    pub fn layer(&self, config: &ModelConfig, l: usize) -> LayerParams {
        let get = |n: String| self.get(&n).cloned();
        LayerParams {
            kind: config.kind,
            w_l: get(format!("layer{l}.gate")).expect("gate present"),
            branches: (0..config.hypotheses)
                .map(|b| {
                    let p = format!("layer{l}.branch{b}");
                    BranchParams {
                        w_s: get(format!("{p}.w_s")),
                        w_d: get(format!("{p}.w_d")).expect("w_d present"),
                        w_a: get(format!("{p}.w_a")),
                        c: get(format!("{p}.c")),
                        w_k: get(format!("{p}.w_k")),
                        w_q: get(format!("{p}.w_q")),
                    }
                })
                .collect(),
        }
    }
}

/// Parameters recorded on a tape, aligned with [`Params::names`].
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
    pub input_weight: Var,
    pub input_bias: Var,
    pub layers: Vec<LayerVars>,
    pub output_weight: Var,
    pub output_bias: Var,
}

/// How each layer picks its branch weights `h`.
#[derive(Clone, Debug, PartialEq)]
pub enum BranchMode {
    /// Gumbel-Softmax relaxed sample.
    Sampled,
    /// `h = π`.
    Expectation,
    /// One-hot at the given branch per layer, the same for every node.
    Fixed(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOptions {
    pub branch: BranchMode,
    pub dropout: bool,
    /// Seed and step keying the Gumbel and dropout streams.
    pub seed: u64,
    pub step: u64,
}

impl ForwardOptions {
    pub fn train(seed: u64, step: u64) -> Self {
        Self {
            branch: BranchMode::Sampled,
            dropout: true,
            seed,
            step,
        }
    }

    pub fn eval() -> Self {
        Self {
            branch: BranchMode::Expectation,
            dropout: false,
            seed: 0,
            step: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    /// Gate probabilities `π` per layer.
    pub gates: Vec<Var>,
    /// Branch weights `h` per layer.
    pub samples: Vec<Var>,
    /// Embeddings `Z⁽⁰⁾ … Z⁽ᴸ⁾`.
    pub trajectory: Vec<Var>,
}

/// Inverted-dropout mask: entries `0` or `1/(1−p)`.
pub fn dropout_mask(n: usize, d: usize, p: f64, rng: &mut impl Rng) -> Tensor {
    let keep = 1.0 / (1.0 - p);
    let data = (0..n * d)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect();
    Tensor::from_raw(n, d, data)
}

fn one_hot_rows(n: usize, k: usize, at: usize) -> Tensor {
    let mut t = Tensor::zeros(n, k);
    for r in 0..n {
        t.data_mut()[r * k + at] = 1.0;
    }
    t
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = Params::init(&config, seed);
        Ok(Self { config, params })
    }

    pub fn from_params(config: ModelConfig, params: Params) -> Result<Self> {
        config.validate()?;
        params.check(&config)?;
        Ok(Self { config, params })
    }

    /// Records every parameter on `tape`.
    pub fn bind(&self, tape: &Tape, trainable: bool) -> Bound {
        let vars: Vec<Var> = self
            .params
            .tensors()
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        let at = |name: &str| self.params.position(name).map(|i| vars[i]);
        let layers = (0..self.config.layers)
            .map(|l| LayerVars {
                kind: self.config.kind,
                w_l: at(&format!("layer{l}.gate")).expect("gate bound"),
                branches: (0..self.config.hypotheses)
                    .map(|b| {
                        let p = format!("layer{l}.branch{b}");
                        BranchVars {
                            w_s: at(&format!("{p}.w_s")),
                            w_d: at(&format!("{p}.w_d")).expect("w_d bound"),
                            w_a: at(&format!("{p}.w_a")),
                            c: at(&format!("{p}.c")),
                            w_k: at(&format!("{p}.w_k")),
                            w_q: at(&format!("{p}.w_q")),
                        }
                    })
                    .collect(),
            })
            .collect();
        Bound {
            input_weight: at("input.weight").expect("input bound"),
            input_bias: at("input.bias").expect("input bound"),
            output_weight: at("output.weight").expect("output bound"),
            output_bias: at("output.bias").expect("output bound"),
            layers,
            vars,
        }
    }

    /// Records a forward pass of `x` over `graph`.
    pub fn forward(
        &self,
        tape: &Tape,
        bound: &Bound,
        x: Var,
        graph: &Graph,
        opts: &ForwardOptions,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let [n, dx] = tape.shape(x);
        if dx != cfg.input_dim || n != graph.num_nodes() {
            return Err(Error::config(format!(
                "input {:?} over {} nodes for a model expecting {} features",
                [n, dx],
                graph.num_nodes(),
                cfg.input_dim
            )));
        }
        if let BranchMode::Fixed(a) = &opts.branch {
            if a.len() != cfg.layers || a.iter().any(|&k| k >= cfg.hypotheses) {
                return Err(Error::config(format!(
                    "branch assignment {a:?} invalid for {} layers of {} branches",
                    cfg.layers, cfg.hypotheses
                )));
            }
        }
        let layer_opts = cfg.layer_options();
        let pre = tape.matmul_nt(x, bound.input_weight);
        let pre = tape.add(pre, bound.input_bias);
        let mut z = tape.relu(pre);
        let mut out = ForwardOutput {
            logits: z,
            gates: Vec::with_capacity(cfg.layers),
            samples: Vec::with_capacity(cfg.layers),
            trajectory: vec![z],
        };
        for (l, vars) in bound.layers.iter().enumerate() {
            let pi = gate_probabilities_var(tape, z, vars.w_l);
            let h = match &opts.branch {
                BranchMode::Sampled => {
                    let mut r = rng::stream(opts.seed, Purpose::Gumbel, opts.step, l as u64);
                    let noise = gumbel_noise(n, cfg.hypotheses, cfg.gumbel_noise, &mut r);
                    sample_branch_var(tape, pi, &noise, cfg.tau, cfg.gumbel)
                }
                BranchMode::Expectation => pi,
                BranchMode::Fixed(a) => tape.constant(one_hot_rows(n, cfg.hypotheses, a[l])),
            };
            let updated = layer_update(tape, z, graph, vars, h, &layer_opts);
            z = tape.relu(updated);
            if opts.dropout && cfg.dropout > 0.0 {
                let mut r = rng::stream(opts.seed, Purpose::Dropout, opts.step, l as u64);
                let mask = tape.constant(dropout_mask(n, cfg.hidden, cfg.dropout, &mut r));
                z = tape.mul(z, mask);
            }
            out.gates.push(pi);
            out.samples.push(h);
            out.trajectory.push(z);
        }
        let logits = tape.matmul_nt(z, bound.output_weight);
        out.logits = tape.add(logits, bound.output_bias);
        Ok(out)
    }

    /// Deterministic outputs (`h = π`, no dropout).
    pub fn predict(&self, x: &Tensor, graph: &Graph) -> Result<Tensor> {
        self.run(x, graph, &ForwardOptions::eval()).map(|(logits, _)| logits)
    }

    /// Outputs and per-layer gate states of one pass.
    pub fn run(&self, x: &Tensor, graph: &Graph, opts: &ForwardOptions) -> Result<(Tensor, Vec<GateState>)> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward(&tape, &bound, xv, graph, opts)?;
        let seed = matches!(opts.branch, BranchMode::Sampled).then_some(opts.seed);
        let gates = out
            .gates
            .iter()
            .zip(&out.samples)
            .map(|(&p, &h)| GateState {
                probabilities: tape.value(p).clone(),
                sample: tape.value(h).clone(),
                tau: self.config.tau,
                seed,
            })
            .collect();
        let logits = tape.value(out.logits).clone();
        Ok((logits, gates))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(kind: LayerKind, layers: usize) -> (Model, Tensor, Graph) {
        let mut cfg = ModelConfig::new(kind, 3, 4, 2);
        cfg.layers = layers;
        cfg.hypotheses = 3;
        cfg.dropout = 0.3;
        let model = Model::new(cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::uniform(6, 3, 1.0, &mut rng);
        let g = Graph::from_edges(6, [(0, 1), (1, 2), (3, 4), (2, 5)]).unwrap();
        (model, x, g)
    }

    #[test]
    fn layout_matches_initialized_params() {
        for kind in LayerKind::ALL {
            let (m, _, _) = setup(kind, 2);
            m.params.check(&m.config).unwrap();
            m.params.layer(&m.config, 1).validate(4).unwrap();
        }
    }

    #[test]
    fn init_depends_only_on_name_and_seed() {
        let (m, _, _) = setup(LayerKind::Gcn, 2);
        let mut cfg = m.config.clone();
        cfg.hypotheses = 1;
        let small = Model::new(cfg, 5).unwrap();
        assert_eq!(
            small.params.get("layer1.branch0.w_d"),
            m.params.get("layer1.branch0.w_d")
        );
        assert_eq!(small.params.get("output.weight"), m.params.get("output.weight"));
    }

    #[test]
    fn zero_depth_is_a_perceptron() {
        let (m, x, g) = setup(LayerKind::Gcn, 0);
        let out = m.predict(&x, &g).unwrap();
        let w_in = m.params.get("input.weight").unwrap();
        let b_in = m.params.get("input.bias").unwrap();
        let w_out = m.params.get("output.weight").unwrap();
        let b_out = m.params.get("output.bias").unwrap();
        let hidden = x.matmul(&w_in.transpose()).unwrap();
        for r in 0..6 {
            for c in 0..2 {
                let mut v = b_out.get(0, c);
                for j in 0..4 {
                    v += (hidden.get(r, j) + b_in.get(0, j)).max(0.0) * w_out.get(c, j);
                }
                assert!((out.get(r, c) - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn train_mode_is_seeded_and_eval_is_deterministic() {
        for kind in LayerKind::ALL {
            let (m, x, g) = setup(kind, 2);
            let a = m.run(&x, &g, &ForwardOptions::train(3, 1)).unwrap();
            let b = m.run(&x, &g, &ForwardOptions::train(3, 1)).unwrap();
            let c = m.run(&x, &g, &ForwardOptions::train(3, 2)).unwrap();
            assert_eq!(a.0, b.0);
            assert_ne!(a.0, c.0);
            assert_eq!(m.predict(&x, &g).unwrap(), m.predict(&x, &g).unwrap());
            for gate in &a.1 {
                for r in 0..6 {
                    assert!((gate.sample.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn fixed_assignment_validated() {
        let (m, x, g) = setup(LayerKind::Gat, 2);
        let opts = |a: Vec<usize>| ForwardOptions {
            branch: BranchMode::Fixed(a),
            ..ForwardOptions::eval()
        };
        assert!(m.run(&x, &g, &opts(vec![0, 2])).is_ok());
        assert!(m.run(&x, &g, &opts(vec![0, 3])).is_err());
        assert!(m.run(&x, &g, &opts(vec![0])).is_err());
    }
}
