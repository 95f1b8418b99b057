//! Diffusion layers with a latent choice among `K` diffusivity hypotheses.
//!
//! Every layer is recorded on a [`Tape`]; the plain-tensor functions wrap the
//! same code on a throwaway tape.

use rand::distributions::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{SegmentNorm, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::Tensor;

/// Floor applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;
/// Added to the linear-attention denominator.
pub const ATTENTION_EPS: f64 = 1e-10;
/// Lower bound on row norms when normalizing keys and queries.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    Gcn,
    Gat,
    Trans,
}

impl LayerKind {
    pub const ALL: [LayerKind; 3] = [LayerKind::Gcn, LayerKind::Gat, LayerKind::Trans];

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Gcn => "gcn",
            LayerKind::Gat => "gat",
            LayerKind::Trans => "trans",
        }
    }
}

impl std::str::FromStr for LayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gcn" => Ok(LayerKind::Gcn),
            "gat" => Ok(LayerKind::Gat),
            "trans" => Ok(LayerKind::Trans),
            other => Err(Error::config(format!("unknown layer kind `{other}`"))),
        }
    }
}

/// How Gumbel noise is combined with the gate probabilities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GumbelMode {
    /// `softmax((π + g)/τ)`
    PaperLiteral,
    /// `softmax((ln π + g)/τ)`
    LogSpace,
}

impl std::str::FromStr for GumbelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper-literal" => Ok(GumbelMode::PaperLiteral),
            "log-space" => Ok(GumbelMode::LogSpace),
            other => Err(Error::config(format!("unknown gumbel mode `{other}`"))),
        }
    }
}

/// Whether nodes draw their own Gumbel noise or share one draw per layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GumbelNoise {
    PerNode,
    Shared,
}

impl std::str::FromStr for GumbelNoise {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-node" => Ok(GumbelNoise::PerNode),
            "shared" => Ok(GumbelNoise::Shared),
            other => Err(Error::config(format!("unknown gumbel noise `{other}`"))),
        }
    }
}

/// Gate probabilities, the relaxed sample drawn from them and the temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct GateState {
    pub probabilities: Tensor,
    pub sample: Tensor,
    pub tau: f64,
    pub seed: Option<u64>,
}

/// Weights of one diffusivity hypothesis. Matrices act on row vectors as
/// `z ↦ z Wᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchParams {
    /// Self-feature map; absent when the self path is ablated.
    pub w_s: Option<Tensor>,
    pub w_d: Tensor,
    /// Attention projection (gat).
    pub w_a: Option<Tensor>,
    /// Attention vector as `2×d`: row 0 scores the source, row 1 the target
    /// (gat).
    pub c: Option<Tensor>,
    /// Key and query maps (trans).
    pub w_k: Option<Tensor>,
    pub w_q: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub kind: LayerKind,
    /// Gate weights, `K×d`.
    pub w_l: Tensor,
    pub branches: Vec<BranchParams>,
}

impl LayerParams {
    /// All-zero weights of the given shape.
    pub fn zeros(kind: LayerKind, d: usize, k: usize, self_feature: bool) -> Self {
        let sq = || Tensor::zeros(d, d);
        let branches = (0..k)
            .map(|_| BranchParams {
                w_s: self_feature.then(sq),
                w_d: sq(),
                w_a: (kind == LayerKind::Gat).then(sq),
                c: (kind == LayerKind::Gat).then(|| Tensor::zeros(2, d)),
                w_k: (kind == LayerKind::Trans).then(sq),
                w_q: (kind == LayerKind::Trans).then(sq),
            })
            .collect();
        Self {
            kind,
            w_l: Tensor::zeros(k, d),
            branches,
        }
    }

    pub fn hypotheses(&self) -> usize {
        self.branches.len()
    }

    pub fn width(&self) -> usize {
        self.w_l.cols()
    }

    /// Checks every weight against width `d` and the layer kind.
    pub fn validate(&self, d: usize) -> Result<()> {
        let k = self.branches.len();
        if k == 0 || self.w_l.shape() != [k, d] {
            return Err(Error::dim(format!(
                "gate weights {:?} for {k} branches of width {d}",
                self.w_l.shape()
            )));
        }
        let check = |name: &str, t: Option<&Tensor>, want: Option<[usize; 2]>| -> Result<()> {
            match (t.map(Tensor::shape), want) {
                (None, None) => Ok(()),
                (Some(s), Some(w)) if s == w => Ok(()),
                (got, want) => Err(Error::dim(format!("{name}: expected {want:?}, got {got:?}"))),
            }
        };
        let sq = Some([d, d]);
        let gat = self.kind == LayerKind::Gat;
        let trans = self.kind == LayerKind::Trans;
        let self_feature = self.branches[0].w_s.is_some();
        for b in &self.branches {
            check("w_s", b.w_s.as_ref(), self_feature.then_some([d, d]))?;
            check("w_d", Some(&b.w_d), sq)?;
            check("w_a", b.w_a.as_ref(), gat.then_some([d, d]))?;
            check("c", b.c.as_ref(), gat.then_some([2, d]))?;
            check("w_k", b.w_k.as_ref(), trans.then_some([d, d]))?;
            check("w_q", b.w_q.as_ref(), trans.then_some([d, d]))?;
        }
        Ok(())
    }

    /// Records the weights on `tape`, as leaves or as constants.
    pub fn bind(&self, tape: &Tape, trainable: bool) -> LayerVars {
        let put = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        LayerVars {
            kind: self.kind,
            w_l: put(&self.w_l),
            branches: self
                .branches
                .iter()
                .map(|b| BranchVars {
                    w_s: b.w_s.as_ref().map(put),
                    w_d: put(&b.w_d),
                    w_a: b.w_a.as_ref().map(put),
                    c: b.c.as_ref().map(put),
                    w_k: b.w_k.as_ref().map(put),
                    w_q: b.w_q.as_ref().map(put),
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BranchVars {
    pub w_s: Option<Var>,
    pub w_d: Var,
    pub w_a: Option<Var>,
    pub c: Option<Var>,
    pub w_k: Option<Var>,
    pub w_q: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct LayerVars {
    pub kind: LayerKind,
    pub w_l: Var,
    pub branches: Vec<BranchVars>,
}

/// Per-layer settings that are not weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerOptions {
    pub alpha_res: f64,
    /// `false` replaces `z` by the update instead of adding to it.
    pub residual: bool,
    pub slope: f64,
    pub attn: SegmentNorm,
}

impl Default for LayerOptions {
    fn default() -> Self {
        Self {
            alpha_res: 0.5,
            residual: true,
            slope: 0.2,
            attn: SegmentNorm::Literal,
        }
    }
}

/// `softmax(Z W_Lᵀ)` on the tape.
pub fn gate_probabilities_var(tape: &Tape, z: Var, w_l: Var) -> Var {
    let logits = tape.matmul_nt(z, w_l);
    tape.softmax_rows(logits)
}

pub fn gate_probabilities(z: &Tensor, w_l: &Tensor) -> Result<Tensor> {
    if z.cols() != w_l.cols() {
        return Err(Error::dim(format!(
            "gate weights {:?} for embeddings {:?}",
            w_l.shape(),
            z.shape()
        )));
    }
    Ok(crate::autodiff::softmax_rows(&z.matmul(&w_l.transpose())?))
}

/// Standard Gumbel noise, `n×k` or `1×k` when shared across rows.
pub fn gumbel_noise(n: usize, k: usize, noise: GumbelNoise, rng: &mut impl Rng) -> Tensor {
    let rows = match noise {
        GumbelNoise::PerNode => n,
        GumbelNoise::Shared => 1,
    };
    let data = (0..rows * k)
        .map(|_| {
            let u: f64 = rng.sample(Open01);
            -(-u.ln()).ln()
        })
        .collect();
    Tensor::from_raw(rows, k, data)
}

/// Gumbel-Softmax relaxation of a draw from `pi` given pre-drawn `noise`
/// (`N×K`, or `1×K` broadcast over rows).
pub fn sample_branch_var(tape: &Tape, pi: Var, noise: &Tensor, tau: f64, mode: GumbelMode) -> Var {
    let base = match mode {
        GumbelMode::PaperLiteral => pi,
        GumbelMode::LogSpace => tape.log_clamped(pi, PROB_FLOOR),
    };
    let g = tape.constant(noise.clone());
    let perturbed = tape.add(base, g);
    let scaled = tape.scale(perturbed, 1.0 / tau);
    tape.softmax_rows(scaled)
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!("temperature {tau} must be positive and finite")))
    }
}

/// Relaxed branch sample with independent noise per row, seeded.
pub fn sample_branch(pi: &Tensor, tau: f64, seed: u64, mode: GumbelMode) -> Result<Tensor> {
    check_tau(tau)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = gumbel_noise(pi.rows(), pi.cols(), GumbelNoise::PerNode, &mut rng);
    let tape = Tape::new();
    let p = tape.constant(pi.clone());
    let h = sample_branch_var(&tape, p, &noise, tau, mode);
    let out = tape.value(h).clone();
    Ok(out)
}

/// Nonnegative pairwise rates on the edge slots of a graph, in slot order.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusivityField {
    rates: Vec<f64>,
}

impl DiffusivityField {
    pub fn new(graph: &Graph, rates: Vec<f64>) -> Result<Self> {
        if rates.len() != graph.num_slots() {
            return Err(Error::dim(format!(
                "{} rates for {} edge slots",
                rates.len(),
                graph.num_slots()
            )));
        }
        if let Some(r) = rates.iter().find(|r| !(**r >= 0.0) || !r.is_finite()) {
            return Err(Error::config(format!("diffusivity rate {r} is not a nonnegative real")));
        }
        Ok(Self { rates })
    }

    /// Rates `f(u, v)` for every slot `u -> v`.
    pub fn from_fn(graph: &Graph, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut rates = Vec::with_capacity(graph.num_slots());
        for u in 0..graph.num_nodes() {
            for &v in graph.neighbors(u) {
                rates.push(f(u, v));
            }
        }
        Self::new(graph, rates)
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    /// Rate of slot `u -> v`, zero off the graph.
    pub fn rate(&self, graph: &Graph, u: usize, v: usize) -> f64 {
        graph
            .neighbors(u)
            .binary_search(&v)
            .map_or(0.0, |i| self.rates[graph.slot_range(u).start + i])
    }

    pub fn is_symmetric(&self, graph: &Graph) -> bool {
        (0..graph.num_nodes()).all(|u| {
            graph
                .neighbors(u)
                .iter()
                .all(|&v| self.rate(graph, u, v) == self.rate(graph, v, u))
        })
    }
}

/// `z'_u = z_u + α Σ_{v ~ u} d_uv (z_v − z_u)`.
pub fn euler_diffusion_step(z: &Tensor, graph: &Graph, field: &DiffusivityField, alpha: f64) -> Result<Tensor> {
    if z.rows() != graph.num_nodes() || field.rates.len() != graph.num_slots() {
        return Err(Error::dim(format!(
            "embeddings {:?}, graph of {} nodes, field of {} rates for {} slots",
            z.shape(),
            graph.num_nodes(),
            field.rates.len(),
            graph.num_slots()
        )));
    }
    if !(alpha > 0.0) {
        return Err(Error::config(format!("step size {alpha} must be positive")));
    }
    let d = z.cols();
    let mut out = z.clone();
    for u in 0..graph.num_nodes() {
        let mut flux = vec![0.0; d];
        for e in graph.slot_range(u) {
            let rate = field.rates[e];
            let (zu, zv) = (z.row(u), z.row(graph.slot_target(e)));
            for j in 0..d {
                flux[j] += rate * (zv[j] - zu[j]);
            }
        }
        for (o, f) in out.row_mut(u).iter_mut().zip(flux) {
            *o += alpha * f;
        }
    }
    Ok(out)
}

/// Linear-time attention `B = (1·Σz + Q̂ (K̂ᵀ Z)) / (N + Q̂ Σk̂ᵀ + eps)` with
/// `K̂`, `Q̂` the row-normalized keys and queries.
pub fn linear_attention_var(tape: &Tape, z: Var, w_k: Var, w_q: Var, eps: f64) -> Var {
    let n = tape.shape(z)[0] as f64;
    let k = tape.matmul_nt(z, w_k);
    let k = tape.l2_normalize_rows(k, NORM_EPS);
    let q = tape.matmul_nt(z, w_q);
    let q = tape.l2_normalize_rows(q, NORM_EPS);
    let sum_z = tape.sum_rows(z);
    let kz = tape.matmul_tn(k, z);
    let sum_k = tape.sum_rows(k);
    let cross = tape.matmul(q, kz);
    let num = tape.add(cross, sum_z);
    let qk = tape.matmul_nt(q, sum_k);
    let den = tape.add_scalar(qk, n + eps);
    tape.div(num, den)
}

/// Result of [`linear_attention_counted`].
#[derive(Clone, Debug, PartialEq)]
pub struct CountedAttention {
    pub output: Tensor,
    /// Multiply-adds spent building the shared summaries `Σz`, `Σ z k̂ᵀ`, `Σk̂`.
    pub summary_ops: u64,
}

/// Linear-time attention with an explicit count of the summary work.
pub fn linear_attention_counted(z: &Tensor, w_k: &Tensor, w_q: &Tensor, eps: f64) -> Result<CountedAttention> {
    let (n, d) = (z.rows(), z.cols());
    if n == 0 {
        return Err(Error::dim("attention over zero instances"));
    }
    if w_k.shape() != [d, d] || w_q.shape() != [d, d] {
        return Err(Error::dim(format!(
            "key/query maps {:?}/{:?} for width {d}",
            w_k.shape(),
            w_q.shape()
        )));
    }
    let k = crate::autodiff::l2_normalize_rows(&z.matmul(&w_k.transpose())?, NORM_EPS);
    let q = crate::autodiff::l2_normalize_rows(&z.matmul(&w_q.transpose())?, NORM_EPS);
    let mut ops = 0u64;
    let mut sum_z = vec![0.0; d];
    let mut sum_k = vec![0.0; d];
    // kz[a][j] = Σ_v k_v[a] z_v[j]
    let mut kz = vec![0.0; d * d];
    for v in 0..n {
        let (zv, kv) = (z.row(v), k.row(v));
        for j in 0..d {
            sum_z[j] += zv[j];
            sum_k[j] += kv[j];
        }
        ops += 2 * d as u64;
        for a in 0..d {
            for j in 0..d {
                kz[a * d + j] += kv[a] * zv[j];
            }
        }
        ops += (d * d) as u64;
    }
    let mut out = Tensor::zeros(n, d);
    for u in 0..n {
        let qu = q.row(u);
        let den = n as f64 + qu.iter().zip(&sum_k).map(|(a, b)| a * b).sum::<f64>() + eps;
        let row = out.row_mut(u);
        for j in 0..d {
            let cross: f64 = (0..d).map(|a| qu[a] * kz[a * d + j]).sum();
            row[j] = (sum_z[j] + cross) / den;
        }
    }
    Ok(CountedAttention {
        output: out,
        summary_ops: ops,
    })
}

pub fn linear_attention_aggregate(z: &Tensor, w_k: &Tensor, w_q: &Tensor, eps: f64) -> Result<Tensor> {
    linear_attention_counted(z, w_k, w_q, eps).map(|c| c.output)
}

/// Per-node 0/1 indicator of having at least one neighbor, as `N×1`.
fn connected_mask(graph: &Graph) -> Tensor {
    Tensor::from_raw(
        graph.num_nodes(),
        1,
        (0..graph.num_nodes())
            .map(|u| if graph.degree(u) > 0 { 1.0 } else { 0.0 })
            .collect(),
    )
}

/// Per-layer quantities shared by all branches.
struct Shared {
    neighbor_mean: Option<Var>,
    mask: Option<(Var, Var)>,
}

fn shared(tape: &Tape, z: Var, graph: &Graph, kind: LayerKind) -> Shared {
    let has_edges = graph.num_slots() > 0;
    match kind {
        LayerKind::Gcn => Shared {
            neighbor_mean: Some(tape.neighbor_mean(z, graph)),
            mask: None,
        },
        LayerKind::Gat => Shared {
            neighbor_mean: None,
            mask: None,
        },
        LayerKind::Trans if has_edges => {
            let m = connected_mask(graph);
            let inv = m.map(|v| 1.0 - v);
            Shared {
                neighbor_mean: Some(tape.neighbor_mean(z, graph)),
                mask: Some((tape.constant(m), tape.constant(inv))),
            }
        }
        LayerKind::Trans => Shared {
            neighbor_mean: None,
            mask: None,
        },
    }
}

/// Update proposed by a single hypothesis on its own, without a gate. A
/// one-branch layer is `z + α_res·hypothesis_update(..)`.
pub fn hypothesis_update(
    tape: &Tape,
    z: Var,
    graph: &Graph,
    kind: LayerKind,
    branch: &BranchVars,
    opts: &LayerOptions,
) -> Var {
    let sh = shared(tape, z, graph, kind);
    branch_update(tape, z, graph, kind, branch, &sh, opts)
}

/// Update proposed by one hypothesis, before gating.
fn branch_update(
    tape: &Tape,
    z: Var,
    graph: &Graph,
    kind: LayerKind,
    b: &BranchVars,
    shared: &Shared,
    opts: &LayerOptions,
) -> Var {
    let diffused = match kind {
        LayerKind::Gcn => {
            let m = shared.neighbor_mean.expect("gcn shares the neighbor mean");
            tape.matmul_nt(m, b.w_d)
        }
        LayerKind::Gat => {
            let w_a = b.w_a.expect("gat branch has w_a");
            let c = b.c.expect("gat branch has c");
            let p = tape.matmul_nt(z, w_a);
            let c_src = tape.select_rows(c, &[0]);
            let c_dst = tape.select_rows(c, &[1]);
            let a = tape.matmul_nt(p, c_src);
            let bb = tape.matmul_nt(p, c_dst);
            let s = tape.edge_scores(a, bb, graph);
            let s = tape.leaky_relu(s, opts.slope);
            let w = tape.segment_normalize(s, graph, opts.attn);
            let values = tape.matmul_nt(z, b.w_d);
            tape.edge_aggregate(w, values, graph)
        }
        LayerKind::Trans => {
            let attn = linear_attention_var(
                tape,
                z,
                b.w_k.expect("trans branch has w_k"),
                b.w_q.expect("trans branch has w_q"),
                ATTENTION_EPS,
            );
            let mixed = match (shared.neighbor_mean, shared.mask) {
                (Some(nm), Some((mask, inv))) => {
                    let sum = tape.add(attn, nm);
                    let half = tape.scale(sum, 0.5);
                    let on = tape.mul(half, mask);
                    let off = tape.mul(attn, inv);
                    tape.add(on, off)
                }
                _ => attn,
            };
            tape.matmul_nt(mixed, b.w_d)
        }
    };
    match b.w_s {
        Some(w_s) => {
            let own = tape.matmul_nt(z, w_s);
            tape.add(diffused, own)
        }
        None => diffused,
    }
}

/// `Δ = Σ_k h_{·,k} ⊙ M_k`.
pub fn layer_delta(tape: &Tape, z: Var, graph: &Graph, vars: &LayerVars, h: Var, opts: &LayerOptions) -> Var {
    let sh = shared(tape, z, graph, vars.kind);
    let mut delta: Option<Var> = None;
    for (k, b) in vars.branches.iter().enumerate() {
        let m = branch_update(tape, z, graph, vars.kind, b, &sh, opts);
        let hk = tape.column(h, k);
        let term = tape.mul(m, hk);
        delta = Some(match delta {
            None => term,
            Some(acc) => tape.add(acc, term),
        });
    }
    delta.expect("layer has at least one branch")
}

/// `z + α_res·Δ`, or `Δ` without the residual path.
pub fn layer_update(tape: &Tape, z: Var, graph: &Graph, vars: &LayerVars, h: Var, opts: &LayerOptions) -> Var {
    let delta = layer_delta(tape, z, graph, vars, h, opts);
    if opts.residual {
        let step = tape.scale(delta, opts.alpha_res);
        tape.add(z, step)
    } else {
        delta
    }
}

fn apply_plain(z: &Tensor, graph: &Graph, params: &LayerParams, h: &Tensor, opts: &LayerOptions) -> Result<Tensor> {
    params.validate(z.cols())?;
    if z.rows() != graph.num_nodes() || h.shape() != [z.rows(), params.hypotheses()] {
        return Err(Error::dim(format!(
            "embeddings {:?}, graph of {} nodes, branch weights {:?} for K = {}",
            z.shape(),
            graph.num_nodes(),
            h.shape(),
            params.hypotheses()
        )));
    }
    let tape = Tape::new();
    let zv = tape.constant(z.clone());
    let hv = tape.constant(h.clone());
    let vars = params.bind(&tape, false);
    let out = layer_update(&tape, zv, graph, &vars, hv, opts);
    let value = tape.value(out).clone();
    Ok(value)
}

fn expect_kind(params: &LayerParams, kind: LayerKind) -> Result<()> {
    if params.kind == kind {
        Ok(())
    } else {
        Err(Error::config(format!(
            "{} layer given {} parameters",
            kind.name(),
            params.kind.name()
        )))
    }
}

pub fn glind_gcn_layer(z: &Tensor, graph: &Graph, params: &LayerParams, h: &Tensor, alpha_res: f64) -> Result<Tensor> {
    expect_kind(params, LayerKind::Gcn)?;
    let opts = LayerOptions {
        alpha_res,
        ..LayerOptions::default()
    };
    apply_plain(z, graph, params, h, &opts)
}

pub fn glind_gat_layer(
    z: &Tensor,
    graph: &Graph,
    params: &LayerParams,
    h: &Tensor,
    alpha_res: f64,
    slope: f64,
    attn: SegmentNorm,
) -> Result<Tensor> {
    expect_kind(params, LayerKind::Gat)?;
    crate::autodiff::check_slope(slope)?;
    let opts = LayerOptions {
        alpha_res,
        residual: true,
        slope,
        attn,
    };
    apply_plain(z, graph, params, h, &opts)
}

/// Without a graph the attention is not mixed with neighbor means.
pub fn glind_trans_layer(
    z: &Tensor,
    graph: Option<&Graph>,
    params: &LayerParams,
    h: &Tensor,
    alpha_res: f64,
) -> Result<Tensor> {
    expect_kind(params, LayerKind::Trans)?;
    let empty;
    let graph = match graph {
        Some(g) => g,
        None => {
            empty = Graph::empty(z.rows());
            &empty
        }
    };
    let opts = LayerOptions {
        alpha_res,
        ..LayerOptions::default()
    };
    apply_plain(z, graph, params, h, &opts)
}
