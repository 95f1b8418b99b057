//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Calling
//! [`Tape::backward`] on a `1×1` output walks the tape in reverse and returns
//! exact gradients for every recorded node. A tape may be backpropagated
//! once; [`Tape::reset`] clears it for the next step.
//!
//! ```
//! use glind::autodiff::Tape;
//! use glind::Tensor;
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::row_vector(&[1.0, -2.0]).unwrap());
//! let y = tape.sum(tape.mul(x, x));
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.wrt(x).data(), &[2.0, -4.0]);
//! ```
//!
//! Besides dense algebra, the tape has sparse message-passing primitives keyed
//! on a [`Graph`]'s CSR edge slots: neighbor means, per-edge scores, segment
//! normalization and weighted aggregation.

use std::cell::{Ref, RefCell};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

/// How per-node edge scores are turned into weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SegmentNorm {
    /// `w_e = s_e / (Σ s + 1e-8·sign(Σ s))`, with `sign(0) = +1`.
    Literal,
    /// `w_e = exp(s_e) / Σ exp(s)`.
    Softmax,
}

pub(crate) const SIGNED_EPS: f64 = 1e-8;

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Transpose(Var),
    Binary(Binary, Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Exp(Var),
    LogClamped(Var, f64),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    L2NormalizeRows(Var, f64),
    SumRows(Var),
    SumCols(Var),
    Sum(Var),
    SelectRows(Var, Vec<usize>),
    Column(Var, usize),
    NllMean {
        logp: Var,
        rows: Vec<usize>,
        targets: Vec<usize>,
    },
    NeighborMean(Var, Graph),
    EdgeScores(Var, Var, Graph),
    SegmentNormalize(Var, Graph, SegmentNorm),
    EdgeAggregate(Var, Var, Graph),
}

impl Op {
    fn inputs(&self) -> [Option<Var>; 2] {
        match self {
            Op::Leaf | Op::Constant => [None, None],
            Op::MatMul { a, b, .. } | Op::Binary(_, a, b) | Op::EdgeScores(a, b, _) | Op::EdgeAggregate(a, b, _) => {
                [Some(*a), Some(*b)]
            }
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Relu(a)
            | Op::LeakyRelu(a, _)
            | Op::Exp(a)
            | Op::LogClamped(a, _)
            | Op::SoftmaxRows(a)
            | Op::LogSoftmaxRows(a)
            | Op::L2NormalizeRows(a, _)
            | Op::SumRows(a)
            | Op::SumCols(a)
            | Op::Sum(a)
            | Op::SelectRows(a, _)
            | Op::Column(a, _)
            | Op::NeighborMean(a, _)
            | Op::SegmentNormalize(a, _, _) => [Some(*a), None],
            Op::NllMean { logp, .. } => [Some(*logp), None],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records a differentiable computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: RefCell<bool>,
}

/// Gradients of a scalar output with respect to every tape node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<[usize; 2]>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for `v`; zeros when the output does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let [r, c] = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }
}

fn broadcast_shape(a: [usize; 2], b: [usize; 2]) -> Result<[usize; 2]> {
    let dim = |x: usize, y: usize| -> Option<usize> {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    match (dim(a[0], b[0]), dim(a[1], b[1])) {
        (Some(r), Some(c)) => Ok([r, c]),
        _ => Err(Error::dim(format!("cannot broadcast {a:?} with {b:?}"))),
    }
}

#[inline]
fn bidx(shape: [usize; 2], r: usize, c: usize) -> usize {
    let rr = if shape[0] == 1 { 0 } else { r };
    let cc = if shape[1] == 1 { 0 } else { c };
    rr * shape[1] + cc
}

fn apply_binary(op: Binary, a: &Tensor, b: &Tensor, out: [usize; 2]) -> Tensor {
    match op {
        Binary::Add => broadcast_with(a, b, out, |x, y| x + y),
        Binary::Sub => broadcast_with(a, b, out, |x, y| x - y),
        Binary::Mul => broadcast_with(a, b, out, |x, y| x * y),
        Binary::Div => broadcast_with(a, b, out, |x, y| x / y),
    }
}

fn broadcast_with(a: &Tensor, b: &Tensor, out: [usize; 2], f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        return Tensor::from_raw(
            out[0],
            out[1],
            a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        );
    }
    let (sa, sb) = (a.shape(), b.shape());
    let mut data = Vec::with_capacity(out[0] * out[1]);
    for r in 0..out[0] {
        let ra = &a.data()[if sa[0] == 1 { 0 } else { r * sa[1] }..][..sa[1]];
        let rb = &b.data()[if sb[0] == 1 { 0 } else { r * sb[1] }..][..sb[1]];
        match (sa[1] == out[1], sb[1] == out[1]) {
            (true, true) => data.extend(ra.iter().zip(rb).map(|(&x, &y)| f(x, y))),
            (true, false) => data.extend(ra.iter().map(|&x| f(x, rb[0]))),
            (false, true) => data.extend(rb.iter().map(|&y| f(ra[0], y))),
            (false, false) => data.extend((0..out[1]).map(|_| f(ra[0], rb[0]))),
        }
    }
    Tensor::from_raw(out[0], out[1], data)
}

/// Sums a gradient of shape `out` down to `target` (undoing broadcasting).
fn reduce_to(g: &Tensor, target: [usize; 2]) -> Tensor {
    if g.shape() == target {
        return g.clone();
    }
    let mut data = vec![0.0; target[0] * target[1]];
    for r in 0..g.rows() {
        for c in 0..g.cols() {
            data[bidx(target, r, c)] += g.get(r, c);
        }
    }
    Tensor::from_raw(target[0], target[1], data)
}

fn softmax_row(x: &[f64], out: &mut [f64]) {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - m).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        softmax_row(x.row(r), out.row_mut(r));
    }
    out
}

pub fn log_softmax_rows(x: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let row = x.row(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        for (o, v) in out.row_mut(r).iter_mut().zip(row) {
            *o = v - lse;
        }
    }
    out
}

/// Divides each row by `max(‖row‖₂, eps)`.
pub fn l2_normalize_rows(x: &Tensor, eps: f64) -> Tensor {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let n = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
        for v in out.row_mut(r) {
            *v /= n;
        }
    }
    out
}

/// Elementwise `x` for `x ≥ 0`, `slope·x` otherwise.
pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    check_slope(slope)?;
    Ok(x.map(|v| if v >= 0.0 { v } else { slope * v }))
}

pub(crate) fn check_slope(slope: f64) -> Result<()> {
    if slope > 0.0 && slope < 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!("LeakyReLU slope {slope} outside (0, 1)")))
    }
}

fn signed_guard(s: f64) -> f64 {
    if s >= 0.0 {
        s + SIGNED_EPS
    } else {
        s - SIGNED_EPS
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Clears all nodes; previously issued [`Var`]s become invalid.
    pub fn reset(&self) {
        self.nodes.borrow_mut().clear();
        *self.consumed.borrow_mut() = false;
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var(nodes.len() - 1)
    }

    /// A differentiable input (typically a trainable parameter).
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A non-differentiable input; gradients still reach it but are never
    /// propagated further.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    /// Stop-gradient copy of `v`.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes.borrow()[v.0].value.shape()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        self.matmul_ext(a, false, b, false)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&self, a: Var, b: Var) -> Var {
        self.matmul_ext(a, false, b, true)
    }

    /// `aᵀ · b`
    pub fn matmul_tn(&self, a: Var, b: Var) -> Var {
        self.matmul_ext(a, true, b, false)
    }

    fn matmul_ext(&self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            let k1 = if ta { x.rows() } else { x.cols() };
            let k2 = if tb { y.cols() } else { y.rows() };
            assert_eq!(
                k1,
                k2,
                "matmul inner extents disagree: {:?}{} · {:?}{}",
                x.shape(),
                if ta { "ᵀ" } else { "" },
                y.shape(),
                if tb { "ᵀ" } else { "" }
            );
            gemm(x, ta, y, tb)
        };
        self.push(value, Op::MatMul { a, b, ta, tb })
    }

    /// Checked matrix product.
    pub fn try_matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[1] != sb[0] {
            return Err(Error::dim(format!("matmul of {sa:?} by {sb:?}")));
        }
        Ok(self.matmul(a, b))
    }

    pub fn transpose(&self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    fn binary(&self, op: Binary, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            let out = broadcast_shape(x.shape(), y.shape()).unwrap_or_else(|e| panic!("{e}"));
            apply_binary(op, x, y, out)
        };
        self.push(value, Op::Binary(op, a, b))
    }

    /// Elementwise sum with row/column/scalar broadcasting.
    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        self.binary(Binary::Div, a, b)
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v * c);
        self.push(value, Op::Scale(a, c))
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v + c);
        self.push(value, Op::AddScalar(a))
    }

    pub fn relu(&self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn leaky_relu(&self, a: Var, slope: f64) -> Var {
        let value = self.value(a).map(|v| if v >= 0.0 { v } else { slope * v });
        self.push(value, Op::LeakyRelu(a, slope))
    }

    pub fn exp(&self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push(value, Op::Exp(a))
    }

    /// `ln(max(x, floor))`; zero gradient where the floor is active.
    pub fn log_clamped(&self, a: Var, floor: f64) -> Var {
        let value = self.value(a).map(|v| v.max(floor).ln());
        self.push(value, Op::LogClamped(a, floor))
    }

    pub fn softmax_rows(&self, a: Var) -> Var {
        let value = softmax_rows(&self.value(a));
        self.push(value, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&self, a: Var) -> Var {
        let value = log_softmax_rows(&self.value(a));
        self.push(value, Op::LogSoftmaxRows(a))
    }

    pub fn l2_normalize_rows(&self, a: Var, eps: f64) -> Var {
        let value = l2_normalize_rows(&self.value(a), eps);
        self.push(value, Op::L2NormalizeRows(a, eps))
    }

    /// Sum over rows: `N×d → 1×d`.
    pub fn sum_rows(&self, a: Var) -> Var {
        let value = self.value(a).column_sums();
        self.push(value, Op::SumRows(a))
    }

    /// Sum over columns: `N×d → N×1`.
    pub fn sum_cols(&self, a: Var) -> Var {
        let value = {
            let x = self.value(a);
            let data = (0..x.rows()).map(|r| x.row(r).iter().sum()).collect();
            Tensor::from_raw(x.rows(), 1, data)
        };
        self.push(value, Op::SumCols(a))
    }

    pub fn sum(&self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Mean over rows: `N×d → 1×d`.
    pub fn mean_rows(&self, a: Var) -> Var {
        let n = self.shape(a)[0] as f64;
        let s = self.sum_rows(a);
        self.scale(s, 1.0 / n)
    }

    pub fn select_rows(&self, a: Var, rows: &[usize]) -> Var {
        let value = self.value(a).select_rows(rows);
        self.push(value, Op::SelectRows(a, rows.to_vec()))
    }

    /// Column `k` as an `N×1` tensor.
    pub fn column(&self, a: Var, k: usize) -> Var {
        let value = {
            let x = self.value(a);
            let data = (0..x.rows()).map(|r| x.get(r, k)).collect();
            Tensor::from_raw(x.rows(), 1, data)
        };
        self.push(value, Op::Column(a, k))
    }

    /// `-(1/n) Σ_i logp[rows_i, targets_i]`.
    pub fn nll_mean(&self, logp: Var, rows: &[usize], targets: &[usize]) -> Var {
        assert_eq!(rows.len(), targets.len());
        assert!(!rows.is_empty(), "nll over an empty index set");
        let value = {
            let lp = self.value(logp);
            let s: f64 = rows.iter().zip(targets).map(|(&r, &t)| lp.get(r, t)).sum();
            Tensor::scalar(-s / rows.len() as f64)
        };
        self.push(
            value,
            Op::NllMean {
                logp,
                rows: rows.to_vec(),
                targets: targets.to_vec(),
            },
        )
    }

    /// `out_u = (1/d̃_u) Σ_{v ∈ N(u)} x_v`, zero for isolated nodes.
    pub fn neighbor_mean(&self, x: Var, graph: &Graph) -> Var {
        let value = neighbor_mean(&self.value(x), graph);
        self.push(value, Op::NeighborMean(x, graph.clone()))
    }

    /// Per edge slot `u -> v`: `a_u + b_v`, as an `E×1` column.
    pub fn edge_scores(&self, a: Var, b: Var, graph: &Graph) -> Var {
        let value = {
            let (x, y) = (self.value(a), self.value(b));
            let mut data = Vec::with_capacity(graph.num_slots());
            for u in 0..graph.num_nodes() {
                for &v in graph.neighbors(u) {
                    data.push(x.data()[u] + y.data()[v]);
                }
            }
            Tensor::from_raw(data.len(), 1, data)
        };
        self.push(value, Op::EdgeScores(a, b, graph.clone()))
    }

    /// Normalizes edge scores within each node's outgoing slots.
    pub fn segment_normalize(&self, s: Var, graph: &Graph, mode: SegmentNorm) -> Var {
        let value = {
            let x = self.value(s);
            let mut out = vec![0.0; x.len()];
            for u in 0..graph.num_nodes() {
                let r = graph.slot_range(u);
                if r.is_empty() {
                    continue;
                }
                let seg = &x.data()[r.clone()];
                match mode {
                    SegmentNorm::Literal => {
                        let d = signed_guard(seg.iter().sum());
                        for (o, v) in out[r].iter_mut().zip(seg) {
                            *o = v / d;
                        }
                    }
                    SegmentNorm::Softmax => softmax_row(seg, &mut out[r]),
                }
            }
            Tensor::from_raw(x.len(), 1, out)
        };
        self.push(value, Op::SegmentNormalize(s, graph.clone(), mode))
    }

    /// `out_u = Σ_{slots u->v} w_e · x_v`.
    pub fn edge_aggregate(&self, w: Var, x: Var, graph: &Graph) -> Var {
        let value = {
            let (wt, xt) = (self.value(w), self.value(x));
            let d = xt.cols();
            let mut out = Tensor::zeros(graph.num_nodes(), d);
            for u in 0..graph.num_nodes() {
                for e in graph.slot_range(u) {
                    let we = wt.data()[e];
                    let xv = xt.row(graph.slot_target(e));
                    for (o, v) in out.row_mut(u).iter_mut().zip(xv) {
                        *o += we * v;
                    }
                }
            }
            out
        };
        self.push(value, Op::EdgeAggregate(w, x, graph.clone()))
    }

    /// Smallest distance of any recorded ReLU/LeakyReLU input from its kink
    /// at zero, and of any literal attention denominator from zero.
    /// `f64::INFINITY` when the tape has none.
    pub fn min_kink_margin(&self) -> f64 {
        let nodes = self.nodes.borrow();
        let mut m = f64::INFINITY;
        for node in nodes.iter() {
            match &node.op {
                Op::Relu(a) | Op::LeakyRelu(a, _) => {
                    m = m.min(
                        nodes[a.0]
                            .value
                            .data()
                            .iter()
                            .fold(f64::INFINITY, |acc, v| acc.min(v.abs())),
                    );
                }
                Op::SegmentNormalize(s, g, SegmentNorm::Literal) => {
                    let x = &nodes[s.0].value;
                    for u in 0..g.num_nodes() {
                        let r = g.slot_range(u);
                        if !r.is_empty() {
                            m = m.min(x.data()[r].iter().sum::<f64>().abs());
                        }
                    }
                }
                _ => {}
            }
        }
        m
    }

    /// Reverse-mode sweep from a `1×1` output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        {
            let mut consumed = self.consumed.borrow_mut();
            if *consumed {
                return Err(Error::Usage(
                    "tape already backpropagated; reset it before recording a new pass".into(),
                ));
            }
            *consumed = true;
        }
        let nodes = self.nodes.borrow();
        if nodes[output.0].value.shape() != [1, 1] {
            return Err(Error::Usage(format!(
                "backward needs a scalar output, got {:?}",
                nodes[output.0].value.shape()
            )));
        }
        // Whether a node depends on any leaf.
        let mut needs = vec![false; nodes.len()];
        for (i, node) in nodes.iter().enumerate() {
            needs[i] = match node.op {
                Op::Leaf => true,
                _ => node.op.inputs().iter().flatten().any(|v| needs[v.0]),
            };
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[output.0] = Some(Tensor::scalar(1.0));

        for i in (0..=output.0).rev() {
            if !needs[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let val = |v: Var| &nodes[v.0].value;
            macro_rules! acc {
                ($v:expr, $t:expr) => {{
                    let v: Var = $v;
                    if needs[v.0] {
                        accumulate(&mut grads, v, $t);
                    }
                }};
            }
            match &node.op {
                Op::Leaf | Op::Constant => {}
                Op::MatMul { a, b, ta, tb } => {
                    let (x, y) = (val(*a), val(*b));
                    // C = op(A) op(B); dop(A) = G op(B)ᵀ, dop(B) = op(A)ᵀ G.
                    let ga = if *ta {
                        gemm(y, *tb, &g, true)
                    } else {
                        gemm(&g, false, y, !*tb)
                    };
                    let gb = if *tb {
                        gemm(&g, true, x, *ta)
                    } else {
                        gemm(x, !*ta, &g, false)
                    };
                    acc!(*a, ga);
                    acc!(*b, gb);
                }
                Op::Transpose(a) => acc!(*a, g.transpose()),
                Op::Binary(op, a, b) => {
                    let (x, y) = (val(*a), val(*b));
                    let (sa, sb) = (x.shape(), y.shape());
                    match op {
                        Binary::Add => {
                            acc!(*a, reduce_to(&g, sa));
                            acc!(*b, reduce_to(&g, sb));
                        }
                        Binary::Sub => {
                            acc!(*a, reduce_to(&g, sa));
                            acc!(*b, reduce_to(&g.map(|v| -v), sb));
                        }
                        Binary::Mul => {
                            let out = g.shape();
                            acc!(*a, reduce_to(&apply_binary(Binary::Mul, &g, y, out), sa));
                            acc!(*b, reduce_to(&apply_binary(Binary::Mul, &g, x, out), sb));
                        }
                        Binary::Div => {
                            let out = g.shape();
                            acc!(*a, reduce_to(&apply_binary(Binary::Div, &g, y, out), sa));
                            // d(x/y)/dy = -x/y² = -(x/y)/y
                            let q = &node.value;
                            let t = apply_binary(Binary::Mul, &g, q, out);
                            let t = apply_binary(Binary::Div, &t, y, out).map(|v| -v);
                            acc!(*b, reduce_to(&t, sb));
                        }
                    }
                }
                Op::Scale(a, c) => acc!(*a, g.map(|v| v * c)),
                Op::AddScalar(a) => acc!(*a, g.clone()),
                Op::Relu(a) => {
                    let x = val(*a);
                    acc!(*a, g.zip_map(x, |gv, xv| if xv > 0.0 { gv } else { 0.0 }).unwrap());
                }
                Op::LeakyRelu(a, slope) => {
                    let x = val(*a);
                    acc!(
                        *a,
                        g.zip_map(x, |gv, xv| if xv >= 0.0 { gv } else { slope * gv }).unwrap()
                    );
                }
                Op::Exp(a) => acc!(*a, g.zip_map(&node.value, |gv, y| gv * y).unwrap()),
                Op::LogClamped(a, floor) => {
                    let x = val(*a);
                    acc!(
                        *a,
                        g.zip_map(x, |gv, xv| if xv > *floor { gv / xv } else { 0.0 }).unwrap()
                    );
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut out = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, yv), gv) in out.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o = yv * (gv - dot);
                        }
                    }
                    acc!(*a, out);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &node.value;
                    let mut out = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let gs: f64 = g.row(r).iter().sum();
                        for ((o, yv), gv) in out.row_mut(r).iter_mut().zip(y.row(r)).zip(g.row(r)) {
                            *o = gv - yv.exp() * gs;
                        }
                    }
                    acc!(*a, out);
                }
                Op::L2NormalizeRows(a, eps) => {
                    let x = val(*a);
                    let y = &node.value;
                    let mut out = Tensor::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let n = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                        let (yr, gr) = (y.row(r), g.row(r));
                        if n > *eps {
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for ((o, yv), gv) in out.row_mut(r).iter_mut().zip(yr).zip(gr) {
                                *o = (gv - yv * dot) / n;
                            }
                        } else {
                            for (o, gv) in out.row_mut(r).iter_mut().zip(gr) {
                                *o = gv / eps;
                            }
                        }
                    }
                    acc!(*a, out);
                }
                Op::SumRows(a) => {
                    let [r, c] = val(*a).shape();
                    let mut out = Tensor::zeros(r, c);
                    for i in 0..r {
                        out.row_mut(i).copy_from_slice(g.row(0));
                    }
                    acc!(*a, out);
                }
                Op::SumCols(a) => {
                    let [r, c] = val(*a).shape();
                    let mut out = Tensor::zeros(r, c);
                    for i in 0..r {
                        out.row_mut(i).fill(g.data()[i]);
                    }
                    acc!(*a, out);
                }
                Op::Sum(a) => {
                    let [r, c] = val(*a).shape();
                    acc!(*a, Tensor::filled(r, c, g.item()));
                }
                Op::SelectRows(a, rows) => {
                    let [r, c] = val(*a).shape();
                    let mut out = Tensor::zeros(r, c);
                    for (i, &src) in rows.iter().enumerate() {
                        for (o, gv) in out.row_mut(src).iter_mut().zip(g.row(i)) {
                            *o += gv;
                        }
                    }
                    acc!(*a, out);
                }
                Op::Column(a, k) => {
                    let [r, c] = val(*a).shape();
                    let mut out = Tensor::zeros(r, c);
                    for i in 0..r {
                        out.data_mut()[i * c + k] = g.data()[i];
                    }
                    acc!(*a, out);
                }
                Op::NllMean { logp, rows, targets } => {
                    let [r, c] = val(*logp).shape();
                    let mut out = Tensor::zeros(r, c);
                    let w = g.item() / rows.len() as f64;
                    for (&row, &t) in rows.iter().zip(targets) {
                        out.data_mut()[row * c + t] -= w;
                    }
                    acc!(*logp, out);
                }
                Op::NeighborMean(x, graph) => {
                    let d = val(*x).cols();
                    let mut out = Tensor::zeros(graph.num_nodes(), d);
                    for u in 0..graph.num_nodes() {
                        let deg = graph.degree(u);
                        if deg == 0 {
                            continue;
                        }
                        let inv = 1.0 / deg as f64;
                        for &v in graph.neighbors(u) {
                            let gu = g.row(u);
                            for (o, gv) in out.row_mut(v).iter_mut().zip(gu) {
                                *o += gv * inv;
                            }
                        }
                    }
                    acc!(*x, out);
                }
                Op::EdgeScores(a, b, graph) => {
                    let n = graph.num_nodes();
                    let (mut ga, mut gb) = (vec![0.0; n], vec![0.0; n]);
                    for u in 0..n {
                        for e in graph.slot_range(u) {
                            ga[u] += g.data()[e];
                            gb[graph.slot_target(e)] += g.data()[e];
                        }
                    }
                    acc!(*a, Tensor::from_raw(n, 1, ga));
                    acc!(*b, Tensor::from_raw(n, 1, gb));
                }
                Op::SegmentNormalize(s, graph, mode) => {
                    let x = val(*s);
                    let w = &node.value;
                    let mut out = vec![0.0; x.len()];
                    for u in 0..graph.num_nodes() {
                        let r = graph.slot_range(u);
                        if r.is_empty() {
                            continue;
                        }
                        match mode {
                            SegmentNorm::Literal => {
                                let d = signed_guard(x.data()[r.clone()].iter().sum());
                                let gw: f64 = r.clone().map(|e| g.data()[e] * w.data()[e]).sum();
                                for e in r {
                                    out[e] = (g.data()[e] - gw) / d;
                                }
                            }
                            SegmentNorm::Softmax => {
                                let gw: f64 = r.clone().map(|e| g.data()[e] * w.data()[e]).sum();
                                for e in r {
                                    out[e] = w.data()[e] * (g.data()[e] - gw);
                                }
                            }
                        }
                    }
                    acc!(*s, Tensor::from_raw(x.len(), 1, out));
                }
                Op::EdgeAggregate(w, x, graph) => {
                    let (wt, xt) = (val(*w), val(*x));
                    let mut gw = vec![0.0; wt.len()];
                    let mut gx = Tensor::zeros(xt.rows(), xt.cols());
                    for u in 0..graph.num_nodes() {
                        let gu = g.row(u);
                        for e in graph.slot_range(u) {
                            let v = graph.slot_target(e);
                            gw[e] = gu.iter().zip(xt.row(v)).map(|(a, b)| a * b).sum();
                            let we = wt.data()[e];
                            for (o, gv) in gx.row_mut(v).iter_mut().zip(gu) {
                                *o += we * gv;
                            }
                        }
                    }
                    acc!(*w, Tensor::from_raw(wt.len(), 1, gw));
                    acc!(*x, gx);
                }
            }
            grads[i] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(t.data()) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(t),
    }
}

pub(crate) fn neighbor_mean(x: &Tensor, graph: &Graph) -> Tensor {
    let d = x.cols();
    let mut out = Tensor::zeros(graph.num_nodes(), d);
    for u in 0..graph.num_nodes() {
        let deg = graph.degree(u);
        if deg == 0 {
            continue;
        }
        let row = out.row_mut(u);
        for &v in graph.neighbors(u) {
            for (o, xv) in row.iter_mut().zip(x.row(v)) {
                *o += xv;
            }
        }
        let inv = 1.0 / deg as f64;
        for o in row.iter_mut() {
            *o *= inv;
        }
    }
    out
}
