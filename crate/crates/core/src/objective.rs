//! Supervised loss plus KL regularization of the gates toward a prior, and
//! exact enumeration of the deconfounded likelihood on tiny models.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{Label, Task};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::layers::PROB_FLOOR;
use crate::model::{BranchMode, ForwardOptions, Model};
use crate::tensor::Tensor;

/// Largest number of branch assignments the enumeration oracles will visit.
pub const ENUMERATION_LIMIT: u128 = 4096;

/// Per-layer categorical prior over the `K` hypotheses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorEstimate {
    pub layers: Vec<Vec<f64>>,
}

impl PriorEstimate {
    pub fn uniform(layers: usize, k: usize) -> Self {
        Self {
            layers: vec![vec![1.0 / k as f64; k]; layers],
        }
    }

    /// Each layer's distribution must sum to 1.
    pub fn new(layers: Vec<Vec<f64>>) -> Result<Self> {
        for (l, p) in layers.iter().enumerate() {
            let s: f64 = p.iter().sum();
            if p.is_empty() || p.iter().any(|v| !(*v >= 0.0)) || (s - 1.0).abs() > 1e-9 {
                return Err(Error::config(format!("layer {l} prior {p:?} is not a distribution")));
            }
        }
        Ok(Self { layers })
    }

    /// Row means of per-layer `T×K` probability tables.
    fn from_row_means(tables: &[Tensor]) -> Result<Self> {
        let layers = tables
            .iter()
            .map(|t| {
                if t.rows() == 0 {
                    return Err(Error::config("prior from an empty set of posteriors"));
                }
                let n = t.rows() as f64;
                Ok(t.column_sums().data().iter().map(|s| s / n).collect())
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }
}

/// Mean of the gate probabilities computed on pseudo instances, per layer.
pub fn mixture_prior(pseudo_gate_probs: &[Tensor]) -> Result<PriorEstimate> {
    PriorEstimate::from_row_means(pseudo_gate_probs)
}

/// Mean of the gate probabilities of real instances, per layer.
pub fn posterior_average_prior(gate_probs: &[Tensor]) -> Result<PriorEstimate> {
    PriorEstimate::from_row_means(gate_probs)
}

/// `Σ_k q_k ln(q_k / p_k)` with `0 ln 0 = 0` and `p` floored at `1e-12`.
pub fn categorical_kl(q: &[f64], p: &[f64]) -> Result<f64> {
    if q.len() != p.len() || q.is_empty() {
        return Err(Error::dim(format!(
            "KL between distributions of sizes {} and {}",
            q.len(),
            p.len()
        )));
    }
    Ok(q.iter()
        .zip(p)
        .filter(|(&qk, _)| qk > 0.0)
        .map(|(&qk, &pk)| qk * (qk.max(PROB_FLOOR).ln() - pk.max(PROB_FLOOR).ln()))
        .sum())
}

/// Labeled rows split into class targets (classification) or real targets.
fn targets(labels: &[Label], rows: &[usize], task: Task) -> Result<(Vec<usize>, Vec<f64>)> {
    if rows.is_empty() {
        return Err(Error::config("supervised loss over an empty index set"));
    }
    let mut classes = Vec::new();
    let mut values = Vec::new();
    for &r in rows {
        match (task, labels.get(r).copied()) {
            (Task::Regression, Some(Label::Value(v))) => values.push(v),
            (Task::Classification | Task::Binary, Some(Label::Class(c))) => classes.push(c),
            (_, other) => {
                return Err(Error::config(format!(
                    "row {r} has label {other:?}, unusable for {task:?}"
                )))
            }
        }
    }
    Ok((classes, values))
}

/// Mean cross-entropy (classification, binary) or mean squared error
/// (regression, first output column) over `rows`.
pub fn supervised_loss_var(tape: &Tape, logits: Var, labels: &[Label], rows: &[usize], task: Task) -> Result<Var> {
    let (classes, values) = targets(labels, rows, task)?;
    let cols = tape.shape(logits)[1];
    match task {
        Task::Classification | Task::Binary => {
            if let Some(c) = classes.iter().find(|&&c| c >= cols) {
                return Err(Error::config(format!("class {c} but only {cols} outputs")));
            }
            let logp = tape.log_softmax_rows(logits);
            Ok(tape.nll_mean(logp, rows, &classes))
        }
        Task::Regression => {
            if cols != 1 {
                return Err(Error::config(format!("regression with {cols} outputs")));
            }
            let pred = tape.select_rows(logits, rows);
            let y = tape.constant(Tensor::column_vector(&values)?);
            let diff = tape.sub(pred, y);
            let sq = tape.mul(diff, diff);
            Ok(tape.mean(sq))
        }
    }
}

pub fn supervised_loss(predictions: &Tensor, labels: &[Label], rows: &[usize], task: Task) -> Result<f64> {
    let tape = Tape::new();
    let p = tape.constant(predictions.clone());
    let v = supervised_loss_var(&tape, p, labels, rows, task)?;
    Ok(tape.item(v))
}

/// Per-layer prior as the row mean of gate probabilities, on the tape.
pub fn mean_gate_var(tape: &Tape, gates: &[Var]) -> Vec<Var> {
    gates.iter().map(|&g| tape.mean_rows(g)).collect()
}

/// Mean over `rows` of `KL(π_u ‖ p0)` for an `N×K` gate table and `1×K` prior.
pub fn mean_kl_var(tape: &Tape, pi: Var, rows: &[usize], p0: Var) -> Var {
    let q = tape.select_rows(pi, rows);
    let log_q = tape.log_clamped(q, PROB_FLOOR);
    let log_p = tape.log_clamped(p0, PROB_FLOOR);
    let ratio = tape.sub(log_q, log_p);
    let terms = tape.mul(q, ratio);
    let total = tape.sum(terms);
    tape.scale(total, 1.0 / rows.len() as f64)
}

#[derive(Clone, Debug)]
pub struct ObjectiveVars {
    pub total: Var,
    pub supervised: Var,
    pub kl: Vec<Var>,
}

/// Supervised loss plus `λ` times the per-layer KL terms. With `λ = 0` the KL
/// terms are still recorded but left out of the total.
#[allow(clippy::too_many_arguments)]
pub fn objective_var(
    tape: &Tape,
    logits: Var,
    gates: &[Var],
    prior: &[Var],
    labels: &[Label],
    rows: &[usize],
    task: Task,
    lambda: f64,
) -> Result<ObjectiveVars> {
    if gates.len() != prior.len() {
        return Err(Error::config(format!(
            "{} gate layers but {} prior layers",
            gates.len(),
            prior.len()
        )));
    }
    let supervised = supervised_loss_var(tape, logits, labels, rows, task)?;
    let kl: Vec<Var> = gates
        .iter()
        .zip(prior)
        .map(|(&g, &p)| mean_kl_var(tape, g, rows, p))
        .collect();
    let total = if lambda == 0.0 || kl.is_empty() {
        supervised
    } else {
        let mut sum = kl[0];
        for &k in &kl[1..] {
            sum = tape.add(sum, k);
        }
        let reg = tape.scale(sum, lambda);
        tape.add(supervised, reg)
    };
    Ok(ObjectiveVars { total, supervised, kl })
}

/// Values of the objective's components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveReport {
    pub supervised: f64,
    pub kl: Vec<f64>,
    pub lambda: f64,
    pub total: f64,
}

impl ObjectiveReport {
    pub fn read(tape: &Tape, vars: &ObjectiveVars, lambda: f64) -> Self {
        Self {
            supervised: tape.item(vars.supervised),
            kl: vars.kl.iter().map(|&k| tape.item(k)).collect(),
            lambda,
            total: tape.item(vars.total),
        }
    }
}

/// Objective from fixed predictions and per-layer gate probabilities.
pub fn total_objective(
    predictions: &Tensor,
    labels: &[Label],
    rows: &[usize],
    gate_probs: &[Tensor],
    prior: &PriorEstimate,
    lambda: f64,
    task: Task,
) -> Result<ObjectiveReport> {
    if gate_probs.len() != prior.layers.len() {
        return Err(Error::config(format!(
            "{} gate layers but {} prior layers",
            gate_probs.len(),
            prior.layers.len()
        )));
    }
    let tape = Tape::new();
    let logits = tape.constant(predictions.clone());
    let gates: Vec<Var> = gate_probs.iter().map(|g| tape.constant(g.clone())).collect();
    let priors = prior
        .layers
        .iter()
        .map(|p| Ok(tape.constant(Tensor::row_vector(p)?)))
        .collect::<Result<Vec<_>>>()?;
    let vars = objective_var(&tape, logits, &gates, &priors, labels, rows, task, lambda)?;
    Ok(ObjectiveReport::read(&tape, &vars, lambda))
}

/// Every assignment of one branch per layer, in lexicographic order.
pub fn assignments(layers: usize, k: usize) -> Result<Vec<Vec<usize>>> {
    let count = (k as u128).checked_pow(layers as u32).unwrap_or(u128::MAX);
    if count > ENUMERATION_LIMIT {
        return Err(Error::EnumerationTooLarge {
            assignments: count,
            limit: ENUMERATION_LIMIT,
        });
    }
    let mut out = Vec::with_capacity(count as usize);
    let mut cur = vec![0usize; layers];
    for _ in 0..count {
        out.push(cur.clone());
        for slot in cur.iter_mut().rev() {
            *slot += 1;
            if *slot < k {
                break;
            }
            *slot = 0;
        }
    }
    Ok(out)
}

/// `Σ_labeled ln softmax(f(x; a))[y]` with every layer fixed to branch `a_l`.
pub fn assignment_loglik(
    model: &Model,
    x: &Tensor,
    labels: &[Label],
    graph: &Graph,
    assignment: &[usize],
) -> Result<f64> {
    let opts = ForwardOptions {
        branch: BranchMode::Fixed(assignment.to_vec()),
        ..ForwardOptions::eval()
    };
    let (logits, _) = model.run(x, graph, &opts)?;
    let lp = crate::autodiff::log_softmax_rows(&logits);
    let mut total = 0.0;
    let mut any = false;
    for (u, l) in labels.iter().enumerate() {
        match l {
            Label::Class(c) => {
                total += lp.get(u, *c);
                any = true;
            }
            Label::Missing => {}
            Label::Value(_) => return Err(Error::config("enumeration oracles need class labels")),
        }
    }
    if !any {
        return Err(Error::config("enumeration oracles need at least one label"));
    }
    Ok(total)
}

fn check_prior(model: &Model, p: &PriorEstimate, what: &str) -> Result<()> {
    let (l, k) = (model.config.layers, model.config.hypotheses);
    if p.layers.len() != l || p.layers.iter().any(|v| v.len() != k) {
        return Err(Error::config(format!("{what} must have {l} layers of {k} entries")));
    }
    Ok(())
}

fn log_prior(p: &PriorEstimate, a: &[usize]) -> f64 {
    a.iter()
        .enumerate()
        .map(|(l, &k)| p.layers[l][k].max(PROB_FLOOR).ln())
        .sum()
}

/// `ln Σ_a p0(a) p(y | x, a)` over all branch assignments shared by the nodes.
pub fn exact_deconfounded_loglik(
    model: &Model,
    x: &Tensor,
    labels: &[Label],
    graph: &Graph,
    p0: &PriorEstimate,
) -> Result<f64> {
    check_prior(model, p0, "prior")?;
    let terms = assignments(model.config.layers, model.config.hypotheses)?
        .iter()
        .map(|a| Ok(log_prior(p0, a) + assignment_loglik(model, x, labels, graph, a)?))
        .collect::<Result<Vec<f64>>>()?;
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln())
}

/// `E_{a∼q}[ln p(y | x, a) + ln p0(a) − ln q(a)]` computed exactly.
pub fn reweighted_elbo(
    model: &Model,
    x: &Tensor,
    labels: &[Label],
    graph: &Graph,
    q: &PriorEstimate,
    p0: &PriorEstimate,
) -> Result<f64> {
    check_prior(model, p0, "prior")?;
    check_prior(model, q, "posterior")?;
    let mut total = 0.0;
    for a in assignments(model.config.layers, model.config.hypotheses)? {
        let weight: f64 = a.iter().enumerate().map(|(l, &k)| q.layers[l][k]).product();
        if weight == 0.0 {
            continue;
        }
        let ll = assignment_loglik(model, x, labels, graph, &a)?;
        total += weight * (ll + log_prior(p0, &a) - log_prior(q, &a));
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::LayerKind;
    use crate::model::ModelConfig;

    #[test]
    fn kl_examples() {
        assert_eq!(categorical_kl(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert!((categorical_kl(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - 2f64.ln()).abs() < 1e-15);
        // 0.25 ln 0.5 + 0.75 ln 1.5
        let want = 0.25 * 0.5f64.ln() + 0.75 * 1.5f64.ln();
        let got = categorical_kl(&[0.25, 0.75], &[0.5, 0.5]).unwrap();
        assert!((got - want).abs() < 1e-15);
        assert!((got - 0.130812).abs() < 1e-6);
    }

    #[test]
    fn prior_examples() {
        let p = mixture_prior(&[Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap()]).unwrap();
        assert_eq!(p.layers, vec![vec![0.5, 0.5]]);
        let single = Tensor::row_vector(&[0.2, 0.8]).unwrap();
        assert_eq!(posterior_average_prior(&[single]).unwrap().layers, vec![vec![0.2, 0.8]]);
    }

    #[test]
    fn supervised_examples() {
        let labels = [Label::Class(0), Label::Class(2), Label::Missing];
        let uniform = Tensor::zeros(3, 3);
        let l = supervised_loss(&uniform, &labels, &[0, 1], Task::Classification).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-15);
        let confident = Tensor::from_rows(&[vec![800.0, 0.0, 0.0], vec![0.0, 0.0, 800.0], vec![0.0; 3]]).unwrap();
        assert_eq!(
            supervised_loss(&confident, &labels, &[0, 1], Task::Classification).unwrap(),
            0.0
        );
        let reg = [Label::Value(1.5), Label::Value(-2.0)];
        let pred = Tensor::column_vector(&[1.5, -2.0]).unwrap();
        assert_eq!(supervised_loss(&pred, &reg, &[0, 1], Task::Regression).unwrap(), 0.0);
        assert!(supervised_loss(&pred, &labels, &[2], Task::Classification).is_err());
    }

    #[test]
    fn total_matches_hand_sum() {
        let labels = [Label::Class(1), Label::Class(0)];
        let preds = Tensor::from_rows(&[vec![0.0, 1.0], vec![2.0, -1.0]]).unwrap();
        let g0 = Tensor::from_rows(&[vec![0.9, 0.1], vec![0.4, 0.6]]).unwrap();
        let g1 = Tensor::from_rows(&[vec![0.5, 0.5], vec![0.2, 0.8]]).unwrap();
        let prior = PriorEstimate::new(vec![vec![0.7, 0.3], vec![0.5, 0.5]]).unwrap();
        let r = total_objective(
            &preds,
            &labels,
            &[0, 1],
            &[g0.clone(), g1.clone()],
            &prior,
            0.5,
            Task::Classification,
        )
        .unwrap();
        let ce = |row: [f64; 2], y: usize| {
            let lse = (row[0].exp() + row[1].exp()).ln();
            lse - row[y]
        };
        let sup = 0.5 * (ce([0.0, 1.0], 1) + ce([2.0, -1.0], 0));
        let kl = |g: &Tensor, p: &[f64]| (0..2).map(|r| categorical_kl(g.row(r), p).unwrap()).sum::<f64>() / 2.0;
        let k0 = kl(&g0, &prior.layers[0]);
        let k1 = kl(&g1, &prior.layers[1]);
        assert!((r.supervised - sup).abs() < 1e-14);
        assert!((r.kl[0] - k0).abs() < 1e-14 && (r.kl[1] - k1).abs() < 1e-14);
        assert!((r.total - (sup + 0.5 * (k0 + k1))).abs() < 1e-14);
        let zero = total_objective(&preds, &labels, &[0, 1], &[g0, g1], &prior, 0.0, Task::Classification).unwrap();
        assert_eq!(zero.total, zero.supervised);
        assert!(zero.kl[0] > 0.0);
    }

    #[test]
    fn enumeration_limits_and_order() {
        assert_eq!(
            assignments(2, 2).unwrap(),
            vec![vec![0, 0], vec![0, 1], vec![1, 0], vec![1, 1]]
        );
        assert_eq!(assignments(0, 3).unwrap(), vec![Vec::<usize>::new()]);
        assert!(matches!(assignments(13, 2), Err(Error::EnumerationTooLarge { .. })));
    }

    #[test]
    fn two_branch_enumeration_by_hand() {
        let mut cfg = ModelConfig::new(LayerKind::Gcn, 2, 3, 2);
        cfg.layers = 1;
        cfg.hypotheses = 2;
        let m = Model::new(cfg, 4).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, 0.5], vec![-0.3, 0.8], vec![0.2, -1.0]]).unwrap();
        let g = Graph::from_edges(3, [(0, 1), (1, 2)]).unwrap();
        let labels = [Label::Class(1), Label::Missing, Label::Class(0)];
        let p0 = PriorEstimate::uniform(1, 2);
        let l1 = assignment_loglik(&m, &x, &labels, &g, &[0]).unwrap();
        let l2 = assignment_loglik(&m, &x, &labels, &g, &[1]).unwrap();
        let want = (0.5 * l1.exp() + 0.5 * l2.exp()).ln();
        let exact = exact_deconfounded_loglik(&m, &x, &labels, &g, &p0).unwrap();
        assert!((exact - want).abs() < 1e-13);
        let elbo = reweighted_elbo(&m, &x, &labels, &g, &p0, &p0).unwrap();
        assert!((elbo - 0.5 * (l1 + l2)).abs() < 1e-13);
        assert!(elbo <= exact + 1e-12);
    }
}
