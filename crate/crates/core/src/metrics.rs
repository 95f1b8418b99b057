use serde::{Deserialize, Serialize};

use crate::data::{Label, Task};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMetric {
    Accuracy,
    RocAuc,
    Rmse,
}

impl EvalMetric {
    /// Accuracy for classification, ROC-AUC for binary, RMSE for regression.
    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Classification => EvalMetric::Accuracy,
            Task::Binary => EvalMetric::RocAuc,
            Task::Regression => EvalMetric::Rmse,
        }
    }

    pub fn higher_is_better(self) -> bool {
        !matches!(self, EvalMetric::Rmse)
    }

    /// Whether `a` is strictly better than `b`.
    pub fn better(self, a: f64, b: f64) -> bool {
        if self.higher_is_better() {
            a > b
        } else {
            a < b
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EvalMetric::Accuracy => "accuracy",
            EvalMetric::RocAuc => "roc-auc",
            EvalMetric::Rmse => "rmse",
        }
    }

    /// Metric of model outputs on the labeled `rows`.
    pub fn compute(self, outputs: &Tensor, labels: &[Label], rows: &[usize]) -> Result<f64> {
        if rows.is_empty() {
            return Err(Error::Usage("metric over an empty index set".into()));
        }
        match self {
            EvalMetric::Accuracy => {
                let mut correct = 0usize;
                for &r in rows {
                    let y = class_of(labels, r)?;
                    if argmax(outputs.row(r)) == y {
                        correct += 1;
                    }
                }
                Ok(correct as f64 / rows.len() as f64)
            }
            EvalMetric::RocAuc => {
                if outputs.cols() != 2 {
                    return Err(Error::config(format!(
                        "ROC-AUC needs 2 outputs, got {}",
                        outputs.cols()
                    )));
                }
                let probs = crate::autodiff::softmax_rows(outputs);
                let scores: Vec<f64> = rows.iter().map(|&r| probs.get(r, 1)).collect();
                let positive = rows
                    .iter()
                    .map(|&r| class_of(labels, r).map(|c| c == 1))
                    .collect::<Result<Vec<_>>>()?;
                roc_auc(&scores, &positive)
            }
            EvalMetric::Rmse => {
                let mut pred = Vec::with_capacity(rows.len());
                let mut target = Vec::with_capacity(rows.len());
                for &r in rows {
                    let v = match labels.get(r) {
                        Some(Label::Value(v)) => *v,
                        _ => return Err(Error::Usage(format!("row {r} has no real target"))),
                    };
                    pred.push(outputs.get(r, 0));
                    target.push(v);
                }
                rmse(&pred, &target)
            }
        }
    }
}

fn class_of(labels: &[Label], r: usize) -> Result<usize> {
    labels
        .get(r)
        .and_then(|l| l.class())
        .ok_or_else(|| Error::Usage(format!("row {r} has no class label")))
}

/// Index of the first maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.len() != truth.len() || truth.is_empty() {
        return Err(Error::Usage("accuracy needs equal-length nonempty inputs".into()));
    }
    let hits = predicted.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Rank-based area under the ROC curve; tied scores share their average rank.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::Usage("scores and labels differ in length".into()));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Usage(
            "ROC-AUC needs both positive and negative instances".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share their mean.
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    let pos_rank_sum: f64 = ranks.iter().zip(positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    let (np, nn) = (n_pos as f64, n_neg as f64);
    Ok((pos_rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

pub fn rmse(predicted: &[f64], target: &[f64]) -> Result<f64> {
    if predicted.len() != target.len() || target.is_empty() {
        return Err(Error::Usage("RMSE needs equal-length nonempty inputs".into()));
    }
    let mse = predicted
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / target.len() as f64;
    Ok(mse.sqrt())
}
