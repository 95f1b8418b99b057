//! Datasets over interdependent instances and the machinery that builds them.

mod io;
mod knn;
mod pseudo;
mod split;
mod synth;

use serde::{Deserialize, Serialize};

pub use io::{
    load_dataset, load_features, load_manifest, write_dataset, write_edges, DatasetPaths, Manifest, ManifestDomain,
};
pub use knn::{build_knn_graph, KnnSpec, Metric};
pub use pseudo::{make_pseudo_dataset, PseudoConfig, PseudoDataset, P_EDGE_FLOOR};
pub use split::{split_by_domain, Split};
pub use synth::{generate_shift_benchmark, write_benchmark, DomainData, Preset, ShiftBenchmark, ShiftConfig};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Classification,
    Binary,
    Regression,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classification" => Ok(Task::Classification),
            "binary" => Ok(Task::Binary),
            "regression" => Ok(Task::Regression),
            other => Err(Error::config(format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Label {
    Class(usize),
    Value(f64),
    Missing,
}

impl Label {
    pub fn is_labeled(self) -> bool {
        !matches!(self, Label::Missing)
    }

    pub fn class(self) -> Option<usize> {
        match self {
            Label::Class(c) => Some(c),
            _ => None,
        }
    }

    pub fn value(self) -> Option<f64> {
        match self {
            Label::Value(v) => Some(v),
            Label::Class(c) => Some(c as f64),
            Label::Missing => None,
        }
    }
}

/// Features, partial labels and domain ids for `N` instances.
#[derive(Clone, Debug)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<Label>,
    domains: Vec<u32>,
    task: Task,
    num_classes: usize,
}

impl Dataset {
    /// `num_classes` is forced to 2 for binary and 1 for regression tasks.
    pub fn new(
        features: Tensor,
        labels: Vec<Label>,
        domains: Vec<u32>,
        task: Task,
        num_classes: usize,
    ) -> Result<Self> {
        let n = features.rows();
        if labels.len() != n || domains.len() != n {
            return Err(Error::dim(format!(
                "{n} feature rows, {} labels, {} domain ids",
                labels.len(),
                domains.len()
            )));
        }
        let num_classes = match task {
            Task::Binary => 2,
            Task::Regression => 1,
            Task::Classification => num_classes,
        };
        for (u, l) in labels.iter().enumerate() {
            match (task, l) {
                (_, Label::Missing) => {}
                (Task::Regression, Label::Value(_)) => {}
                (Task::Classification | Task::Binary, Label::Class(c)) if *c < num_classes => {}
                _ => {
                    return Err(Error::config(format!(
                        "label {l:?} of instance {u} invalid for {task:?} with {num_classes} classes"
                    )))
                }
            }
        }
        Ok(Self {
            features,
            labels,
            domains,
            task,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn domains(&self) -> &[u32] {
        &self.domains
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Width of the model output for this task.
    pub fn output_dim(&self) -> usize {
        self.num_classes
    }

    pub fn labeled_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&u| self.labels[u].is_labeled()).collect()
    }

    /// Sorted distinct domain ids.
    pub fn domain_ids(&self) -> Vec<u32> {
        let mut ids = self.domains.clone();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Restriction to `nodes` (in the given order).
    pub fn subset(&self, nodes: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(nodes),
            labels: nodes.iter().map(|&u| self.labels[u]).collect(),
            domains: nodes.iter().map(|&u| self.domains[u]).collect(),
            task: self.task,
            num_classes: self.num_classes,
        }
    }

    /// Concatenation; instances of `other` follow those of `self`.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.feature_dim() != other.feature_dim() || self.task != other.task {
            return Err(Error::dim("concatenating incompatible datasets"));
        }
        let mut data = self.features.data().to_vec();
        data.extend_from_slice(other.features.data());
        Dataset::new(
            Tensor::new(self.len() + other.len(), self.feature_dim(), data)?,
            [self.labels.clone(), other.labels.clone()].concat(),
            [self.domains.clone(), other.domains.clone()].concat(),
            self.task,
            self.num_classes.max(other.num_classes),
        )
    }
}
