//! Tab-separated file sets and benchmark manifests.
//!
//! A file set is four line-aligned files: `features.tsv` (D reals per line),
//! `labels.tsv` (integer class, real target or `NA`), `domains.tsv`
//! (nonnegative integer) and an optional `edges.tsv` (`u<TAB>v`, zero-based).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, Label, Task};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetPaths {
    pub features: PathBuf,
    pub labels: PathBuf,
    pub edges: Option<PathBuf>,
    pub domains: PathBuf,
}

impl DatasetPaths {
    /// The conventional file names inside `dir`.
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        Self {
            features: dir.join("features.tsv"),
            labels: dir.join("labels.tsv"),
            edges: Some(dir.join("edges.tsv")),
            domains: dir.join("domains.tsv"),
        }
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn load_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Load {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Non-empty lines with their 1-based line numbers.
fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty())
}

fn parse_features(path: &Path) -> Result<Tensor> {
    let text = read(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (no, line) in lines(&text) {
        let row = line
            .split('\t')
            .map(|tok| {
                tok.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| load_err(path, no, format!("not a finite number: `{tok}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(load_err(
                    path,
                    no,
                    format!("expected {} columns, found {}", first.len(), row.len()),
                ));
            }
        }
        rows.push(row);
    }
    Tensor::from_rows(&rows)
}

/// Loads a features file alone.
pub fn load_features(path: &Path) -> Result<Tensor> {
    parse_features(path)
}

fn parse_labels(path: &Path, task: Task) -> Result<Vec<Label>> {
    let text = read(path)?;
    lines(&text)
        .map(|(no, line)| {
            let tok = line.trim();
            if tok == "NA" {
                return Ok(Label::Missing);
            }
            match task {
                Task::Regression => tok
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .map(Label::Value)
                    .ok_or_else(|| load_err(path, no, format!("not a real target: `{tok}`"))),
                Task::Classification | Task::Binary => tok
                    .parse::<usize>()
                    .map(Label::Class)
                    .map_err(|_| load_err(path, no, format!("not a class index: `{tok}`"))),
            }
        })
        .collect()
}

fn parse_domains(path: &Path) -> Result<Vec<u32>> {
    let text = read(path)?;
    lines(&text)
        .map(|(no, line)| {
            line.trim()
                .parse::<u32>()
                .map_err(|_| load_err(path, no, format!("not a domain id: `{}`", line.trim())))
        })
        .collect()
}

fn parse_edges(path: &Path, n: usize) -> Result<Vec<(usize, usize)>> {
    let text = read(path)?;
    lines(&text)
        .map(|(no, line)| {
            let mut parts = line.split('\t');
            let mut next = || -> Result<usize> {
                let tok = parts
                    .next()
                    .ok_or_else(|| load_err(path, no, "expected `u<TAB>v`"))?
                    .trim();
                let idx = tok
                    .parse::<usize>()
                    .map_err(|_| load_err(path, no, format!("not a node index: `{tok}`")))?;
                if idx >= n {
                    return Err(load_err(path, no, format!("node {idx} out of range for {n} nodes")));
                }
                Ok(idx)
            };
            let (u, v) = (next()?, next()?);
            if parts.next().is_some() {
                return Err(load_err(path, no, "expected exactly two columns"));
            }
            Ok((u, v))
        })
        .collect()
}

/// Loads a file set. Without an edges file the graph has no edges.
pub fn load_dataset(paths: &DatasetPaths, task: Task) -> Result<(Dataset, Graph)> {
    let features = parse_features(&paths.features)?;
    let n = features.rows();
    let labels = parse_labels(&paths.labels, task)?;
    if labels.len() != n {
        return Err(load_err(
            &paths.labels,
            labels.len(),
            format!("{} labels for {n} feature rows", labels.len()),
        ));
    }
    let domains = parse_domains(&paths.domains)?;
    if domains.len() != n {
        return Err(load_err(
            &paths.domains,
            domains.len(),
            format!("{} domain ids for {n} feature rows", domains.len()),
        ));
    }
    let num_classes = labels
        .iter()
        .filter_map(|l| l.class())
        .max()
        .map_or(1, |c| c + 1)
        .max(2);
    let graph = match &paths.edges {
        Some(p) if p.exists() => Graph::from_edges(n, parse_edges(p, n)?)?,
        _ => Graph::empty(n),
    };
    Ok((Dataset::new(features, labels, domains, task, num_classes)?, graph))
}

fn write_file(path: &Path, content: String) -> Result<()> {
    fs::write(path, content).map_err(|e| Error::io(path, e))
}

fn fmt_real(v: f64) -> String {
    // Shortest round-trip representation.
    format!("{v:?}")
}

/// Writes `edges.tsv` with one line per undirected edge (`u < v`).
pub fn write_edges(path: &Path, graph: &Graph) -> Result<()> {
    let mut s = String::new();
    for (u, v) in graph.edges() {
        s.push_str(&format!("{u}\t{v}\n"));
    }
    write_file(path, s)
}

/// Writes a complete file set into `dir`, creating it if needed.
pub fn write_dataset(dir: &Path, dataset: &Dataset, graph: &Graph) -> Result<DatasetPaths> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = DatasetPaths::in_dir(dir);
    let x = dataset.features();
    let mut s = String::new();
    for r in 0..x.rows() {
        let row: Vec<String> = x.row(r).iter().map(|&v| fmt_real(v)).collect();
        s.push_str(&row.join("\t"));
        s.push('\n');
    }
    write_file(&paths.features, s)?;
    let labels: String = dataset
        .labels()
        .iter()
        .map(|l| match l {
            Label::Class(c) => format!("{c}\n"),
            Label::Value(v) => format!("{}\n", fmt_real(*v)),
            Label::Missing => "NA\n".to_string(),
        })
        .collect();
    write_file(&paths.labels, labels)?;
    let domains: String = dataset.domains().iter().map(|d| format!("{d}\n")).collect();
    write_file(&paths.domains, domains)?;
    write_edges(paths.edges.as_ref().expect("in_dir sets edges"), graph)?;
    Ok(paths)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestDomain {
    pub id: u32,
    /// Directory of the domain's file set, relative to the manifest.
    pub dir: String,
    pub k: usize,
    pub metric: String,
    pub theta_degrees: Option<f64>,
}

/// Index of a multi-domain benchmark written by the generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub preset: String,
    pub seed: u64,
    pub task: Task,
    pub num_classes: usize,
    pub domains: Vec<ManifestDomain>,
    pub train_domains: Vec<u32>,
    pub test_domains: Vec<u32>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = read(path)?;
        serde_json::from_str(&text).map_err(|e| load_err(path, e.line(), e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        write_file(path, text)
    }
}

/// Loads every domain listed in a manifest as one disjoint-union dataset.
pub fn load_manifest(path: &Path) -> Result<(Manifest, Dataset, Graph)> {
    let manifest = Manifest::read(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut acc: Option<(Dataset, Graph)> = None;
    for d in &manifest.domains {
        let (ds, g) = load_dataset(&DatasetPaths::in_dir(base.join(&d.dir)), manifest.task)?;
        acc = Some(match acc {
            None => (ds, g),
            Some((a, ag)) => (a.concat(&ds)?, ag.disjoint_union(&g)),
        });
    }
    let (mut ds, g) = acc.ok_or_else(|| Error::config("manifest lists no domains"))?;
    if manifest.task != Task::Regression {
        ds.num_classes = manifest.num_classes;
    }
    Ok((manifest, ds, g))
}
