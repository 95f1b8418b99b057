//! Synthetic multi-domain benchmark whose domains share instances but differ
//! in how the graph is built.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use std::path::Path;

use super::io::{write_dataset, Manifest, ManifestDomain};
use super::knn::{build_knn_graph, KnnSpec};
use super::{Dataset, Label, Task};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    KnnShift,
    AngleShift,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::KnnShift => "knn-shift",
            Preset::AngleShift => "angle-shift",
        }
    }

    /// Graph constructions of the six domains.
    pub fn domain_specs(self) -> Vec<KnnSpec> {
        match self {
            Preset::KnnShift => [2, 3, 4, 8, 9, 10].map(KnnSpec::euclidean).to_vec(),
            Preset::AngleShift => [0.0, 30.0, 90.0, 150.0, 160.0, 170.0]
                .map(|t| KnnSpec::angle_biased(5, t))
                .to_vec(),
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "knn-shift" => Ok(Preset::KnnShift),
            "angle-shift" => Ok(Preset::AngleShift),
            other => Err(Error::Usage(format!(
                "unknown preset `{other}` (expected knn-shift or angle-shift)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftConfig {
    pub name: String,
    pub seed: u64,
    pub n: usize,
    pub dim: usize,
    pub classes: usize,
    /// Distance scale of the cluster centers.
    pub separation: f64,
    /// Standard deviation of each cluster.
    pub spread: f64,
    /// Weight of the neighborhood vote in the label of influenced instances.
    pub gamma: f64,
    /// Share of instances whose label follows the neighborhood vote; the
    /// others keep their cluster as label.
    pub influenced: f64,
    /// Added to the first feature of influenced instances and subtracted from
    /// the others.
    pub marker: f64,
    pub domains: Vec<KnnSpec>,
    pub train_domains: Vec<u32>,
    pub test_domains: Vec<u32>,
}

impl ShiftConfig {
    /// 2000 instances, 16 features, 4 classes, domains 0-2 train and 3-5 test.
    pub fn preset(preset: Preset, seed: u64) -> Self {
        Self {
            name: preset.name().to_string(),
            seed,
            n: 2000,
            dim: 16,
            classes: 4,
            separation: 0.3,
            spread: 1.0,
            gamma: 5.0,
            influenced: 1.0,
            marker: 0.0,
            domains: preset.domain_specs(),
            train_domains: vec![0, 1, 2],
            test_domains: vec![3, 4, 5],
        }
    }
}

/// One domain: the shared instances with their own graph and labels.
#[derive(Clone, Debug)]
pub struct DomainData {
    pub id: u32,
    pub spec: KnnSpec,
    pub dataset: Dataset,
    pub graph: Graph,
}

#[derive(Clone, Debug)]
pub struct ShiftBenchmark {
    pub config: ShiftConfig,
    pub clusters: Vec<usize>,
    /// Instances whose labels follow the neighborhood vote.
    pub influenced: Vec<bool>,
    /// Instances whose labels are exposed in training domains; the rest are
    /// exposed in test domains.
    pub train_half: Vec<bool>,
    pub domains: Vec<DomainData>,
}

impl ShiftBenchmark {
    /// All domains as one dataset over the disjoint union of their graphs.
    pub fn union(&self) -> Result<(Dataset, Graph)> {
        let mut it = self.domains.iter();
        let first = it.next().ok_or_else(|| Error::config("benchmark has no domains"))?;
        let mut ds = first.dataset.clone();
        let mut g = first.graph.clone();
        for d in it {
            ds = ds.concat(&d.dataset)?;
            g = g.disjoint_union(&d.graph);
        }
        Ok((ds, g))
    }
}

fn neighbor_vote_labels(clusters: &[usize], graph: &Graph, classes: usize, gamma: &[f64]) -> Vec<usize> {
    (0..clusters.len())
        .map(|u| {
            let mut score = vec![0.0; classes];
            score[clusters[u]] += 1.0;
            let deg = graph.degree(u);
            let gamma = gamma[u];
            if deg > 0 && gamma != 0.0 {
                let w = gamma / deg as f64;
                for &v in graph.neighbors(u) {
                    score[clusters[v]] += w;
                }
            }
            // First maximum wins.
            let mut best = 0;
            for c in 1..classes {
                if score[c] > score[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

pub fn generate_shift_benchmark(config: &ShiftConfig) -> Result<ShiftBenchmark> {
    let c = config.classes;
    if c < 2 {
        return Err(Error::config("benchmark needs at least 2 classes"));
    }
    if config.domains.len() < 2 {
        return Err(Error::config("benchmark needs at least 2 domains"));
    }
    if config.n < 10 * c {
        return Err(Error::config(format!(
            "benchmark needs N >= 10*C, got N = {} with C = {c}",
            config.n
        )));
    }
    if config.dim == 0 || !(config.spread > 0.0) || !config.separation.is_finite() {
        return Err(Error::config("benchmark needs D >= 1, spread > 0, finite separation"));
    }
    if !(0.0..=1.0).contains(&config.influenced) || !config.marker.is_finite() || !config.gamma.is_finite() {
        return Err(Error::config(
            "benchmark needs influenced in [0, 1] and finite gamma and marker",
        ));
    }
    let nd = config.domains.len() as u32;
    for &d in config.train_domains.iter().chain(&config.test_domains) {
        if d >= nd {
            return Err(Error::config(format!("domain {d} not among the {nd} generated")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let centers: Vec<Vec<f64>> = (0..c)
        .map(|_| {
            (0..config.dim)
                .map(|_| config.separation * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let clusters: Vec<usize> = (0..config.n).map(|u| u % c).collect();
    let mut data = Vec::with_capacity(config.n * config.dim);
    for &k in &clusters {
        for j in 0..config.dim {
            data.push(centers[k][j] + config.spread * rng.sample::<f64, _>(StandardNormal));
        }
    }
    let influenced: Vec<bool> = (0..config.n).map(|_| rng.gen_bool(config.influenced)).collect();
    for (u, &inf) in influenced.iter().enumerate() {
        data[u * config.dim] += if inf { config.marker } else { -config.marker };
    }
    let gamma: Vec<f64> = influenced
        .iter()
        .map(|&inf| if inf { config.gamma } else { 0.0 })
        .collect();
    let x = Tensor::new(config.n, config.dim, data)?;
    let mut order: Vec<usize> = (0..config.n).collect();
    order.shuffle(&mut rng);
    let mut train_half = vec![false; config.n];
    for &u in &order[..config.n / 2] {
        train_half[u] = true;
    }
    let mut domains = Vec::with_capacity(config.domains.len());
    for (i, spec) in config.domains.iter().enumerate() {
        let id = i as u32;
        let graph = build_knn_graph(&x, spec)?;
        let labels = neighbor_vote_labels(&clusters, &graph, c, &gamma);
        let is_train = config.train_domains.contains(&id);
        let is_test = config.test_domains.contains(&id);
        let labels = labels
            .iter()
            .zip(&train_half)
            .map(|(&y, &half)| {
                if (is_train && half) || (is_test && !half) || (!is_train && !is_test) {
                    Label::Class(y)
                } else {
                    Label::Missing
                }
            })
            .collect();
        let dataset = Dataset::new(x.clone(), labels, vec![id; config.n], Task::Classification, c)?;
        domains.push(DomainData {
            id,
            spec: *spec,
            dataset,
            graph,
        });
    }
    Ok(ShiftBenchmark {
        config: config.clone(),
        clusters,
        influenced,
        train_half,
        domains,
    })
}

/// Writes each domain's file set under `dir/domain{id}` and a
/// `manifest.json` naming the train and test domains.
pub fn write_benchmark(dir: &Path, bench: &ShiftBenchmark) -> Result<Manifest> {
    let mut domains = Vec::with_capacity(bench.domains.len());
    for d in &bench.domains {
        let name = format!("domain{}", d.id);
        write_dataset(&dir.join(&name), &d.dataset, &d.graph)?;
        domains.push(ManifestDomain {
            id: d.id,
            dir: name,
            k: d.spec.k,
            metric: d.spec.metric.name().to_string(),
            theta_degrees: d.spec.metric.theta_degrees(),
        });
    }
    let manifest = Manifest {
        preset: bench.config.name.clone(),
        seed: bench.config.seed,
        task: Task::Classification,
        num_classes: bench.config.classes,
        domains,
        train_domains: bench.config.train_domains.clone(),
        test_domains: bench.config.test_domains.clone(),
    };
    manifest.write(&dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(gamma: f64) -> ShiftConfig {
        ShiftConfig {
            n: 120,
            dim: 4,
            gamma,
            ..ShiftConfig::preset(Preset::KnnShift, 11)
        }
    }

    #[test]
    fn zero_gamma_labels_are_clusters() {
        let b = generate_shift_benchmark(&small(0.0)).unwrap();
        for d in &b.domains {
            for (u, l) in d.dataset.labels().iter().enumerate() {
                if let Some(y) = l.class() {
                    assert_eq!(y, b.clusters[u]);
                }
            }
        }
    }

    #[test]
    fn uninfluenced_instances_keep_their_cluster() {
        let cfg = ShiftConfig {
            influenced: 0.5,
            marker: 2.0,
            ..small(50.0)
        };
        let b = generate_shift_benchmark(&cfg).unwrap();
        assert!(b.influenced.iter().any(|&i| i) && b.influenced.iter().any(|&i| !i));
        let x = b.domains[0].dataset.features();
        let plain = generate_shift_benchmark(&ShiftConfig {
            influenced: 0.5,
            ..small(50.0)
        })
        .unwrap();
        let x0 = plain.domains[0].dataset.features();
        for d in &b.domains {
            for (u, l) in d.dataset.labels().iter().enumerate() {
                if let (Some(y), false) = (l.class(), b.influenced[u]) {
                    assert_eq!(y, b.clusters[u]);
                }
            }
        }
        for u in 0..cfg.n {
            let shift = if b.influenced[u] { 2.0 } else { -2.0 };
            assert!((x.get(u, 0) - x0.get(u, 0) - shift).abs() < 1e-12);
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate_shift_benchmark(&small(1.5)).unwrap();
        let b = generate_shift_benchmark(&small(1.5)).unwrap();
        for (x, y) in a.domains.iter().zip(&b.domains) {
            assert_eq!(x.dataset.features(), y.dataset.features());
            assert_eq!(x.dataset.labels(), y.dataset.labels());
            assert_eq!(x.graph, y.graph);
        }
    }

    #[test]
    fn six_domains_share_features() {
        let b = generate_shift_benchmark(&small(1.5)).unwrap();
        assert_eq!(b.domains.len(), 6);
        for d in &b.domains[1..] {
            assert_eq!(d.dataset.features(), b.domains[0].dataset.features());
        }
        let ks: Vec<usize> = b.domains.iter().map(|d| d.spec.k).collect();
        assert_eq!(ks, vec![2, 3, 4, 8, 9, 10]);
        assert_ne!(b.domains[0].graph, b.domains[5].graph);
    }

    #[test]
    fn identical_specs_give_identical_graphs() {
        let cfg = ShiftConfig {
            domains: vec![KnnSpec::euclidean(4); 3],
            train_domains: vec![0],
            test_domains: vec![2],
            ..small(1.5)
        };
        let b = generate_shift_benchmark(&cfg).unwrap();
        assert_eq!(b.domains[0].graph, b.domains[1].graph);
        assert_eq!(b.domains[1].graph, b.domains[2].graph);
    }

    #[test]
    fn labels_exposed_on_complementary_halves() {
        let b = generate_shift_benchmark(&small(1.5)).unwrap();
        for d in &b.domains {
            let train = d.id < 3;
            for (u, l) in d.dataset.labels().iter().enumerate() {
                assert_eq!(l.is_labeled(), b.train_half[u] == train);
            }
        }
    }

    #[test]
    fn degenerate_configs_rejected() {
        assert!(generate_shift_benchmark(&ShiftConfig {
            classes: 1,
            ..small(1.5)
        })
        .is_err());
        assert!(generate_shift_benchmark(&ShiftConfig { n: 30, ..small(1.5) }).is_err());
        let one = ShiftConfig {
            domains: vec![KnnSpec::euclidean(3)],
            train_domains: vec![0],
            test_domains: vec![],
            ..small(1.5)
        };
        assert!(generate_shift_benchmark(&one).is_err());
    }
}
