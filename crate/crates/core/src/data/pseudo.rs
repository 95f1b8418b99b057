//! Small random datasets fed through the model to estimate the diffusivity prior.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::Tensor;

/// Minimum default edge probability.
pub const P_EDGE_FLOOR: f64 = 1e-4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PseudoConfig {
    /// Number of sampled instances; `max(1, ⌊0.01·N⌋)` when absent.
    pub t: Option<usize>,
    /// Edge probability; the reference graph's density (at least
    /// [`P_EDGE_FLOOR`]) when absent.
    pub p_edge: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct PseudoDataset {
    pub features: Tensor,
    pub graph: Graph,
    pub seed: u64,
    pub p_edge: f64,
    /// Rows of the source dataset that were sampled.
    pub indices: Vec<usize>,
}

/// Samples `T` instances of `dataset` without replacement and links each pair
/// independently with probability `p_edge`. `graph` is the reference graph for
/// the default edge probability.
pub fn make_pseudo_dataset(
    dataset: &Dataset,
    graph: &Graph,
    config: &PseudoConfig,
    seed: u64,
) -> Result<PseudoDataset> {
    let n = dataset.len();
    if n == 0 {
        return Err(Error::config("pseudo dataset needs a nonempty source"));
    }
    let t = config.t.unwrap_or_else(|| ((n as f64 * 0.01) as usize).max(1));
    if t == 0 || t > n {
        return Err(Error::config(format!("pseudo dataset size {t} must lie in [1, {n}]")));
    }
    let p_edge = match config.p_edge {
        Some(p) if (0.0..=1.0).contains(&p) => p,
        Some(p) => return Err(Error::config(format!("edge probability {p} outside [0, 1]"))),
        None => graph.density().max(P_EDGE_FLOOR),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = sample(&mut rng, n, t).into_vec();
    indices.sort_unstable();
    let mut edges = Vec::new();
    for u in 0..t {
        for v in u + 1..t {
            if rng.gen::<f64>() < p_edge {
                edges.push((u, v));
            }
        }
    }
    Ok(PseudoDataset {
        features: dataset.features().select_rows(&indices),
        graph: Graph::from_edges(t, edges)?,
        seed,
        p_edge,
        indices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Label, Task};

    fn dataset(n: usize) -> Dataset {
        let x = Tensor::new(n, 2, (0..2 * n).map(|i| i as f64).collect()).unwrap();
        Dataset::new(x, vec![Label::Missing; n], vec![0; n], Task::Classification, 2).unwrap()
    }

    #[test]
    fn default_size_is_one_percent() {
        let p = make_pseudo_dataset(&dataset(250), &Graph::empty(250), &PseudoConfig::default(), 1).unwrap();
        assert_eq!(p.features.rows(), 2);
        let p = make_pseudo_dataset(&dataset(50), &Graph::empty(50), &PseudoConfig::default(), 1).unwrap();
        assert_eq!(p.features.rows(), 1);
        assert_eq!(p.p_edge, P_EDGE_FLOOR);
    }

    #[test]
    fn edge_probability_extremes() {
        let ds = dataset(30);
        let g = Graph::empty(30);
        let full = PseudoConfig {
            t: Some(12),
            p_edge: Some(1.0),
        };
        assert_eq!(
            make_pseudo_dataset(&ds, &g, &full, 5).unwrap().graph,
            Graph::complete(12)
        );
        let none = PseudoConfig {
            t: Some(12),
            p_edge: Some(0.0),
        };
        assert_eq!(make_pseudo_dataset(&ds, &g, &none, 5).unwrap().graph.num_edges(), 0);
    }

    #[test]
    fn sampled_rows_are_distinct_source_rows() {
        let ds = dataset(40);
        let cfg = PseudoConfig {
            t: Some(10),
            p_edge: Some(0.3),
        };
        let p = make_pseudo_dataset(&ds, &Graph::empty(40), &cfg, 9).unwrap();
        let mut idx = p.indices.clone();
        idx.dedup();
        assert_eq!(idx.len(), 10);
        for (r, &u) in p.indices.iter().enumerate() {
            assert_eq!(p.features.row(r), ds.features().row(u));
        }
        p.graph.validate().unwrap();
        let again = make_pseudo_dataset(&ds, &Graph::empty(40), &cfg, 9).unwrap();
        assert_eq!(again.graph, p.graph);
    }

    #[test]
    fn oversized_request_rejected() {
        let cfg = PseudoConfig {
            t: Some(41),
            p_edge: None,
        };
        assert!(matches!(
            make_pseudo_dataset(&dataset(40), &Graph::empty(40), &cfg, 0),
            Err(Error::Config(_))
        ));
    }
}
