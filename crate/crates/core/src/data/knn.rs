//! Exact k-nearest-neighbor graphs.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Metric {
    Euclidean,
    /// `1 − cos(x, y)`
    Cosine,
    /// `1 − cos(∠(x, y) + θ)` with `θ` in degrees.
    AngleBiasedCosine {
        theta_degrees: f64,
    },
}

impl Metric {
    pub fn name(&self) -> &'static str {
        match self {
            Metric::Euclidean => "euclidean",
            Metric::Cosine => "cosine",
            Metric::AngleBiasedCosine { .. } => "angle-biased-cosine",
        }
    }

    pub fn theta_degrees(&self) -> Option<f64> {
        match self {
            Metric::AngleBiasedCosine { theta_degrees } => Some(*theta_degrees),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnnSpec {
    pub k: usize,
    pub metric: Metric,
}

impl KnnSpec {
    pub fn new(k: usize, metric: Metric) -> Result<Self> {
        let spec = Self { k, metric };
        spec.validate()?;
        Ok(spec)
    }

    pub fn euclidean(k: usize) -> Self {
        Self {
            k,
            metric: Metric::Euclidean,
        }
    }

    pub fn angle_biased(k: usize, theta_degrees: f64) -> Self {
        Self {
            k,
            metric: Metric::AngleBiasedCosine { theta_degrees },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("kNN needs k >= 1"));
        }
        if let Metric::AngleBiasedCosine { theta_degrees } = self.metric {
            if !(0.0..180.0).contains(&theta_degrees) {
                return Err(Error::config(format!(
                    "angle bias {theta_degrees} degrees outside [0, 180)"
                )));
            }
        }
        Ok(())
    }
}

/// Links every instance to its `k` nearest others and symmetrizes by union.
/// Distance ties go to the lower index.
pub fn build_knn_graph(x: &Tensor, spec: &KnnSpec) -> Result<Graph> {
    spec.validate()?;
    let n = x.rows();
    if n <= spec.k {
        return Err(Error::Construction(format!(
            "kNN with k = {} needs more than {} instances",
            spec.k, n
        )));
    }
    let norms: Vec<f64> = (0..n)
        .map(|u| x.row(u).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    if !matches!(spec.metric, Metric::Euclidean) {
        if let Some(u) = norms.iter().position(|&v| v == 0.0) {
            return Err(Error::Construction(format!(
                "instance {u} has an all-zero feature row; cosine distance undefined"
            )));
        }
    }
    let bias = spec.metric.theta_degrees().map(f64::to_radians);
    let dist = |u: usize, v: usize| -> f64 {
        let (a, b) = (x.row(u), x.row(v));
        match spec.metric {
            Metric::Euclidean => a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt(),
            Metric::Cosine | Metric::AngleBiasedCosine { .. } => {
                let dot: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
                let cos = (dot / (norms[u] * norms[v])).clamp(-1.0, 1.0);
                match bias {
                    Some(theta) if theta != 0.0 => 1.0 - (cos.acos() + theta).cos(),
                    _ => 1.0 - cos,
                }
            }
        }
    };
    let picks: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|u| {
            let mut cand: Vec<(f64, usize)> = (0..n).filter(|&v| v != u).map(|v| (dist(u, v), v)).collect();
            let by = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            cand.select_nth_unstable_by(spec.k - 1, by);
            cand.truncate(spec.k);
            cand.into_iter().map(|(_, v)| v).collect()
        })
        .collect();
    Graph::from_edges(
        n,
        picks
            .iter()
            .enumerate()
            .flat_map(|(u, vs)| vs.iter().map(move |&v| (u, v))),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn line(points: &[f64]) -> Tensor {
        Tensor::column_vector(points).unwrap()
    }

    #[test]
    fn three_points_on_a_line() {
        // Pairwise distances: d(0,1)=1, d(0,2)=3, d(1,2)=2. Directed picks
        // 0->1, 1->0, 2->1.
        let g = build_knn_graph(&line(&[0.0, 1.0, 3.0]), &KnnSpec::euclidean(1)).unwrap();
        assert_eq!(g.edges().collect::<Vec<_>>(), vec![(0, 1), (1, 2)]);
    }

    #[test]
    fn ties_break_toward_lower_index() {
        // Node 1 is equidistant from 0 and 2.
        let g = build_knn_graph(&line(&[0.0, 1.0, 2.0]), &KnnSpec::euclidean(1)).unwrap();
        assert!(g.has_edge(1, 0));
        assert_eq!(g.edges().collect::<Vec<_>>(), vec![(0, 1), (1, 2)]);
    }

    #[test]
    fn k_of_n_minus_one_is_complete() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform(7, 3, 1.0, &mut rng);
        let g = build_knn_graph(&x, &KnnSpec::euclidean(6)).unwrap();
        assert_eq!(g, Graph::complete(7));
    }

    #[test]
    fn zero_bias_matches_plain_cosine() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::uniform(40, 5, 1.0, &mut rng);
        let plain = build_knn_graph(
            &x,
            &KnnSpec {
                k: 3,
                metric: Metric::Cosine,
            },
        )
        .unwrap();
        let biased = build_knn_graph(&x, &KnnSpec::angle_biased(3, 0.0)).unwrap();
        assert_eq!(plain, biased);
    }

    #[test]
    fn rejects_degenerate_inputs() {
        let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(
            build_knn_graph(
                &x,
                &KnnSpec {
                    k: 1,
                    metric: Metric::Cosine
                }
            ),
            Err(Error::Construction(_))
        ));
        assert!(build_knn_graph(&x, &KnnSpec::euclidean(3)).is_err());
        assert!(KnnSpec::new(0, Metric::Euclidean).is_err());
        assert!(KnnSpec::new(2, Metric::AngleBiasedCosine { theta_degrees: 180.0 }).is_err());
    }

    #[test]
    fn large_bias_inverts_neighborhoods() {
        // At 170 degrees the nearest neighbor is the most opposed direction.
        let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.99, 0.14], vec![-1.0, 0.05], vec![0.0, 1.0]]).unwrap();
        let g = build_knn_graph(&x, &KnnSpec::angle_biased(1, 170.0)).unwrap();
        assert!(g.has_edge(0, 2));
    }

    proptest! {
        #[test]
        fn permutation_equivariant(seed in 0u64..1000, k in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 12;
            let x = Tensor::uniform(n, 3, 1.0, &mut rng);
            let mut perm: Vec<usize> = (0..n).collect();
            use rand::seq::SliceRandom;
            perm.shuffle(&mut rng);
            // Row perm[u] of the permuted matrix is row u of x.
            let mut rows = vec![Vec::new(); n];
            for u in 0..n {
                rows[perm[u]] = x.row(u).to_vec();
            }
            let xp = Tensor::from_rows(&rows).unwrap();
            for metric in [Metric::Euclidean, Metric::Cosine, Metric::AngleBiasedCosine { theta_degrees: 30.0 }] {
                let spec = KnnSpec { k, metric };
                let g = build_knn_graph(&x, &spec).unwrap();
                let gp = build_knn_graph(&xp, &spec).unwrap();
                prop_assert_eq!(g.permuted(&perm), gp);
                g.validate().unwrap();
            }
        }
    }
}
