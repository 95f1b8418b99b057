//! Builds k-nearest-neighbor graphs over the same points under different
//! similarity rules and reports how much their neighborhoods overlap.

use glind::data::{build_knn_graph, KnnSpec, Metric};
use glind::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> glind::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = Tensor::uniform(300, 8, 1.0, &mut rng);
    let reference = build_knn_graph(&x, &KnnSpec::euclidean(5))?;
    let specs = [
        KnnSpec::euclidean(2),
        KnnSpec::euclidean(10),
        KnnSpec::new(5, Metric::Cosine)?,
        KnnSpec::angle_biased(5, 0.0),
        KnnSpec::angle_biased(5, 90.0),
        KnnSpec::angle_biased(5, 160.0),
    ];
    println!("reference: euclidean k=5, {} edges", reference.num_edges());
    for spec in specs {
        let g = build_knn_graph(&x, &spec)?;
        let shared = g.edges().filter(|&(u, v)| reference.has_edge(u, v)).count();
        println!(
            "{:<22} k={:<3} {:>5} edges, {:>5.1}% shared with reference, density {:.4}",
            spec.metric.name(),
            spec.k,
            g.num_edges(),
            100.0 * shared as f64 / g.num_edges() as f64,
            g.density()
        );
    }
    Ok(())
}
