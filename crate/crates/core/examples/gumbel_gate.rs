//! Gate probabilities and Gumbel-Softmax branch samples across temperatures.

use glind::layers::{gate_probabilities, sample_branch, GumbelMode};
use glind::metrics::argmax;
use glind::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> glind::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let z = Tensor::uniform(4, 6, 1.0, &mut rng);
    let w = Tensor::uniform(3, 6, 2.0, &mut rng);
    let pi = gate_probabilities(&z, &w)?;
    println!("gate probabilities (one row per instance):");
    for r in 0..pi.rows() {
        println!("  {:.3?}", pi.row(r));
    }
    for tau in [0.05, 1.0, 1e6] {
        for mode in [GumbelMode::PaperLiteral, GumbelMode::LogSpace] {
            let h = sample_branch(&pi, tau, 42, mode)?;
            println!("tau = {tau:<8} {mode:?}: first row {:.3?}", h.row(0));
        }
    }

    let draws = 10_000;
    let uniform = Tensor::filled(draws, 2, 0.5);
    let h = sample_branch(&uniform, 1.0, 9, GumbelMode::PaperLiteral)?;
    let first = (0..draws).filter(|&r| argmax(h.row(r)) == 0).count();
    println!(
        "uniform two-way gate: branch 0 wins {:.4} of {draws} draws",
        first as f64 / draws as f64
    );
    Ok(())
}
