//! One explicit diffusion step on a small graph: conservation under a
//! symmetric field, a consensus fixed point and an asymmetric counterexample.

use glind::layers::{euler_diffusion_step, DiffusivityField};
use glind::{Graph, Tensor};

fn main() -> glind::Result<()> {
    let g = Graph::from_edges(5, [(0, 1), (1, 2), (2, 3), (3, 4), (4, 0), (0, 2)])?;
    let z = Tensor::from_rows(&[
        vec![1.0, 0.0],
        vec![0.0, 2.0],
        vec![3.0, 1.0],
        vec![-1.0, 0.5],
        vec![0.0, 0.0],
    ])?;
    let symmetric = DiffusivityField::from_fn(&g, |u, v| 0.2 + 0.1 * (u + v) as f64)?;
    let mut state = z.clone();
    for step in 1..=20 {
        state = euler_diffusion_step(&state, &g, &symmetric, 0.5)?;
        if step % 5 == 0 {
            let spread = (0..5)
                .map(|u| (state.get(u, 0) - state.get(0, 0)).abs())
                .fold(0.0, f64::max);
            println!(
                "step {step:>2}: column sums {:?}, max gap to node 0 {spread:.2e}",
                state.column_sums().data()
            );
        }
    }
    println!("initial column sums {:?}", z.column_sums().data());

    let consensus = Tensor::from_rows(&vec![vec![0.7, -0.3]; 5])?;
    let after = euler_diffusion_step(&consensus, &g, &symmetric, 0.5)?;
    println!("consensus unchanged: {}", after == consensus);

    let pair = Graph::from_edges(2, [(0, 1)])?;
    let asymmetric = DiffusivityField::from_fn(&pair, |u, _| if u == 0 { 1.0 } else { 0.0 })?;
    let two = Tensor::from_rows(&[vec![0.0], vec![1.0]])?;
    let next = euler_diffusion_step(&two, &pair, &asymmetric, 0.5)?;
    println!(
        "asymmetric rates: column sum {} -> {}",
        two.column_sums().get(0, 0),
        next.column_sums().get(0, 0)
    );
    Ok(())
}
