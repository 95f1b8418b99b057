//! All-pair attention in linear time, checked against the explicit quadratic
//! form, with the summary-pass work for growing N.

use glind::layers::{linear_attention_counted, ATTENTION_EPS};
use glind::verify::quadratic_attention;
use glind::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() -> glind::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = 16;
    let w_k = Tensor::uniform(d, d, 0.5, &mut rng);
    let w_q = Tensor::uniform(d, d, 0.5, &mut rng);
    for n in [64, 128, 256, 512, 1024] {
        let z = Tensor::uniform(n, d, 1.0, &mut rng);
        let t = Instant::now();
        let fast = linear_attention_counted(&z, &w_k, &w_q, ATTENTION_EPS)?;
        let t_fast = t.elapsed();
        let t = Instant::now();
        let slow = quadratic_attention(&z, &w_k, &w_q)?;
        let t_slow = t.elapsed();
        let err = fast.output.max_abs_diff(&slow) / slow.max_abs();
        println!(
            "N = {n:>5}: summary ops {:>9}, relative error {err:.1e}, linear {:>8.2?}, quadratic {:>8.2?}",
            fast.summary_ops, t_fast, t_slow
        );
    }
    Ok(())
}
