//! Runs every verification suite and prints a summary per check.

use std::collections::BTreeMap;
use std::time::Instant;

use glind::verify::{all_passed, run_suite, Suite};

fn main() {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    for suite in [Suite::Gradcheck, Suite::Theorem1, Suite::Attention, Suite::Conservation] {
        let start = Instant::now();
        let reports = run_suite(suite, seed);
        let mut by_check: BTreeMap<&str, (usize, usize, f64)> = BTreeMap::new();
        for r in &reports {
            let e = by_check.entry(r.check.as_str()).or_insert((0, 0, f64::NEG_INFINITY));
            e.0 += 1;
            e.1 += r.passed as usize;
            e.2 = e.2.max(r.measured);
        }
        println!(
            "{suite:?}: {} reports in {:.2?}, all passed: {}",
            reports.len(),
            start.elapsed(),
            all_passed(&reports)
        );
        for (check, (n, ok, worst)) in by_check {
            println!("  {check:<45} {ok}/{n} passed, largest measured {worst:.3e}");
        }
    }
}
