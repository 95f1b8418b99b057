use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

/// Labeled instance indices of each role, sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Holds out `valid_fraction` of the labeled training-domain instances for
/// validation; every labeled instance of a test domain is a test instance.
pub fn split_by_domain(
    dataset: &Dataset,
    train_domains: &[u32],
    valid_fraction: f64,
    test_domains: &[u32],
    seed: u64,
) -> Result<Split> {
    if !(valid_fraction > 0.0 && valid_fraction < 1.0) {
        return Err(Error::config(format!(
            "validation fraction {valid_fraction} must lie strictly between 0 and 1"
        )));
    }
    if let Some(d) = train_domains.iter().find(|d| test_domains.contains(d)) {
        return Err(Error::config(format!("domain {d} is both a train and a test domain")));
    }
    let present = dataset.domain_ids();
    for d in train_domains.iter().chain(test_domains) {
        if !present.contains(d) {
            return Err(Error::config(format!("domain {d} does not occur in the data")));
        }
    }
    let labeled = dataset.labeled_indices();
    let in_domains = |set: &[u32]| -> Vec<usize> {
        labeled
            .iter()
            .copied()
            .filter(|&u| set.contains(&dataset.domains()[u]))
            .collect()
    };
    let mut pool = in_domains(train_domains);
    let test = in_domains(test_domains);
    let n_valid = (pool.len() as f64 * valid_fraction).round() as usize;
    pool.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut valid = pool[..n_valid].to_vec();
    let mut train = pool[n_valid..].to_vec();
    valid.sort_unstable();
    train.sort_unstable();
    for (name, set) in [("train", &train), ("validation", &valid), ("test", &test)] {
        if set.is_empty() {
            return Err(Error::config(format!("{name} split is empty")));
        }
    }
    Ok(Split { train, valid, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Label, Task};
    use crate::tensor::Tensor;

    fn dataset() -> Dataset {
        let n = 150;
        let domains = (0..n).map(|u| if u < 100 { (u % 2) as u32 } else { 2 }).collect();
        Dataset::new(
            Tensor::zeros(n, 1),
            (0..n).map(|u| Label::Class(u % 2)).collect(),
            domains,
            Task::Binary,
            2,
        )
        .unwrap()
    }

    #[test]
    fn quarter_validation() {
        let s = split_by_domain(&dataset(), &[0, 1], 0.25, &[2], 3).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (75, 25, 50));
        assert!(s.train.iter().all(|u| !s.test.contains(u) && !s.valid.contains(u)));
    }

    #[test]
    fn rejects_bad_splits() {
        let ds = dataset();
        assert!(split_by_domain(&ds, &[0, 1], 0.0, &[2], 3).is_err());
        assert!(split_by_domain(&ds, &[0, 1], 0.25, &[1, 2], 3).is_err());
        assert!(split_by_domain(&ds, &[0], 0.25, &[7], 3).is_err());
        assert!(split_by_domain(&ds, &[0, 1], 0.25, &[], 3).is_err());
    }
}
