use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::volio::CohortManifest;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.8,
            validation: 0.1,
            test: 0.1,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.validation, self.test];
        if parts.iter().any(|p| !(*p >= 0.0 && *p <= 1.0)) {
            return Err(Error::Invalid(format!("split fractions {parts:?} must lie in [0, 1]")));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid(format!("split fractions {parts:?} must sum to 1")));
        }
        if self.train == 1.0 {
            return Err(Error::Invalid("split leaves nothing to hold out".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train_ids: Vec<String>,
    pub validation_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

/// Seeded permutation of `ids` cut into `folds` contiguous blocks (earlier
/// blocks take the remainder). Block `fold` is held out and divided between
/// validation and test in proportion to the split fractions, rounding the
/// validation share down. With a single fold the held-out size comes from
/// the fractions instead.
pub fn split_ids(
    ids: &[String],
    fold: usize,
    folds: usize,
    fractions: SplitFractions,
    seed: u64,
) -> Result<SplitAssignment> {
    fractions.validate()?;
    if folds == 0 || fold >= folds {
        return Err(Error::Invalid(format!("fold {fold} out of range for {folds} folds")));
    }
    let n = ids.len();
    if n < folds {
        return Err(Error::Invalid(format!("{n} subjects cannot fill {folds} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let (start, len) = if folds == 1 {
        let held = ((1.0 - fractions.train) * n as f64).round() as usize;
        (n - held, held)
    } else {
        let base = n / folds;
        let extra = n % folds;
        let start = fold * base + fold.min(extra);
        (start, base + usize::from(fold < extra))
    };
    let held = &order[start..start + len];
    let val_share = fractions.validation / (fractions.validation + fractions.test);
    let n_val = (len as f64 * val_share).floor() as usize;

    let pick = |idx: &[usize]| idx.iter().map(|&i| ids[i].clone()).collect::<Vec<_>>();
    let train: Vec<usize> = order[..start].iter().chain(&order[start + len..]).copied().collect();
    let out = SplitAssignment {
        train_ids: pick(&train),
        validation_ids: pick(&held[..n_val]),
        test_ids: pick(&held[n_val..]),
    };
    if out.train_ids.is_empty() || out.test_ids.is_empty() {
        return Err(Error::Invalid(format!(
            "{n} subjects give an empty train or test set for fold {fold} of {folds}"
        )));
    }
    Ok(out)
}

pub fn split_cohort(manifest: &CohortManifest, fold: usize, config: &TrainConfig) -> Result<SplitAssignment> {
    split_ids(&manifest.ids(), fold, config.folds, config.split, config.seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i:02}")).collect()
    }

    #[test]
    fn sizes_follow_fractions() {
        let s = split_ids(&ids(30), 2, 5, SplitFractions::default(), 1).unwrap();
        assert_eq!((s.train_ids.len(), s.validation_ids.len(), s.test_ids.len()), (24, 3, 3));
        let s = split_ids(&ids(10), 0, 5, SplitFractions::default(), 1).unwrap();
        assert_eq!((s.train_ids.len(), s.validation_ids.len(), s.test_ids.len()), (8, 1, 1));
        // Odd held-out block: the extra subject goes to test.
        let s = split_ids(&ids(15), 4, 5, SplitFractions::default(), 1).unwrap();
        assert_eq!((s.validation_ids.len(), s.test_ids.len()), (1, 2));
    }

    #[test]
    fn held_out_blocks_partition_the_cohort() {
        let all = ids(23);
        let mut tests: Vec<String> = Vec::new();
        let mut held: Vec<String> = Vec::new();
        for fold in 0..5 {
            let s = split_ids(&all, fold, 5, SplitFractions::default(), 9).unwrap();
            let mut union: Vec<String> =
                [s.train_ids.clone(), s.validation_ids.clone(), s.test_ids.clone()].concat();
            union.sort();
            assert_eq!(union, all);
            tests.extend(s.test_ids.clone());
            held.extend(s.validation_ids.into_iter().chain(s.test_ids));
        }
        let n_tests = tests.len();
        tests.sort();
        tests.dedup();
        assert_eq!(tests.len(), n_tests);
        held.sort();
        assert_eq!(held, all);
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let a = split_ids(&ids(12), 1, 5, SplitFractions::default(), 5).unwrap();
        assert_eq!(a, split_ids(&ids(12), 1, 5, SplitFractions::default(), 5).unwrap());
        assert_ne!(a, split_ids(&ids(12), 1, 5, SplitFractions::default(), 6).unwrap());
    }

    #[test]
    fn too_small_cohorts_fail() {
        assert!(split_ids(&ids(4), 0, 5, SplitFractions::default(), 0).is_err());
        // Five single-subject blocks: validation takes nothing, test takes the one.
        assert!(split_ids(&ids(5), 0, 5, SplitFractions::default(), 0).is_ok());
        assert!(split_ids(&ids(5), 5, 5, SplitFractions::default(), 0).is_err());
        let bad = SplitFractions {
            train: 0.7,
            validation: 0.1,
            test: 0.1,
        };
        assert!(split_ids(&ids(10), 0, 5, bad, 0).is_err());
    }

    #[test]
    fn single_fold_uses_fractions() {
        let s = split_ids(&ids(20), 0, 1, SplitFractions::default(), 3).unwrap();
        assert_eq!((s.train_ids.len(), s.validation_ids.len(), s.test_ids.len()), (16, 2, 2));
    }
}
