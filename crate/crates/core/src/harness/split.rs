use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Fkg;

/// Labeled non-frauds must be at least this many years older than the horizon to enter the test set.
pub const CLEAN_TEST_YEARS: i32 = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Random 6:2:2 split of the labeled companies. Non-frauds enter the test set only
/// when `record_year <= horizon - 8`; when that leaves too few candidates the test
/// set stays short and the remainder goes to train and valid at 3:1.
pub fn split_dataset(fkg: &Fkg, seed: u64) -> Result<Split> {
    let horizon = fkg
        .horizon_year()
        .ok_or_else(|| Error::Schema("no labeled companies to split".into()))?;
    let mut labeled: Vec<usize> = (0..fkg.company_count()).filter(|&i| fkg.label(i).is_some()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    labeled.shuffle(&mut rng);

    let n = labeled.len();
    let n_test = (n as f64 * 0.2).round() as usize;
    let eligible = |i: usize| {
        let l = fkg.label(i).expect("labeled");
        l.fraud || l.record_year <= horizon - CLEAN_TEST_YEARS
    };
    let mut test = Vec::with_capacity(n_test);
    let mut rest = Vec::with_capacity(n);
    for i in labeled {
        if test.len() < n_test && eligible(i) {
            test.push(i);
        } else {
            rest.push(i);
        }
    }
    if test.len() < n_test {
        log::warn!(
            "only {} of {n_test} test slots could be filled under the clean-test rule",
            test.len()
        );
    }
    if !test.is_empty() && test.iter().all(|&i| fkg.label(i).is_some_and(|l| l.fraud)) {
        log::warn!("test set holds no eligible non-fraud");
    }
    let n_valid = ((n - test.len()) as f64 * 0.25).round() as usize;
    let valid = rest.split_off(rest.len() - n_valid);
    Ok(Split {
        train: rest,
        valid,
        test,
    })
}
