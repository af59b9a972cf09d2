use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 0.6,
            val: 0.2,
            test: 0.2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let fr = [self.train, self.val, self.test];
        if fr.iter().any(|f| !(0.0..=1.0).contains(f))
            || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::Config(format!(
                "split fractions {fr:?} must lie in [0, 1] and sum to 1"
            )));
        }
        Ok(())
    }

    /// `(train, val, test)` sizes for `n` records: validation and test sizes
    /// round to nearest, training takes the remainder.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let val = ((self.val * n as f64).round() as usize).min(n);
        let test = ((self.test * n as f64).round() as usize).min(n - val);
        (n - val - test, val, test)
    }
}

/// Shuffles with `spec.seed`, then slices train, validation and test in
/// that order.
pub fn split_dataset<T: Clone>(records: &[T], spec: &SplitSpec) -> Result<Splits<T>> {
    spec.validate()?;
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let (train, val, _) = spec.sizes(records.len());
    let pick = |idx: &[usize]| idx.iter().map(|&i| records[i].clone()).collect();
    Ok(Splits {
        train: pick(&order[..train]),
        val: pick(&order[train..train + val]),
        test: pick(&order[train + val..]),
    })
}
