use super::Dialogue;
use crate::error::{Error, Result};
use crate::tensor::Rng;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Split {
    pub train: Vec<Dialogue>,
    pub dev: Vec<Dialogue>,
    pub test: Vec<Dialogue>,
}

/// Shuffle whole dialogues under `seed` and cut them into train/dev/test.
/// Counts are `round(f * n)` for train and dev; test takes the rest.
pub fn split(dialogues: &[Dialogue], fractions: [f64; 3], seed: u64) -> Result<Split> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(Error::Usage(format!("split fractions {fractions:?} out of [0, 1]")));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Usage(format!(
            "split fractions {fractions:?} sum to {total}, not 1"
        )));
    }
    let n = dialogues.len();
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(seed).shuffle(&mut order);
    let n_train = ((fractions[0] * n as f64).round() as usize).min(n);
    let n_dev = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
    let take = |idx: &[usize]| idx.iter().map(|&i| dialogues[i].clone()).collect();
    Ok(Split {
        train: take(&order[..n_train]),
        dev: take(&order[n_train..n_train + n_dev]),
        test: take(&order[n_train + n_dev..]),
    })
}
