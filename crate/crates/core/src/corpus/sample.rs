use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Sentence;
use crate::error::{Error, Result};

/// Random train/validation split; `ratio` is the training fraction.
/// Both halves preserve the original corpus order.
pub fn split_train_valid(
    data: &[Sentence],
    ratio: f64,
    seed: u64,
) -> Result<(Vec<Sentence>, Vec<Sentence>)> {
    if !(0.0 < ratio && ratio < 1.0) {
        return Err(Error::Invalid(format!("split ratio {ratio} not in (0, 1)")));
    }
    if data.len() < 2 {
        return Err(Error::Invalid(format!(
            "cannot split {} sentence(s) into train and validation",
            data.len()
        )));
    }
    let mut indices: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);

    let n_train = ((ratio * data.len() as f64).round() as usize).clamp(1, data.len() - 1);
    let mut train_idx = indices[..n_train].to_vec();
    let mut valid_idx = indices[n_train..].to_vec();
    train_idx.sort_unstable();
    valid_idx.sort_unstable();

    let pick = |idx: &[usize]| idx.iter().map(|&i| data[i].clone()).collect();
    Ok((pick(&train_idx), pick(&valid_idx)))
}

/// Uniform sample without replacement of `ceil(fraction * len)` sentences,
/// order-preserving. `fraction` must be in (0, 1].
pub fn subsample(data: &[Sentence], fraction: f64, seed: u64) -> Vec<Sentence> {
    assert!(
        0.0 < fraction && fraction <= 1.0,
        "subsample fraction {fraction} not in (0, 1]"
    );
    let k = ((fraction * data.len() as f64).ceil() as usize).min(data.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = rand::seq::index::sample(&mut rng, data.len(), k).into_vec();
    indices.sort_unstable();
    indices.into_iter().map(|i| data[i].clone()).collect()
}
