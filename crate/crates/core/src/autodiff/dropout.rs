use rand::Rng;

use super::Tensor;

/// Inverted-dropout mask of shape `[rows, cols]`.
///
/// Each entry is `1 / (1 - rate)` with probability `1 - rate` and zero
/// otherwise, so the mask has expectation one. For variational dropout the
/// caller samples one mask per sequence (one row per sequence in a batch)
/// and multiplies the same mask into every timestep.
pub fn variational_dropout_mask<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    rate: f64,
    rng: &mut R,
) -> Tensor {
    assert!((0.0..1.0).contains(&rate), "dropout rate must lie in [0, 1)");
    if rate == 0.0 {
        return Tensor::ones(&[rows, cols]);
    }
    let keep = 1.0 - rate;
    let data = (0..rows * cols)
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    Tensor::matrix(rows, cols, data)
}
