use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Central-difference estimate of the gradient of `f` at `x`.
pub fn finite_diff_gradient(f: impl Fn(&Tensor) -> Float, x: &Tensor, h: Float) -> Result<Tensor> {
    if !(h > 0.0) {
        return Err(Error::contract(format!("finite difference step must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// Largest elementwise `|a - b| / max(|a|, |b|, floor)`.
///
/// The floor keeps elements whose true gradient is ~0 from dominating
/// through round-off in the finite-difference estimate.
pub fn max_relative_error(a: &Tensor, b: &Tensor, floor: Float) -> Float {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, Float::max)
}
