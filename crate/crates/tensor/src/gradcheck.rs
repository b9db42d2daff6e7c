//! Central finite-difference gradients, used to check [`Tape::backward`].
//!
//! Only forward evaluations are used here, so the numbers are independent of
//! every backward kernel.
//!
//! [`Tape::backward`]: crate::Tape::backward

use crate::{Real, Tensor};

/// Central-difference gradient of `f` with respect to every entry of every input.
pub fn numeric_gradient<F: Real>(
    inputs: &[Tensor<F>],
    step: F,
    mut f: impl FnMut(&[Tensor<F>]) -> F,
) -> Vec<Tensor<F>> {
    let mut work = inputs.to_vec();
    let two_h = step + step;
    let mut out = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[t].shape().to_vec());
        for i in 0..inputs[t].numel() {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + step;
            let plus = f(&work);
            work[t].data_mut()[i] = orig - step;
            let minus = f(&work);
            work[t].data_mut()[i] = orig;
            g.data_mut()[i] = (plus - minus) / two_h;
        }
        out.push(g);
    }
    out
}

/// `‖a − b‖∞ / max(‖a‖∞, ‖b‖∞, floor)` over all paired tensors.
pub fn relative_error<F: Real>(analytic: &[Tensor<F>], numeric: &[Tensor<F>], floor: f64) -> f64 {
    let mut diff = 0.0f64;
    let mut scale = floor;
    for (a, n) in analytic.iter().zip(numeric) {
        for (&x, &y) in a.data().iter().zip(n.data()) {
            diff = diff.max((x.as_f64() - y.as_f64()).abs());
            scale = scale.max(x.as_f64().abs()).max(y.as_f64().abs());
        }
    }
    diff / scale
}
