use ndarray::{Array2, Zip};

use super::Scalar;

/// `x` for `x >= 0`, `slope * x` otherwise.
pub fn leaky_relu<S: Scalar>(x: &Array2<S>, slope: S) -> Array2<S> {
    x.mapv(|v| if v >= S::zero() { v } else { slope * v })
}

/// Backward of [`leaky_relu`] given its input; the subgradient at 0 is `slope`.
pub fn leaky_relu_backward<S: Scalar>(x: &Array2<S>, dy: &Array2<S>, slope: S) -> Array2<S> {
    Zip::from(x)
        .and(dy)
        .map_collect(|&v, &g| if v > S::zero() { g } else { slope * g })
}

/// `ln(1 + e^x)`, computed without overflow.
pub fn softplus<S: Scalar>(x: &Array2<S>) -> Array2<S> {
    x.mapv(|v| v.max(S::zero()) + (-v.abs()).exp().ln_1p())
}

/// Backward of [`softplus`]: `dy * sigmoid(x)`.
pub fn softplus_backward<S: Scalar>(x: &Array2<S>, dy: &Array2<S>) -> Array2<S> {
    Zip::from(x).and(dy).map_collect(|&v, &g| {
        let sig = if v >= S::zero() {
            S::one() / (S::one() + (-v).exp())
        } else {
            let e = v.exp();
            e / (S::one() + e)
        };
        g * sig
    })
}
