//! Central finite-difference gradient checking (use in `f64`).

/// Per-coordinate relative errors between an analytic gradient and central differences.
///
/// The step for coordinate `i` is `1e-5 * max(1, |x_i|)`. Errors are measured
/// relative to `max(|analytic_i|, |numeric_i|, 1e-3 * max_j |analytic_j|)` so
/// that coordinates with vanishing gradient do not dominate.
pub fn relative_errors(f: impl Fn(&[f64]) -> f64, analytic: &[f64], x: &[f64]) -> Vec<f64> {
    assert_eq!(analytic.len(), x.len(), "gradient and input lengths differ");
    let scale = analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let floor = (1e-3 * scale).max(1e-12);
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = 1e-5 * x[i].abs().max(1.0);
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            let numeric = (up - down) / (2.0 * h);
            let denom = analytic[i].abs().max(numeric.abs()).max(floor);
            (analytic[i] - numeric).abs() / denom
        })
        .collect()
}

/// Maximum relative error between `analytic` and central differences of `f` at `x`.
pub fn grad_check(f: impl Fn(&[f64]) -> f64, analytic: &[f64], x: &[f64]) -> f64 {
    relative_errors(f, analytic, x).into_iter().fold(0.0, f64::max)
}
