//! Central finite differences over flat parameter slices. Test oracles build
//! on this; it is independent of any analytic gradient path.

/// Central-difference gradient of `f` at `x`.
pub fn numeric_grad<F>(mut f: F, x: &[f64], eps: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut buf = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = buf[i];
        buf[i] = orig + eps;
        let fp = f(&buf);
        buf[i] = orig - eps;
        let fm = f(&buf);
        buf[i] = orig;
        grad[i] = (fp - fm) / (2.0 * eps);
    }
    grad
}

/// Max relative error between two gradients, with an absolute floor so that
/// near-zero components compare on an absolute scale.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
