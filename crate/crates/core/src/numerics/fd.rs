use super::matrix::Matrix;

/// Central-difference gradient of a scalar function of a matrix.
pub fn finite_difference_gradient(mut f: impl FnMut(&Matrix) -> f64, x: &Matrix, h: f64) -> Matrix {
    assert!(h > 0.0, "step must be positive");
    let mut probe = x.clone();
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for idx in 0..x.as_slice().len() {
        let orig = probe.as_slice()[idx];
        probe.as_mut_slice()[idx] = orig + h;
        let up = f(&probe);
        probe.as_mut_slice()[idx] = orig - h;
        let down = f(&probe);
        probe.as_mut_slice()[idx] = orig;
        out.as_mut_slice()[idx] = (up - down) / (2.0 * h);
    }
    out
}
