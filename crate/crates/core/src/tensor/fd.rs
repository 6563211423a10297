use crate::tensor::Tensor;

/// Central-difference gradient of `f` at `theta`, one coordinate at a time.
pub fn finite_diff_grad(
    mut f: impl FnMut(&Tensor<f64>) -> f64,
    theta: &Tensor<f64>,
    eps: f64,
) -> Tensor<f64> {
    let coords: Vec<usize> = (0..theta.numel()).collect();
    let values = finite_diff_at(&mut f, theta, eps, &coords);
    Tensor {
        shape: theta.shape().to_vec(),
        data: values,
    }
}

/// Central differences restricted to the listed flat coordinates.
pub fn finite_diff_at(
    mut f: impl FnMut(&Tensor<f64>) -> f64,
    theta: &Tensor<f64>,
    eps: f64,
    coords: &[usize],
) -> Vec<f64> {
    assert!(eps > 0.0, "finite-difference step must be positive");
    let mut probe = theta.clone();
    coords
        .iter()
        .map(|&i| {
            let x = theta.data()[i];
            probe.data_mut()[i] = x + eps;
            let up = f(&probe);
            probe.data_mut()[i] = x - eps;
            let down = f(&probe);
            probe.data_mut()[i] = x;
            (up - down) / (2.0 * eps)
        })
        .collect()
}
