//! Batch normalization over the trailing (channel) axis. Training mode uses
//! per-batch statistics; inference applies the frozen moving statistics as a
//! per-channel affine map.

use super::NnError;
use crate::tensor::{Element, Shape, Tensor};

/// Per-channel batch statistics captured by the training-mode forward pass,
/// needed again by backward and by the moving-average update.
#[derive(Debug, Clone)]
pub struct BatchStats<E: Element> {
    pub mean: Vec<E>,
    /// Biased variance (divides by N).
    pub var: Vec<E>,
    pub inv_std: Vec<E>,
}

fn channel_layout(shape: &Shape) -> (usize, usize) {
    // (rows, channels): normalize over every axis but the last
    let dims = shape.dims();
    let c = *dims.last().expect("batchnorm input needs rank >= 2");
    let rows = shape.len() / c;
    (rows, c)
}

fn batch_of(shape: &Shape) -> usize {
    shape.dim(0)
}

/// Normalizes each channel to zero mean / unit variance over the batch, then
/// applies the learnable scale and shift.
pub fn batchnorm_train_forward<E: Element>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    epsilon: f64,
) -> Result<(Tensor<E>, BatchStats<E>), NnError> {
    let batch = batch_of(x.shape());
    if batch < 2 {
        return Err(NnError::BatchTooSmall { batch });
    }
    let (rows, c) = channel_layout(x.shape());
    debug_assert_eq!(gamma.len(), c);
    debug_assert_eq!(beta.len(), c);
    let xd = x.data();
    let inv_n = E::from_f64(1.0 / rows as f64);

    let mut mean = vec![E::zero(); c];
    for r in 0..rows {
        let row = &xd[r * c..(r + 1) * c];
        for (m, &v) in mean.iter_mut().zip(row.iter()) {
            *m = *m + v;
        }
    }
    for m in &mut mean {
        *m = *m * inv_n;
    }

    let mut var = vec![E::zero(); c];
    for r in 0..rows {
        let row = &xd[r * c..(r + 1) * c];
        for ci in 0..c {
            let d = row[ci] - mean[ci];
            var[ci] = var[ci] + d * d;
        }
    }
    for v in &mut var {
        *v = *v * inv_n;
    }

    let eps = E::from_f64(epsilon);
    let inv_std: Vec<E> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
    debug_assert!(inv_std.iter().all(|v| v.is_finite()), "variance underflow past epsilon");

    let g = gamma.data();
    let b = beta.data();
    let mut out = vec![E::zero(); xd.len()];
    for r in 0..rows {
        let row = &xd[r * c..(r + 1) * c];
        let orow = &mut out[r * c..(r + 1) * c];
        for ci in 0..c {
            let xhat = (row[ci] - mean[ci]) * inv_std[ci];
            orow[ci] = g[ci] * xhat + b[ci];
        }
    }
    Ok((
        Tensor::from_vec(x.shape().clone(), out).unwrap(),
        BatchStats { mean, var, inv_std },
    ))
}

/// Standard batch-statistics backward: accounts for the dependence of the
/// batch mean and variance on every element.
pub fn batchnorm_train_backward<E: Element>(
    grad_y: &Tensor<E>,
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    stats: &BatchStats<E>,
) -> (Tensor<E>, Tensor<E>, Tensor<E>) {
    let (rows, c) = channel_layout(x.shape());
    let xd = x.data();
    let gy = grad_y.data();
    let g = gamma.data();
    let inv_n = E::from_f64(1.0 / rows as f64);

    let mut sum_gy = vec![E::zero(); c];
    let mut sum_gy_xhat = vec![E::zero(); c];
    for r in 0..rows {
        let xrow = &xd[r * c..(r + 1) * c];
        let grow = &gy[r * c..(r + 1) * c];
        for ci in 0..c {
            let xhat = (xrow[ci] - stats.mean[ci]) * stats.inv_std[ci];
            sum_gy[ci] = sum_gy[ci] + grow[ci];
            sum_gy_xhat[ci] = sum_gy_xhat[ci] + grow[ci] * xhat;
        }
    }

    let mut gx = vec![E::zero(); xd.len()];
    for r in 0..rows {
        let xrow = &xd[r * c..(r + 1) * c];
        let grow = &gy[r * c..(r + 1) * c];
        let orow = &mut gx[r * c..(r + 1) * c];
        for ci in 0..c {
            let xhat = (xrow[ci] - stats.mean[ci]) * stats.inv_std[ci];
            let n = E::from_f64(rows as f64);
            let t = n * grow[ci] - sum_gy[ci] - xhat * sum_gy_xhat[ci];
            orow[ci] = g[ci] * stats.inv_std[ci] * inv_n * t;
        }
    }

    let grad_gamma = Tensor::from_vec(gamma.shape().clone(), sum_gy_xhat).unwrap();
    let grad_beta = Tensor::from_vec(gamma.shape().clone(), sum_gy).unwrap();
    (Tensor::from_vec(x.shape().clone(), gx).unwrap(), grad_gamma, grad_beta)
}

/// Frozen-statistics forward: a per-channel affine map.
pub fn batchnorm_infer_forward<E: Element>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    moving_mean: &[E],
    moving_var: &[E],
    epsilon: f64,
) -> Tensor<E> {
    let (rows, c) = channel_layout(x.shape());
    let eps = E::from_f64(epsilon);
    let inv_std: Vec<E> = moving_var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
    let xd = x.data();
    let g = gamma.data();
    let b = beta.data();
    let mut out = vec![E::zero(); xd.len()];
    for r in 0..rows {
        let row = &xd[r * c..(r + 1) * c];
        let orow = &mut out[r * c..(r + 1) * c];
        for ci in 0..c {
            orow[ci] = g[ci] * (row[ci] - moving_mean[ci]) * inv_std[ci] + b[ci];
        }
    }
    Tensor::from_vec(x.shape().clone(), out).unwrap()
}

pub fn batchnorm_infer_backward<E: Element>(
    grad_y: &Tensor<E>,
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    moving_mean: &[E],
    moving_var: &[E],
    epsilon: f64,
) -> (Tensor<E>, Tensor<E>, Tensor<E>) {
    let (rows, c) = channel_layout(x.shape());
    let eps = E::from_f64(epsilon);
    let inv_std: Vec<E> = moving_var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
    let xd = x.data();
    let gy = grad_y.data();
    let g = gamma.data();
    let mut gx = vec![E::zero(); xd.len()];
    let mut sum_gy = vec![E::zero(); c];
    let mut sum_gy_xhat = vec![E::zero(); c];
    for r in 0..rows {
        let xrow = &xd[r * c..(r + 1) * c];
        let grow = &gy[r * c..(r + 1) * c];
        let orow = &mut gx[r * c..(r + 1) * c];
        for ci in 0..c {
            let xhat = (xrow[ci] - moving_mean[ci]) * inv_std[ci];
            sum_gy[ci] = sum_gy[ci] + grow[ci];
            sum_gy_xhat[ci] = sum_gy_xhat[ci] + grow[ci] * xhat;
            orow[ci] = grow[ci] * g[ci] * inv_std[ci];
        }
    }
    let grad_gamma = Tensor::from_vec(gamma.shape().clone(), sum_gy_xhat).unwrap();
    let grad_beta = Tensor::from_vec(gamma.shape().clone(), sum_gy).unwrap();
    (Tensor::from_vec(x.shape().clone(), gx).unwrap(), grad_gamma, grad_beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{shape, Prng};

    #[test]
    fn train_mode_normalizes_per_channel() {
        let mut p = Prng::new(9);
        let x = Tensor::<f64>::gaussian(shape(&[8, 3, 3, 4]), 2.0, 3.0, &mut p).unwrap();
        let gamma = Tensor::<f64>::constant(shape(&[4]), 1.0);
        let beta = Tensor::<f64>::zeros(shape(&[4]));
        let (y, _) = batchnorm_train_forward(&x, &gamma, &beta, 1e-9).unwrap();
        let (rows, c) = (8 * 9, 4);
        for ci in 0..c {
            let vals: Vec<f64> = (0..rows).map(|r| y.data()[r * c + ci]).collect();
            let mean: f64 = vals.iter().sum::<f64>() / rows as f64;
            let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / rows as f64;
            assert!(mean.abs() < 1e-6, "channel mean {mean}");
            assert!((var - 1.0).abs() < 1e-5, "channel var {var}");
        }
    }

    #[test]
    fn constant_channel_maps_to_zero() {
        let x = Tensor::<f64>::constant(shape(&[4, 2, 2, 1]), 5.0);
        let gamma = Tensor::<f64>::constant(shape(&[1]), 1.0);
        let beta = Tensor::<f64>::zeros(shape(&[1]));
        let (y, _) = batchnorm_train_forward(&x, &gamma, &beta, 1e-3).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn batch_of_one_rejected_in_train_mode() {
        let x = Tensor::<f64>::zeros(shape(&[1, 2, 2, 1]));
        let gamma = Tensor::<f64>::constant(shape(&[1]), 1.0);
        let beta = Tensor::<f64>::zeros(shape(&[1]));
        assert!(matches!(
            batchnorm_train_forward(&x, &gamma, &beta, 1e-3),
            Err(NnError::BatchTooSmall { batch: 1 })
        ));
    }

    #[test]
    fn infer_mode_is_affine() {
        // with the shift folded out: bn(a) + bn(b) - bn(0) = bn(a + b)
        let mut p = Prng::new(4);
        let gamma = Tensor::<f64>::gaussian(shape(&[3]), 1.0, 0.2, &mut p).unwrap();
        let beta = Tensor::<f64>::gaussian(shape(&[3]), 0.0, 0.5, &mut p).unwrap();
        let mean: Vec<f64> = vec![0.3, -0.2, 0.7];
        let var: Vec<f64> = vec![1.2, 0.8, 0.5];
        let a = Tensor::<f64>::gaussian(shape(&[2, 2, 2, 3]), 0.0, 1.0, &mut p).unwrap();
        let b = Tensor::<f64>::gaussian(shape(&[2, 2, 2, 3]), 0.0, 1.0, &mut p).unwrap();
        let bn = |t: &Tensor<f64>| batchnorm_infer_forward(t, &gamma, &beta, &mean, &var, 1e-3);
        let zero = Tensor::<f64>::zeros(shape(&[2, 2, 2, 3]));
        let lhs: Vec<f64> = bn(&a)
            .data()
            .iter()
            .zip(bn(&b).data().iter())
            .zip(bn(&zero).data().iter())
            .map(|((x, y), z)| x + y - z)
            .collect();
        let sum = a.map_zip(&b, crate::tensor::BinOp::Add).unwrap();
        let rhs = bn(&sum);
        for (l, r) in lhs.iter().zip(rhs.data().iter()) {
            assert!((l - r).abs() < 1e-10);
        }
    }

    #[test]
    fn moving_stats_geometric_convergence() {
        // shadow <- m*shadow + (1-m)*batch keeps gap = m^n * initial gap
        let momentum = 0.9f64;
        let batch_mean = 4.0f64;
        let mut moving = 0.0f64;
        let n = 20;
        for _ in 0..n {
            moving = momentum * moving + (1.0 - momentum) * batch_mean;
        }
        let expected_gap = momentum.powi(n) * batch_mean;
        assert!(((batch_mean - moving) - expected_gap).abs() < 1e-12);
    }
}
