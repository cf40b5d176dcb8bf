//! Fully connected layer (flattens any non-batch extent) and ReLU.

use super::conv::matmul;
use crate::tensor::{Element, Shape, Tensor};

/// `x: [B, ...] -> [B, K]` with weights `[D, K]` where `D` is the flattened
/// per-example extent.
pub fn fc_forward<E: Element>(
    x: &Tensor<E>,
    weights: &Tensor<E>,
    bias: Option<&Tensor<E>>,
) -> Tensor<E> {
    let b = x.shape().dim(0);
    let d = x.len() / b;
    let wd = weights.shape().dims();
    debug_assert_eq!(wd[0], d, "fc weight rows must match flattened input");
    let k = wd[1];
    let mut out = vec![E::zero(); b * k];
    matmul(x.data(), weights.data(), b, d, k, &mut out);
    if let Some(bt) = bias {
        for r in 0..b {
            let orow = &mut out[r * k..(r + 1) * k];
            for (o, &v) in orow.iter_mut().zip(bt.data().iter()) {
                *o = *o + v;
            }
        }
    }
    Tensor::from_vec(Shape::new(&[b, k]).unwrap(), out).unwrap()
}

pub fn fc_backward<E: Element>(
    grad_out: &Tensor<E>,
    x: &Tensor<E>,
    weights: &Tensor<E>,
    use_bias: bool,
) -> (Tensor<E>, Tensor<E>, Option<Tensor<E>>) {
    let b = x.shape().dim(0);
    let d = x.len() / b;
    let k = weights.shape().dim(1);
    let g = grad_out.data();
    let xd = x.data();
    let wd = weights.data();

    // grad_w[dd][j] = sum_r x[r][dd] * g[r][j]
    let mut gw = vec![E::zero(); d * k];
    for r in 0..b {
        let xrow = &xd[r * d..(r + 1) * d];
        let grow = &g[r * k..(r + 1) * k];
        for (dd, &xv) in xrow.iter().enumerate() {
            let wrow = &mut gw[dd * k..(dd + 1) * k];
            for (o, &gv) in wrow.iter_mut().zip(grow.iter()) {
                *o = *o + xv * gv;
            }
        }
    }

    // grad_x[r][dd] = sum_j g[r][j] * w[dd][j]
    let mut gx = vec![E::zero(); b * d];
    for r in 0..b {
        let grow = &g[r * k..(r + 1) * k];
        let xrow = &mut gx[r * d..(r + 1) * d];
        for (dd, o) in xrow.iter_mut().enumerate() {
            let wrow = &wd[dd * k..(dd + 1) * k];
            let mut acc = E::zero();
            for (&gv, &wv) in grow.iter().zip(wrow.iter()) {
                acc = acc + gv * wv;
            }
            *o = acc;
        }
    }

    let gb = if use_bias {
        let mut acc = vec![E::zero(); k];
        for r in 0..b {
            let grow = &g[r * k..(r + 1) * k];
            for (o, &gv) in acc.iter_mut().zip(grow.iter()) {
                *o = *o + gv;
            }
        }
        Some(Tensor::from_vec(Shape::new(&[k]).unwrap(), acc).unwrap())
    } else {
        None
    };

    (
        Tensor::from_vec(x.shape().clone(), gx).unwrap(),
        Tensor::from_vec(weights.shape().clone(), gw).unwrap(),
        gb,
    )
}

pub fn relu_forward<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    x.map(|v| if v > E::zero() { v } else { E::zero() })
}

/// Subgradient zero at the kink.
pub fn relu_backward<E: Element>(grad_out: &Tensor<E>, x: &Tensor<E>) -> Tensor<E> {
    let data = grad_out
        .data()
        .iter()
        .zip(x.data().iter())
        .map(|(&g, &v)| if v > E::zero() { g } else { E::zero() })
        .collect();
    Tensor::from_vec(x.shape().clone(), data).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::shape;

    #[test]
    fn fc_forward_matches_hand_calc() {
        let x = Tensor::<f64>::from_f64s(shape(&[1, 3]), &[1.0, 2.0, 3.0]).unwrap();
        let w = Tensor::<f64>::from_f64s(shape(&[3, 2]), &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let b = Tensor::<f64>::from_f64s(shape(&[2]), &[10.0, 20.0]).unwrap();
        let y = fc_forward(&x, &w, Some(&b));
        assert_eq!(y.data(), &[1.0 + 3.0 + 10.0, 2.0 + 3.0 + 20.0]);
    }

    #[test]
    fn fc_flattens_rank4_input() {
        let x = Tensor::<f64>::constant(shape(&[2, 1, 1, 3]), 1.0);
        let w = Tensor::<f64>::constant(shape(&[3, 4]), 0.5);
        let y = fc_forward(&x, &w, None);
        assert_eq!(y.shape().dims(), &[2, 4]);
        assert!(y.data().iter().all(|&v| (v - 1.5).abs() < 1e-12));
    }

    #[test]
    fn relu_is_idempotent() {
        let x = Tensor::<f64>::from_f64s(shape(&[4]), &[-1.0, 0.0, 2.0, -0.5]).unwrap();
        let once = relu_forward(&x);
        let twice = relu_forward(&once);
        assert_eq!(once.data(), twice.data());
        assert_eq!(once.data(), &[0.0, 0.0, 2.0, 0.0]);
    }
}
