//! Numerically stable softmax and the cross-entropy loss against arbitrary
//! target distributions. The loss is the batch mean of `-sum_k q_k ln p_k`;
//! its gradient with respect to the logits is `(p - q) / B`.

use super::NnError;
use crate::tensor::{Element, Shape, Tensor};

const ROW_SUM_TOLERANCE: f64 = 1e-6;

/// Max-subtracted softmax over each row of `[B, K]`.
pub fn softmax_rows<E: Element>(logits: &Tensor<E>) -> Tensor<E> {
    let dims = logits.shape().dims();
    debug_assert_eq!(dims.len(), 2);
    let (b, k) = (dims[0], dims[1]);
    let z = logits.data();
    let mut out = vec![E::zero(); b * k];
    for r in 0..b {
        let row = &z[r * k..(r + 1) * k];
        let m = row.iter().cloned().fold(E::neg_infinity(), |a, v| if v > a { v } else { a });
        let mut denom = E::zero();
        let orow = &mut out[r * k..(r + 1) * k];
        for (o, &v) in orow.iter_mut().zip(row.iter()) {
            let e = (v - m).exp();
            *o = e;
            denom = denom + e;
        }
        let inv = denom.recip();
        for o in orow.iter_mut() {
            *o = *o * inv;
        }
    }
    Tensor::from_vec(logits.shape().clone(), out).unwrap()
}

fn validate_targets<E: Element>(targets: &Tensor<E>) -> Result<(), NnError> {
    let dims = targets.shape().dims();
    let (b, k) = (dims[0], dims[1]);
    let q = targets.data();
    for r in 0..b {
        let row = &q[r * k..(r + 1) * k];
        let mut sum = 0.0f64;
        for &v in row {
            let v = v.to_f64();
            if v < 0.0 {
                return Err(NnError::InvalidTargets {
                    row: r,
                    reason: format!("negative mass {v}"),
                });
            }
            sum += v;
        }
        if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
            return Err(NnError::InvalidTargets { row: r, reason: format!("row sums to {sum}") });
        }
    }
    Ok(())
}

/// Returns the scalar batch-mean loss together with the softmax
/// probabilities (cached for the backward pass).
pub fn softmax_xent_forward<E: Element>(
    logits: &Tensor<E>,
    targets: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>), NnError> {
    let dims = logits.shape().dims();
    debug_assert_eq!(dims.len(), 2, "logits must be [B, K]");
    if logits.shape() != targets.shape() {
        return Err(NnError::Tensor(crate::tensor::TensorError::ShapeMismatch {
            left: logits.shape().dims().to_vec(),
            right: targets.shape().dims().to_vec(),
        }));
    }
    validate_targets(targets)?;
    let (b, k) = (dims[0], dims[1]);
    let z = logits.data();
    let q = targets.data();
    let probs = softmax_rows(logits);

    // log p computed from the shifted logits directly, not ln(softmax),
    // to stay accurate for very negative log-probabilities.
    let mut loss = E::zero();
    for r in 0..b {
        let row = &z[r * k..(r + 1) * k];
        let qrow = &q[r * k..(r + 1) * k];
        let m = row.iter().cloned().fold(E::neg_infinity(), |a, v| if v > a { v } else { a });
        let mut denom = E::zero();
        for &v in row {
            denom = denom + (v - m).exp();
        }
        let lse = m + denom.ln();
        for (&zv, &qv) in row.iter().zip(qrow.iter()) {
            if qv > E::zero() {
                loss = loss - qv * (zv - lse);
            }
        }
    }
    loss = loss * E::from_f64(1.0 / b as f64);
    Ok((Tensor::scalar(loss.to_f64()), probs))
}

/// `upstream * (p - q) / B`, matching the batch-mean loss.
pub fn softmax_xent_backward<E: Element>(
    probs: &Tensor<E>,
    targets: &Tensor<E>,
    upstream: E,
) -> Tensor<E> {
    let b = probs.shape().dim(0);
    let scale = upstream * E::from_f64(1.0 / b as f64);
    let data = probs
        .data()
        .iter()
        .zip(targets.data().iter())
        .map(|(&p, &q)| (p - q) * scale)
        .collect();
    Tensor::from_vec(probs.shape().clone(), data).unwrap()
}
