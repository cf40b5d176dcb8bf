//! Independent reference implementations used to cross-check the fast
//! kernels: a naive nested-loop convolution, a compensated summation, and a
//! central finite-difference harness. These deliberately share no code with
//! the production paths in [`crate::nnops`].

use crate::nnops::{ConvAttrs, Padding};
use crate::tensor::{Element, Shape, Tensor, TensorError};

/// Kahan-Babuska compensated sum at f64.
pub fn compensated_sum(values: &[f64]) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for &v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Direct convolution by sliding nested loops, one output element at a time.
///
/// Input `[B,H,W,Cin]`, weights `[kh,kw,Cin,Cout]`, optional bias `[Cout]`.
/// Padding positions contribute zero.
pub fn naive_conv2d<E: Element>(
    input: &Tensor<E>,
    weights: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    attrs: &ConvAttrs,
) -> Result<Tensor<E>, TensorError> {
    let (b, h, w, cin) = input.shape().nhwc().expect("rank-4 input");
    let wd = weights.shape().dims();
    assert_eq!(wd, [attrs.kernel_h, attrs.kernel_w, cin, attrs.out_channels]);
    let (kh, kw, stride) = (attrs.kernel_h, attrs.kernel_w, attrs.stride);
    let (out_h, pad_top) = span(h, kh, stride, attrs.padding);
    let (out_w, pad_left) = span(w, kw, stride, attrs.padding);
    let cout = attrs.out_channels;

    let x = input.data();
    let k = weights.data();
    let mut out = vec![E::zero(); b * out_h * out_w * cout];
    for bi in 0..b {
        for oy in 0..out_h {
            for ox in 0..out_w {
                for co in 0..cout {
                    let mut acc = E::zero();
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad_top as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad_left as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                let xv = x[((bi * h + iy as usize) * w + ix as usize) * cin + ci];
                                let kv = k[((ky * kw + kx) * cin + ci) * cout + co];
                                acc = acc + xv * kv;
                            }
                        }
                    }
                    if let Some(bt) = bias {
                        acc = acc + bt.data()[co];
                    }
                    out[((bi * out_h + oy) * out_w + ox) * cout + co] = acc;
                }
            }
        }
    }
    Tensor::from_vec(Shape::new(&[b, out_h, out_w, cout])?, out)
}

/// Counts the scalar multiplications a naive run of `naive_conv2d` performs;
/// used to cross-check the static cost model on small configurations.
pub fn naive_conv2d_mult_count(
    batch: usize,
    h: usize,
    w: usize,
    cin: usize,
    attrs: &ConvAttrs,
) -> u64 {
    let (out_h, pad_top) = span(h, attrs.kernel_h, attrs.stride, attrs.padding);
    let (out_w, pad_left) = span(w, attrs.kernel_w, attrs.stride, attrs.padding);
    let mut count = 0u64;
    for oy in 0..out_h {
        for ox in 0..out_w {
            for ky in 0..attrs.kernel_h {
                let iy = (oy * attrs.stride + ky) as isize - pad_top as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..attrs.kernel_w {
                    let ix = (ox * attrs.stride + kx) as isize - pad_left as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    count += cin as u64;
                }
            }
        }
    }
    count * (batch * attrs.out_channels) as u64
}

fn span(input: usize, kernel: usize, stride: usize, padding: Padding) -> (usize, usize) {
    match padding {
        Padding::Valid => ((input - kernel) / stride + 1, 0),
        Padding::Same => {
            let out = input.div_ceil(stride);
            let pad_total = ((out - 1) * stride + kernel).saturating_sub(input);
            (out, pad_total / 2)
        }
    }
}

/// Central finite-difference gradient of a scalar function, one coordinate
/// at a time: `(f(x+h) - f(x-h)) / 2h`.
pub fn finite_difference_grad<F>(x: &[f64], h: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Largest relative discrepancy between an analytic gradient and its
/// finite-difference estimate. The denominator is clamped at 1 so the
/// measure degrades gracefully to an absolute error near zero.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric.iter()) {
        let denom = a.abs().max(n.abs()).max(1.0);
        worst = worst.max((a - n).abs() / denom);
    }
    worst
}
