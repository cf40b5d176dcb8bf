//! Convolution lowered to a patch-gather (im2col) followed by a matrix
//! multiply. Weights are stored `[kh, kw, Cin, Cout]` row-major, so the
//! flattened weight buffer already is the `[kh*kw*Cin, Cout]` matrix.

use super::{ConvAttrs, NnError};
use crate::tensor::{Element, Shape, Tensor};

/// `out += a * b` for row-major `a: [m,k]`, `b: [k,n]`. The i-k-j loop order
/// keeps both `b` and `out` rows streaming; accumulation order is fixed.
pub fn matmul<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o = *o + av * bv;
            }
        }
    }
}

/// Gathers conv patches into a `[B*H'*W', kh*kw*Cin]` row-major matrix.
/// Padded positions gather zero.
fn im2col<E: Element>(
    x: &[E],
    b: usize,
    h: usize,
    w: usize,
    cin: usize,
    attrs: &ConvAttrs,
    out_h: usize,
    out_w: usize,
) -> Vec<E> {
    let (kh, kw, stride) = (attrs.kernel_h, attrs.kernel_w, attrs.stride);
    let pad_top = attrs.padding.pad_before(h, kh, stride);
    let pad_left = attrs.padding.pad_before(w, kw, stride);
    let cols = kh * kw * cin;
    let mut m = vec![E::zero(); b * out_h * out_w * cols];
    let mut row = 0usize;
    for bi in 0..b {
        let xb = &x[bi * h * w * cin..(bi + 1) * h * w * cin];
        for oy in 0..out_h {
            for ox in 0..out_w {
                let dst = &mut m[row * cols..(row + 1) * cols];
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
                        let src = ((iy as usize * w) + ix as usize) * cin;
                        let d = (ky * kw + kx) * cin;
                        dst[d..d + cin].copy_from_slice(&xb[src..src + cin]);
                    }
                }
                row += 1;
            }
        }
    }
    m
}

/// Scatter-add of patch-space gradients back onto the input grid; the
/// inverse of `im2col` with accumulation in ascending patch order.
fn col2im_add<E: Element>(
    grad_patches: &[E],
    b: usize,
    h: usize,
    w: usize,
    cin: usize,
    attrs: &ConvAttrs,
    out_h: usize,
    out_w: usize,
    grad_x: &mut [E],
) {
    let (kh, kw, stride) = (attrs.kernel_h, attrs.kernel_w, attrs.stride);
    let pad_top = attrs.padding.pad_before(h, kh, stride);
    let pad_left = attrs.padding.pad_before(w, kw, stride);
    let cols = kh * kw * cin;
    let mut row = 0usize;
    for bi in 0..b {
        let gb = &mut grad_x[bi * h * w * cin..(bi + 1) * h * w * cin];
        for oy in 0..out_h {
            for ox in 0..out_w {
                let src_row = &grad_patches[row * cols..(row + 1) * cols];
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
                        let dst = ((iy as usize * w) + ix as usize) * cin;
                        let s = (ky * kw + kx) * cin;
                        for c in 0..cin {
                            gb[dst + c] = gb[dst + c] + src_row[s + c];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn check_weights<E: Element>(
    input: &Tensor<E>,
    weights: &Tensor<E>,
    attrs: &ConvAttrs,
) -> Result<(usize, usize, usize, usize), NnError> {
    let (b, h, w, cin) = input.shape().nhwc().expect("conv input must be rank 4");
    let expected = vec![attrs.kernel_h, attrs.kernel_w, cin, attrs.out_channels];
    let got = weights.shape().dims();
    if got.len() != 4 || got[0] != attrs.kernel_h || got[1] != attrs.kernel_w || got[3] != attrs.out_channels {
        return Err(NnError::WeightShape { expected, got: got.to_vec() });
    }
    if got[2] != cin {
        return Err(NnError::ChannelMismatch { input: cin, weights: got[2] });
    }
    Ok((b, h, w, cin))
}

/// Each output value is the dot product of one kernel window with the input
/// patch under it, plus an optional per-channel bias.
pub fn conv2d_forward<E: Element>(
    input: &Tensor<E>,
    weights: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    attrs: &ConvAttrs,
) -> Result<Tensor<E>, NnError> {
    let (b, h, w, cin) = check_weights(input, weights, attrs)?;
    let (out_h, out_w) = attrs.out_extent(h, w)?;
    let cout = attrs.out_channels;
    let rows = b * out_h * out_w;
    let cols = attrs.kernel_h * attrs.kernel_w * cin;

    let patches = im2col(input.data(), b, h, w, cin, attrs, out_h, out_w);
    let mut out = vec![E::zero(); rows * cout];
    matmul(&patches, weights.data(), rows, cols, cout, &mut out);
    if let Some(bt) = bias {
        debug_assert_eq!(bt.len(), cout);
        let bd = bt.data();
        for r in 0..rows {
            let orow = &mut out[r * cout..(r + 1) * cout];
            for (o, &bv) in orow.iter_mut().zip(bd.iter()) {
                *o = *o + bv;
            }
        }
    }
    let shape = Shape::new(&[b, out_h, out_w, cout]).expect("conv output shape");
    Ok(Tensor::from_vec(shape, out).expect("conv output buffer"))
}

pub struct ConvGrads<E: Element> {
    pub input: Tensor<E>,
    pub weights: Tensor<E>,
    pub bias: Option<Tensor<E>>,
}

/// Gradients with the same shapes as the corresponding forward arguments.
/// The patch matrix is regathered rather than cached.
pub fn conv2d_backward<E: Element>(
    grad_out: &Tensor<E>,
    input: &Tensor<E>,
    weights: &Tensor<E>,
    attrs: &ConvAttrs,
) -> Result<ConvGrads<E>, NnError> {
    let (b, h, w, cin) = check_weights(input, weights, attrs)?;
    let (out_h, out_w) = attrs.out_extent(h, w)?;
    let cout = attrs.out_channels;
    debug_assert_eq!(grad_out.shape().dims(), &[b, out_h, out_w, cout]);

    let rows = b * out_h * out_w;
    let cols = attrs.kernel_h * attrs.kernel_w * cin;
    let g = grad_out.data();
    let patches = im2col(input.data(), b, h, w, cin, attrs, out_h, out_w);

    // grad_w[c][j] = sum_r patches[r][c] * g[r][j]
    let mut grad_w = vec![E::zero(); cols * cout];
    for r in 0..rows {
        let prow = &patches[r * cols..(r + 1) * cols];
        let grow = &g[r * cout..(r + 1) * cout];
        for (c, &pv) in prow.iter().enumerate() {
            let wrow = &mut grad_w[c * cout..(c + 1) * cout];
            for (o, &gv) in wrow.iter_mut().zip(grow.iter()) {
                *o = *o + pv * gv;
            }
        }
    }

    // grad_patches[r][c] = sum_j g[r][j] * w[c][j]
    let wdat = weights.data();
    let mut grad_patches = vec![E::zero(); rows * cols];
    for r in 0..rows {
        let grow = &g[r * cout..(r + 1) * cout];
        let prow = &mut grad_patches[r * cols..(r + 1) * cols];
        for (c, o) in prow.iter_mut().enumerate() {
            let wrow = &wdat[c * cout..(c + 1) * cout];
            let mut acc = E::zero();
            for (&gv, &wv) in grow.iter().zip(wrow.iter()) {
                acc = acc + gv * wv;
            }
            *o = acc;
        }
    }

    let mut grad_x = vec![E::zero(); input.len()];
    col2im_add(&grad_patches, b, h, w, cin, attrs, out_h, out_w, &mut grad_x);

    let grad_bias = if attrs.use_bias {
        let mut gb = vec![E::zero(); cout];
        for r in 0..rows {
            let grow = &g[r * cout..(r + 1) * cout];
            for (o, &gv) in gb.iter_mut().zip(grow.iter()) {
                *o = *o + gv;
            }
        }
        Some(Tensor::from_vec(Shape::new(&[cout]).unwrap(), gb).unwrap())
    } else {
        None
    };

    Ok(ConvGrads {
        input: Tensor::from_vec(input.shape().clone(), grad_x).unwrap(),
        weights: Tensor::from_vec(weights.shape().clone(), grad_w).unwrap(),
        bias: grad_bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnops::Padding;
    use crate::oracle::naive_conv2d;
    use crate::tensor::{shape, Prng};

    fn rand_tensor(dims: &[usize], prng: &mut Prng) -> Tensor<f64> {
        Tensor::gaussian(shape(dims), 0.0, 1.0, prng).unwrap()
    }

    #[test]
    fn pointwise_conv_scales() {
        let x = Tensor::<f64>::from_f64s(shape(&[1, 2, 2, 1]), &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::<f64>::from_f64s(shape(&[1, 1, 1, 1]), &[2.0]).unwrap();
        let attrs = ConvAttrs::new(1, 1, 1, Padding::Valid, 1, false);
        let y = conv2d_forward(&x, &w, None, &attrs).unwrap();
        assert_eq!(y.data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn all_ones_window_sums() {
        let x = Tensor::<f64>::constant(shape(&[1, 3, 3, 1]), 1.0);
        let w = Tensor::<f64>::constant(shape(&[3, 3, 1, 1]), 1.0);
        let attrs = ConvAttrs::new(3, 3, 1, Padding::Valid, 1, false);
        let y = conv2d_forward(&x, &w, None, &attrs).unwrap();
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn matches_naive_oracle() {
        let mut prng = Prng::new(11);
        for &(padding, stride, kh, kw) in &[
            (Padding::Valid, 1, 3, 3),
            (Padding::Valid, 2, 3, 3),
            (Padding::Same, 1, 3, 3),
            (Padding::Same, 2, 5, 5),
            (Padding::Same, 1, 1, 7),
            (Padding::Valid, 1, 3, 1),
        ] {
            let attrs = ConvAttrs::new(kh, kw, stride, padding, 3, true);
            let x = rand_tensor(&[2, 8, 9, 2], &mut prng);
            let w = rand_tensor(&[kh, kw, 2, 3], &mut prng);
            let b = rand_tensor(&[3], &mut prng);
            let fast = conv2d_forward(&x, &w, Some(&b), &attrs).unwrap();
            let slow = naive_conv2d(&x, &w, Some(&b), &attrs).unwrap();
            assert_eq!(fast.shape(), slow.shape());
            for (a, o) in fast.data().iter().zip(slow.data().iter()) {
                assert!((a - o).abs() < 1e-12, "mismatch {a} vs {o} for {attrs:?}");
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut prng = Prng::new(5);
        let attrs = ConvAttrs::new(3, 3, 1, Padding::Valid, 2, true);
        let x = rand_tensor(&[1, 5, 5, 2], &mut prng);
        let w = rand_tensor(&[3, 3, 2, 2], &mut prng);
        let g = Tensor::<f64>::zeros(shape(&[1, 3, 3, 2]));
        let grads = conv2d_backward(&g, &x, &w, &attrs).unwrap();
        assert!(grads.input.data().iter().all(|&v| v == 0.0));
        assert!(grads.weights.data().iter().all(|&v| v == 0.0));
        assert!(grads.bias.unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pointwise_grad_weights_is_outer_sum() {
        // 1x1 conv reduces to a matrix case: grad_w = sum over positions of x * g
        let x = Tensor::<f64>::from_f64s(shape(&[1, 1, 2, 1]), &[3.0, 5.0]).unwrap();
        let w = Tensor::<f64>::from_f64s(shape(&[1, 1, 1, 1]), &[2.0]).unwrap();
        let attrs = ConvAttrs::new(1, 1, 1, Padding::Valid, 1, false);
        let g = Tensor::<f64>::from_f64s(shape(&[1, 1, 2, 1]), &[1.0, 10.0]).unwrap();
        let grads = conv2d_backward(&g, &x, &w, &attrs).unwrap();
        assert_eq!(grads.weights.data(), &[3.0 + 50.0]);
        assert_eq!(grads.input.data(), &[2.0, 20.0]);
    }

    #[test]
    fn rejects_channel_mismatch() {
        let x = Tensor::<f64>::zeros(shape(&[1, 4, 4, 3]));
        let w = Tensor::<f64>::zeros(shape(&[3, 3, 2, 4]));
        let attrs = ConvAttrs::new(3, 3, 1, Padding::Valid, 4, false);
        assert!(matches!(
            conv2d_forward(&x, &w, None, &attrs),
            Err(NnError::ChannelMismatch { .. })
        ));
    }

    #[test]
    fn rejects_oversized_kernel() {
        let x = Tensor::<f64>::zeros(shape(&[1, 2, 5, 1]));
        let w = Tensor::<f64>::zeros(shape(&[3, 3, 1, 1]));
        let attrs = ConvAttrs::new(3, 3, 1, Padding::Valid, 1, false);
        assert!(matches!(
            conv2d_forward(&x, &w, None, &attrs),
            Err(NnError::KernelTooLarge { .. })
        ));
    }
}
