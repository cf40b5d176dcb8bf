//! Max and average pooling plus the global average pool used by the
//! classifier head. Padded cells never participate: max ignores them and
//! avg divides by the count of in-bounds cells.

use super::{NnError, PoolAttrs, PoolKind};
use crate::tensor::{Element, Shape, Tensor};

/// Returns the pooled tensor and, for max pooling, the flat input index of
/// each selected element (ties resolved to the lowest flat index, which the
/// ascending window scan yields for free).
pub fn pool2d_forward<E: Element>(
    input: &Tensor<E>,
    attrs: &PoolAttrs,
) -> Result<(Tensor<E>, Option<Vec<usize>>), NnError> {
    let (b, h, w, c) = input.shape().nhwc().expect("pool input must be rank 4");
    let (out_h, out_w) = attrs.out_extent(h, w)?;
    let pad_top = attrs.padding.pad_before(h, attrs.window_h, attrs.stride);
    let pad_left = attrs.padding.pad_before(w, attrs.window_w, attrs.stride);

    let x = input.data();
    let mut out = vec![E::zero(); b * out_h * out_w * c];
    let mut argmax = match attrs.kind {
        PoolKind::Max => Some(vec![0usize; out.len()]),
        PoolKind::Avg => None,
    };

    for bi in 0..b {
        for oy in 0..out_h {
            for ox in 0..out_w {
                for ci in 0..c {
                    let mut best = E::neg_infinity();
                    let mut best_idx = usize::MAX;
                    let mut acc = E::zero();
                    let mut count = 0usize;
                    for ky in 0..attrs.window_h {
                        let iy = (oy * attrs.stride + ky) as isize - pad_top as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..attrs.window_w {
                            let ix = (ox * attrs.stride + kx) as isize - pad_left as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let flat = ((bi * h + iy as usize) * w + ix as usize) * c + ci;
                            let v = x[flat];
                            match attrs.kind {
                                PoolKind::Max => {
                                    if v > best {
                                        best = v;
                                        best_idx = flat;
                                    }
                                }
                                PoolKind::Avg => {
                                    acc = acc + v;
                                    count += 1;
                                }
                            }
                        }
                    }
                    let o = ((bi * out_h + oy) * out_w + ox) * c + ci;
                    match attrs.kind {
                        PoolKind::Max => {
                            debug_assert!(best_idx != usize::MAX, "empty pooling window");
                            out[o] = best;
                            argmax.as_mut().unwrap()[o] = best_idx;
                        }
                        PoolKind::Avg => {
                            debug_assert!(count > 0, "empty pooling window");
                            out[o] = acc * E::from_f64(1.0 / count as f64);
                        }
                    }
                }
            }
        }
    }
    let shape = Shape::new(&[b, out_h, out_w, c]).expect("pool output shape");
    Ok((Tensor::from_vec(shape, out).unwrap(), argmax))
}

/// Max routes the whole gradient to the selected cell; avg spreads it
/// uniformly over the in-bounds window cells.
pub fn pool2d_backward<E: Element>(
    grad_out: &Tensor<E>,
    input: &Tensor<E>,
    attrs: &PoolAttrs,
    argmax: Option<&[usize]>,
) -> Result<Tensor<E>, NnError> {
    let (b, h, w, c) = input.shape().nhwc().expect("pool input must be rank 4");
    let (out_h, out_w) = attrs.out_extent(h, w)?;
    let pad_top = attrs.padding.pad_before(h, attrs.window_h, attrs.stride);
    let pad_left = attrs.padding.pad_before(w, attrs.window_w, attrs.stride);
    let g = grad_out.data();
    let mut gx = vec![E::zero(); input.len()];

    match attrs.kind {
        PoolKind::Max => {
            let argmax = argmax.expect("max pool backward needs the forward argmax");
            for (o, &flat) in argmax.iter().enumerate() {
                gx[flat] = gx[flat] + g[o];
            }
        }
        PoolKind::Avg => {
            for bi in 0..b {
                for oy in 0..out_h {
                    for ox in 0..out_w {
                        for ci in 0..c {
                            let o = ((bi * out_h + oy) * out_w + ox) * c + ci;
                            // first pass: count, second: scatter
                            let mut count = 0usize;
                            for ky in 0..attrs.window_h {
                                let iy = (oy * attrs.stride + ky) as isize - pad_top as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..attrs.window_w {
                                    let ix = (ox * attrs.stride + kx) as isize - pad_left as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    count += 1;
                                }
                            }
                            let share = g[o] * E::from_f64(1.0 / count as f64);
                            for ky in 0..attrs.window_h {
                                let iy = (oy * attrs.stride + ky) as isize - pad_top as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..attrs.window_w {
                                    let ix = (ox * attrs.stride + kx) as isize - pad_left as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let flat = ((bi * h + iy as usize) * w + ix as usize) * c + ci;
                                    gx[flat] = gx[flat] + share;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_vec(input.shape().clone(), gx).unwrap())
}

/// Mean over the spatial extent: `[B,H,W,C] -> [B,1,1,C]`.
pub fn global_avg_pool_forward<E: Element>(input: &Tensor<E>) -> Tensor<E> {
    let (b, h, w, c) = input.shape().nhwc().expect("global pool input must be rank 4");
    let x = input.data();
    let inv = E::from_f64(1.0 / (h * w) as f64);
    let mut out = vec![E::zero(); b * c];
    for bi in 0..b {
        for i in 0..h * w {
            let row = &x[(bi * h * w + i) * c..(bi * h * w + i + 1) * c];
            let orow = &mut out[bi * c..(bi + 1) * c];
            for (o, &v) in orow.iter_mut().zip(row.iter()) {
                *o = *o + v;
            }
        }
    }
    for v in &mut out {
        *v = *v * inv;
    }
    Tensor::from_vec(Shape::new(&[b, 1, 1, c]).unwrap(), out).unwrap()
}

pub fn global_avg_pool_backward<E: Element>(grad_out: &Tensor<E>, input_shape: &Shape) -> Tensor<E> {
    let (b, h, w, c) = input_shape.nhwc().expect("global pool input must be rank 4");
    let inv = E::from_f64(1.0 / (h * w) as f64);
    let g = grad_out.data();
    let mut gx = vec![E::zero(); input_shape.len()];
    for bi in 0..b {
        for i in 0..h * w {
            let dst = &mut gx[(bi * h * w + i) * c..(bi * h * w + i + 1) * c];
            let src = &g[bi * c..(bi + 1) * c];
            for (o, &v) in dst.iter_mut().zip(src.iter()) {
                *o = v * inv;
            }
        }
    }
    Tensor::from_vec(input_shape.clone(), gx).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnops::Padding;
    use crate::tensor::{shape, Prng};

    #[test]
    fn avg_pool_of_quad() {
        let x = Tensor::<f64>::from_f64s(shape(&[1, 2, 2, 1]), &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let attrs = PoolAttrs::new(2, 2, PoolKind::Avg, Padding::Valid);
        let (y, _) = pool2d_forward(&x, &attrs).unwrap();
        assert_eq!(y.data(), &[2.5]);
    }

    #[test]
    fn max_pool_tie_takes_lowest_flat_index() {
        let x = Tensor::<f64>::from_f64s(shape(&[1, 2, 2, 1]), &[7.0, 7.0, 7.0, 7.0]).unwrap();
        let attrs = PoolAttrs::new(2, 2, PoolKind::Max, Padding::Valid);
        let (y, argmax) = pool2d_forward(&x, &attrs).unwrap();
        assert_eq!(y.data(), &[7.0]);
        assert_eq!(argmax.unwrap(), vec![0]);
    }

    #[test]
    fn max_pool_backward_conserves_gradient_mass() {
        let mut p = Prng::new(2);
        let x = Tensor::<f64>::gaussian(shape(&[2, 5, 5, 3]), 0.0, 1.0, &mut p).unwrap();
        let attrs = PoolAttrs::new(3, 2, PoolKind::Max, Padding::Same);
        let (y, argmax) = pool2d_forward(&x, &attrs).unwrap();
        let g = Tensor::<f64>::gaussian(y.shape().clone(), 0.0, 1.0, &mut p).unwrap();
        let gx = pool2d_backward(&g, &x, &attrs, argmax.as_deref()).unwrap();
        let sum_in: f64 = gx.data().iter().sum();
        let sum_out: f64 = g.data().iter().sum();
        assert!((sum_in - sum_out).abs() < 1e-12);
    }

    #[test]
    fn table_pool_shape() {
        let x = Tensor::<f32>::zeros(shape(&[1, 147, 147, 64]));
        let attrs = PoolAttrs::new(3, 2, PoolKind::Max, Padding::Valid);
        let (y, _) = pool2d_forward(&x, &attrs).unwrap();
        assert_eq!(y.shape().dims(), &[1, 73, 73, 64]);
    }

    #[test]
    fn global_pool_shape_and_value() {
        let x = Tensor::<f64>::constant(shape(&[1, 8, 8, 3]), 2.0);
        let y = global_avg_pool_forward(&x);
        assert_eq!(y.shape().dims(), &[1, 1, 1, 3]);
        assert_eq!(y.data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn window_larger_than_input_rejected() {
        let x = Tensor::<f64>::zeros(shape(&[1, 2, 2, 1]));
        let attrs = PoolAttrs::new(3, 2, PoolKind::Max, Padding::Valid);
        assert!(pool2d_forward(&x, &attrs).is_err());
    }
}
