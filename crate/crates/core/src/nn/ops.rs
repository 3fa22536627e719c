use ndarray::{Array2, Array4, ArrayView2, ArrayView4, Axis};

pub fn out_size(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

/// Unfolds a channel-major `(C, N, H, W)` map into a `(C*K*K, N*Ho*Wo)` matrix.
pub fn im2col(x: ArrayView4<f32>, kernel: usize, stride: usize, padding: usize) -> Array2<f32> {
    let (c, n, h, w) = x.dim();
    let ho = out_size(h, kernel, stride, padding);
    let wo = out_size(w, kernel, stride, padding);
    let cols_w = n * ho * wo;
    let mut cols = Array2::<f32>::zeros((c * kernel * kernel, cols_w));
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().expect("standard layout");
    let out = cols.as_slice_mut().expect("fresh array");
    for ci in 0..c {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (ci * kernel + ky) * kernel + kx;
                let dst = &mut out[row * cols_w..(row + 1) * cols_w];
                for ni in 0..n {
                    let base = (ci * n + ni) * h * w;
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        let drow = (ni * ho + oy) * wo;
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix >= 0 && (ix as usize) < w {
                                dst[drow + ox] = xs[base + iy * w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds a column matrix back into a `(C, N, H, W)` map,
/// accumulating overlapping contributions.
pub fn col2im(
    cols: ArrayView2<f32>,
    dims: (usize, usize, usize, usize),
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Array4<f32> {
    let (c, n, h, w) = dims;
    let ho = out_size(h, kernel, stride, padding);
    let wo = out_size(w, kernel, stride, padding);
    let cols_w = n * ho * wo;
    let cols = cols.as_standard_layout();
    let src = cols.as_slice().expect("standard layout");
    let mut x = Array4::<f32>::zeros(dims);
    let xs = x.as_slice_mut().expect("fresh array");
    for ci in 0..c {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (ci * kernel + ky) * kernel + kx;
                let s = &src[row * cols_w..(row + 1) * cols_w];
                for ni in 0..n {
                    let base = (ci * n + ni) * h * w;
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        let srow = (ni * ho + oy) * wo;
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix >= 0 && (ix as usize) < w {
                                xs[base + iy * w + ix as usize] += s[srow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// Flattens a `(C_out, C_in, K, K)` kernel into `(C_out, C_in*K*K)`.
pub fn kernel_matrix(w: ArrayView4<f32>) -> ArrayView2<f32> {
    let (co, ci, kh, kw) = w.dim();
    w.into_shape_with_order((co, ci * kh * kw))
        .expect("kernels are stored contiguously")
}

/// `(N, C, H, W)` to `(C, N, H, W)` and back; the permutation is its own inverse.
pub fn swap_nc(x: ArrayView4<f32>) -> Array4<f32> {
    x.permuted_axes([1, 0, 2, 3]).as_standard_layout().into_owned()
}

/// Reshapes a `(C, N*H*W)` matrix into a channel-major `(C, N, H, W)` map.
pub fn cols_to_map(m: Array2<f32>, n: usize, h: usize, w: usize) -> Array4<f32> {
    let c = m.nrows();
    m.as_standard_layout()
        .into_owned()
        .into_shape_with_order((c, n, h, w))
        .expect("matching element count")
}

/// Direct convolution over the conventional `(N, C, H, W)` layout.
pub fn conv2d(x: ArrayView4<f32>, w: ArrayView4<f32>, stride: usize, padding: usize) -> Array4<f32> {
    let (n, _, h, wd) = x.dim();
    let k = w.dim().2;
    let xc = swap_nc(x);
    let cols = im2col(xc.view(), k, stride, padding);
    let out = kernel_matrix(w).dot(&cols);
    let ho = out_size(h, k, stride, padding);
    let wo = out_size(wd, k, stride, padding);
    swap_nc(cols_to_map(out, n, ho, wo).view())
}

pub fn global_avg_pool(x: ArrayView4<f32>) -> Array2<f32> {
    // (C, N, H, W) -> (N, C)
    let (_, _, h, w) = x.dim();
    let s = x.sum_axis(Axis(3)).sum_axis(Axis(2));
    (s / (h * w) as f32).reversed_axes().as_standard_layout().into_owned()
}

pub fn softmax_rows(logits: ArrayView2<f32>, temperature: f32) -> Array2<f32> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| ((v - max) / temperature).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

pub fn log_softmax_rows(logits: ArrayView2<f32>, temperature: f32) -> Array2<f32> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        let lse = row.iter().map(|&v| ((v - max) / temperature).exp()).sum::<f32>().ln();
        row.mapv_inplace(|v| (v - max) / temperature - lse);
    }
    out
}

pub fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn argmax_rows(m: ArrayView2<f32>) -> Vec<usize> {
    m.rows()
        .into_iter()
        .map(|r| {
            let mut best = 0;
            for (i, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::{Rng, SeedableRng};

    fn naive_conv(x: &Array4<f32>, w: &Array4<f32>, stride: usize, pad: usize) -> Array4<f32> {
        let (n, ci, h, wd) = x.dim();
        let (co, _, k, _) = w.dim();
        let ho = out_size(h, k, stride, pad);
        let wo = out_size(wd, k, stride, pad);
        let mut out = Array4::zeros((n, co, ho, wo));
        for b in 0..n {
            for o in 0..co {
                for y in 0..ho {
                    for xx in 0..wo {
                        let mut acc = 0.0f64;
                        for i in 0..ci {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (y * stride + ky) as isize - pad as isize;
                                    let ix = (xx * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += f64::from(x[[b, i, iy as usize, ix as usize]])
                                            * f64::from(w[[o, i, ky, kx]]);
                                    }
                                }
                            }
                        }
                        out[[b, o, y, xx]] = acc as f32;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 3)] {
            let x = Array::from_shape_fn((2, 3, 7, 6), |_| rng.random_range(-1.0..1.0));
            let w = Array::from_shape_fn((4, 3, k, k), |_| rng.random_range(-1.0..1.0));
            let a = conv2d(x.view(), w.view(), stride, pad);
            let b = naive_conv(&x, &w, stride, pad);
            assert_eq!(a.dim(), b.dim());
            let diff = (&a - &b).mapv(f32::abs).fold(0.0f32, |m, &v| m.max(v));
            assert!(diff < 1e-5, "diff {diff}");
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let x = Array::from_shape_fn((2, 2, 5, 5), |_| rng.random_range(-1.0f32..1.0));
        let cols = im2col(x.view(), 3, 2, 1);
        let y = Array::from_shape_fn(cols.dim(), |_| rng.random_range(-1.0f32..1.0));
        let lhs: f32 = (&cols * &y).sum();
        let back = col2im(y.view(), x.dim(), 3, 2, 1);
        let rhs: f32 = (&x * &back).sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let l = ndarray::array![[1.0f32, 2.0, 3.0], [0.0, 0.0, 0.0]];
        let p = softmax_rows(l.view(), 2.0);
        for r in p.rows() {
            assert!((r.sum() - 1.0).abs() < 1e-6);
        }
        assert!((p[[1, 0]] - 1.0 / 3.0).abs() < 1e-6);
    }
}
