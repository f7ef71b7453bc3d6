//! Dense compute kernels.
//!
//! These are the hot loops behind the tape ops: matrix products, strided 2-D
//! convolution, row softmax, and layer normalization. Every kernel writes
//! disjoint output regions per work item and accumulates in a fixed order, so
//! results are bit-identical whether they run sequentially or data-parallel.

use super::par;
use super::tensor::Scalar;

/// C[m,n] = A[m,k] · B[k,n]
pub fn matmul_nn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    par::for_each_chunk_mut(c, n, |i, row| {
        let a_row = &a[i * k..(i + 1) * k];
        for v in row.iter_mut() {
            *v = T::zero();
        }
        for (p, &ap) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (v, &bv) in row.iter_mut().zip(b_row) {
                *v = *v + ap * bv;
            }
        }
    });
}

/// C[m,n] = A[m,k] · B[n,k]ᵀ
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    par::for_each_chunk_mut(c, n, |i, row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, v) in row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc = acc + av * bv;
            }
            *v = acc;
        }
    });
}

/// C[k,n] = A[m,k]ᵀ · B[m,n]
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    par::for_each_chunk_mut(c, n, |p, row| {
        for v in row.iter_mut() {
            *v = T::zero();
        }
        for i in 0..m {
            let ap = a[i * k + p];
            let b_row = &b[i * n..(i + 1) * n];
            for (v, &bv) in row.iter_mut().zip(b_row) {
                *v = *v + ap * bv;
            }
        }
    });
}

/// Geometry of a strided 2-D convolution with zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dGeom {
    pub fn h_out(&self) -> usize {
        (self.h_in + 2 * self.pad - self.kernel) / self.stride + 1
    }
    pub fn w_out(&self) -> usize {
        (self.w_in + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

/// out[b,co,oh,ow] = bias[co] + Σ_{ci,kh,kw} in[b,ci,oh·s+kh−p,ow·s+kw−p] · w[co,ci,kh,kw]
///
/// Out-of-range input positions read as zero.
pub fn conv2d_forward<T: Scalar>(
    input: &[T],
    weight: &[T],
    bias: &[T],
    out: &mut [T],
    g: Conv2dGeom,
) {
    let (h_out, w_out) = (g.h_out(), g.w_out());
    debug_assert_eq!(input.len(), g.batch * g.c_in * g.h_in * g.w_in);
    debug_assert_eq!(weight.len(), g.c_out * g.c_in * g.kernel * g.kernel);
    debug_assert_eq!(bias.len(), g.c_out);
    debug_assert_eq!(out.len(), g.batch * g.c_out * h_out * w_out);
    let plane_in = g.h_in * g.w_in;
    par::for_each_chunk_mut(out, h_out * w_out, |idx, plane| {
        let b = idx / g.c_out;
        let co = idx % g.c_out;
        let in_base = b * g.c_in * plane_in;
        let w_base = co * g.c_in * g.kernel * g.kernel;
        for oh in 0..h_out {
            for ow in 0..w_out {
                let mut acc = bias[co];
                for ci in 0..g.c_in {
                    let in_ch = &input[in_base + ci * plane_in..in_base + (ci + 1) * plane_in];
                    let w_ch = &weight[w_base + ci * g.kernel * g.kernel..];
                    for kh in 0..g.kernel {
                        let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.h_in as isize {
                            continue;
                        }
                        let row = &in_ch[ih as usize * g.w_in..(ih as usize + 1) * g.w_in];
                        for kw in 0..g.kernel {
                            let iw = (ow * g.stride + kw) as isize - g.pad as isize;
                            if iw < 0 || iw >= g.w_in as isize {
                                continue;
                            }
                            acc = acc + row[iw as usize] * w_ch[kh * g.kernel + kw];
                        }
                    }
                }
                plane[oh * w_out + ow] = acc;
            }
        }
    });
}

/// Gradients of `conv2d_forward` with respect to input, weight, and bias.
pub fn conv2d_backward<T: Scalar>(
    input: &[T],
    weight: &[T],
    d_out: &[T],
    d_input: &mut [T],
    d_weight: &mut [T],
    d_bias: &mut [T],
    g: Conv2dGeom,
) {
    let (h_out, w_out) = (g.h_out(), g.w_out());
    let plane_in = g.h_in * g.w_in;
    let plane_out = h_out * w_out;
    let w_per_co = g.c_in * g.kernel * g.kernel;

    // d_input: parallel over batch items (disjoint slices of d_input).
    par::for_each_chunk_mut(d_input, g.c_in * plane_in, |b, d_in_b| {
        for v in d_in_b.iter_mut() {
            *v = T::zero();
        }
        for co in 0..g.c_out {
            let d_out_plane = &d_out[(b * g.c_out + co) * plane_out..][..plane_out];
            let w_co = &weight[co * w_per_co..][..w_per_co];
            for oh in 0..h_out {
                for ow in 0..w_out {
                    let go = d_out_plane[oh * w_out + ow];
                    for ci in 0..g.c_in {
                        let w_ch = &w_co[ci * g.kernel * g.kernel..];
                        for kh in 0..g.kernel {
                            let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                            if ih < 0 || ih >= g.h_in as isize {
                                continue;
                            }
                            for kw in 0..g.kernel {
                                let iw = (ow * g.stride + kw) as isize - g.pad as isize;
                                if iw < 0 || iw >= g.w_in as isize {
                                    continue;
                                }
                                let off = ci * plane_in + ih as usize * g.w_in + iw as usize;
                                d_in_b[off] = d_in_b[off] + go * w_ch[kh * g.kernel + kw];
                            }
                        }
                    }
                }
            }
        }
    });

    // d_bias: plain per-channel sums of d_out, accumulated in (b, oh, ow)
    // order. Cheap enough to do in one sequential pass.
    for (co, db) in d_bias.iter_mut().enumerate() {
        let mut acc = T::zero();
        for b in 0..g.batch {
            let d_out_plane = &d_out[(b * g.c_out + co) * plane_out..][..plane_out];
            for &v in d_out_plane {
                acc = acc + v;
            }
        }
        *db = acc;
    }

    // d_weight: parallel over output channels (disjoint per co).
    par::for_each_chunk_mut(d_weight, w_per_co, |co, d_w_co| {
        for v in d_w_co.iter_mut() {
            *v = T::zero();
        }
        for b in 0..g.batch {
            let d_out_plane = &d_out[(b * g.c_out + co) * plane_out..][..plane_out];
            let in_b = &input[b * g.c_in * plane_in..][..g.c_in * plane_in];
            for oh in 0..h_out {
                for ow in 0..w_out {
                    let go = d_out_plane[oh * w_out + ow];
                    for ci in 0..g.c_in {
                        let in_ch = &in_b[ci * plane_in..][..plane_in];
                        let d_w_ch = &mut d_w_co[ci * g.kernel * g.kernel..];
                        for kh in 0..g.kernel {
                            let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                            if ih < 0 || ih >= g.h_in as isize {
                                continue;
                            }
                            let row = &in_ch[ih as usize * g.w_in..][..g.w_in];
                            for kw in 0..g.kernel {
                                let iw = (ow * g.stride + kw) as isize - g.pad as isize;
                                if iw < 0 || iw >= g.w_in as isize {
                                    continue;
                                }
                                d_w_ch[kh * g.kernel + kw] =
                                    d_w_ch[kh * g.kernel + kw] + go * row[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    });
}

/// Row-wise softmax over the last dimension, in place. `rows × width` layout.
///
/// An optional additive bias (same layout) is applied before normalization;
/// use large negative entries to mask positions out.
pub fn softmax_rows<T: Scalar>(data: &mut [T], width: usize, additive: Option<&[T]>) {
    if let Some(m) = additive {
        debug_assert_eq!(m.len(), data.len());
        for (v, &a) in data.iter_mut().zip(m) {
            *v = *v + a;
        }
    }
    par::for_each_chunk_mut(data, width, |_, row| {
        let mut max = row[0];
        for &v in row.iter() {
            if v > max {
                max = v;
            }
        }
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    });
}

/// Jacobian-vector product of row softmax: dx = y ⊙ (dy − Σ(dy ⊙ y)).
pub fn softmax_backward_rows<T: Scalar>(y: &[T], d_y: &[T], d_x: &mut [T], width: usize) {
    debug_assert_eq!(y.len(), d_y.len());
    debug_assert_eq!(y.len(), d_x.len());
    par::for_each_chunk_mut(d_x, width, |i, dx_row| {
        let y_row = &y[i * width..(i + 1) * width];
        let dy_row = &d_y[i * width..(i + 1) * width];
        let mut dot = T::zero();
        for (&yv, &dv) in y_row.iter().zip(dy_row) {
            dot = dot + yv * dv;
        }
        for ((dx, &yv), &dv) in dx_row.iter_mut().zip(y_row).zip(dy_row) {
            *dx = yv * (dv - dot);
        }
    });
}

/// Per-row mean/inverse-std statistics for layer normalization.
pub fn layer_norm_stats<T: Scalar>(x: &[T], width: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let rows = x.len() / width;
    let wide = T::from_f64(width as f64);
    let stats = par::map_indexed(rows, |i| {
        let row = &x[i * width..(i + 1) * width];
        let mut mean = T::zero();
        for &v in row {
            mean = mean + v;
        }
        mean = mean / wide;
        let mut var = T::zero();
        for &v in row {
            let d = v - mean;
            var = var + d * d;
        }
        var = var / wide;
        (mean, T::one() / (var + eps).sqrt())
    });
    let mut means = Vec::with_capacity(rows);
    let mut inv_stds = Vec::with_capacity(rows);
    for (m, s) in stats {
        means.push(m);
        inv_stds.push(s);
    }
    (means, inv_stds)
}

/// y = γ ⊙ (x − μ)/σ + β for each row; γ, β have length `width`.
pub fn layer_norm_forward<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    means: &[T],
    inv_stds: &[T],
    y: &mut [T],
    width: usize,
) {
    par::for_each_chunk_mut(y, width, |i, y_row| {
        let x_row = &x[i * width..(i + 1) * width];
        let (mu, is) = (means[i], inv_stds[i]);
        for ((yv, &xv), (&g, &b)) in y_row.iter_mut().zip(x_row).zip(gamma.iter().zip(beta)) {
            *yv = g * (xv - mu) * is + b;
        }
    });
}

/// Gradients of layer normalization with respect to x (d_gamma / d_beta are
/// accumulated by the caller, which owns parameter layout).
pub fn layer_norm_backward_x<T: Scalar>(
    x: &[T],
    gamma: &[T],
    means: &[T],
    inv_stds: &[T],
    d_y: &[T],
    d_x: &mut [T],
    width: usize,
) {
    let wide = T::from_f64(width as f64);
    par::for_each_chunk_mut(d_x, width, |i, dx_row| {
        let x_row = &x[i * width..(i + 1) * width];
        let dy_row = &d_y[i * width..(i + 1) * width];
        let (mu, is) = (means[i], inv_stds[i]);
        // Let x̂ = (x−μ)·is and g = dy ⊙ γ. Then
        //   dx = is · (g − mean(g) − x̂ · mean(g ⊙ x̂))
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for ((&xv, &dv), &gv) in x_row.iter().zip(dy_row).zip(gamma) {
            let xhat = (xv - mu) * is;
            let gval = dv * gv;
            sum_g = sum_g + gval;
            sum_gx = sum_gx + gval * xhat;
        }
        let mean_g = sum_g / wide;
        let mean_gx = sum_gx / wide;
        for ((dx, &xv), (&dv, &gv)) in dx_row.iter_mut().zip(x_row).zip(dy_row.iter().zip(gamma)) {
            let xhat = (xv - mu) * is;
            *dx = is * (dv * gv - mean_g - xhat * mean_gx);
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_nn_small() {
        // [1 2; 3 4] · [5 6; 7 8] = [19 22; 43 50]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        matmul_nn(&a, &b, &mut c, 2, 2, 2);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_transpose_variants_agree() {
        // Check A·Bᵀ and Aᵀ·B against explicit nn products.
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.0, 2.0, -1.0, 3.0, 1.0]; // 2x3
        let mut c_nt = [0.0; 4]; // 2x2
        matmul_nt(&a, &b, &mut c_nt, 2, 3, 2);
        // b transposed is 3x2: [1 -1; 0 3; 2 1]
        let bt = [1.0, -1.0, 0.0, 3.0, 2.0, 1.0];
        let mut c_ref = [0.0; 4];
        matmul_nn(&a, &bt, &mut c_ref, 2, 3, 2);
        assert_eq!(c_nt, c_ref);

        let mut c_tn = [0.0; 9]; // 3x3
        matmul_tn(&a, &b, &mut c_tn, 2, 3, 3);
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0]; // 3x2
        let mut c_ref2 = [0.0; 9];
        matmul_nn(&at, &b, &mut c_ref2, 3, 2, 3);
        assert_eq!(c_tn, c_ref2);
    }

    #[test]
    fn conv2d_identity_kernel() {
        // A 3x3 kernel with a single 1 at the center and stride 1 reproduces
        // the input exactly (padding feeds only the border zeros).
        let g = Conv2dGeom {
            batch: 1,
            c_in: 1,
            h_in: 4,
            w_in: 5,
            c_out: 1,
            kernel: 3,
            stride: 1,
            pad: 1,
        };
        let input: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let mut weight = vec![0.0; 9];
        weight[4] = 1.0;
        let bias = [0.0];
        let mut out = vec![0.0; 20];
        conv2d_forward(&input, &weight, &bias, &mut out, g);
        assert_eq!(out, input);
    }

    #[test]
    fn conv2d_stride_two_shape_and_values() {
        // All-ones 3x3 kernel over an all-ones 4x4 input with stride 2 and
        // padding 1: each output position sums the in-range window entries.
        let g = Conv2dGeom {
            batch: 1,
            c_in: 1,
            h_in: 4,
            w_in: 4,
            c_out: 1,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        assert_eq!(g.h_out(), 2);
        assert_eq!(g.w_out(), 2);
        let input = vec![1.0f64; 16];
        let weight = vec![1.0; 9];
        let bias = [0.5];
        let mut out = vec![0.0; 4];
        conv2d_forward(&input, &weight, &bias, &mut out, g);
        // Top-left window covers rows/cols {0,1} of input → 4 ones; others 6 or 9.
        assert_eq!(out, [4.5, 6.5, 6.5, 9.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut x = vec![0.1f64, 2.0, -1.0, 0.0, 0.0, 0.0];
        softmax_rows(&mut x, 3, None);
        for row in x.chunks(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        // Uniform logits → uniform probabilities.
        assert!((x[3] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_additive_mask_zeroes_position() {
        let mut x = vec![1.0f64, 1.0, 1.0];
        let mask = vec![0.0, -1e30, 0.0];
        softmax_rows(&mut x, 3, Some(&mask));
        assert!(x[1] < 1e-12);
        assert!((x[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_unit_stats() {
        let x = vec![1.0f64, 2.0, 3.0, 4.0];
        let (means, inv_stds) = layer_norm_stats(&x, 4, 0.0);
        let gamma = vec![1.0; 4];
        let beta = vec![0.0; 4];
        let mut y = vec![0.0; 4];
        layer_norm_forward(&x, &gamma, &beta, &means, &inv_stds, &mut y, 4);
        let mean: f64 = y.iter().sum::<f64>() / 4.0;
        let var: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-9);
    }
}
