//! Layer primitives over channel-first tensors ([C, H, W] for maps, [N, D]
//! for token matrices). Forward passes return whatever the matching backward
//! pass needs as an explicit cache; parameter gradients accumulate into
//! caller-provided slices so batch members can sum into one buffer.

use ndarray::{Array, Array2, Array3, ArrayView2, Dimension};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const NORM_EPS: f64 = 1e-5;

/// 3x3 convolution, zero padding 1, stride 1 or 2.
/// Weights are [c_out, c_in, 3, 3] flattened row-major; bias [c_out].
pub fn conv3x3_forward(
    x: &Array3<f64>,
    w: &[f64],
    b: &[f64],
    c_out: usize,
    stride: usize,
) -> (Array3<f64>, Array2<f64>) {
    let (c_in, h, wd) = x.dim();
    debug_assert_eq!(w.len(), c_out * c_in * 9);
    debug_assert_eq!(b.len(), c_out);
    let h_out = (h - 1) / stride + 1;
    let w_out = (wd - 1) / stride + 1;
    let n = h_out * w_out;

    let mut col = Array2::zeros((c_in * 9, n));
    for ci in 0..c_in {
        for ki in 0..3 {
            for kj in 0..3 {
                let row = ci * 9 + ki * 3 + kj;
                for oi in 0..h_out {
                    let si = (oi * stride + ki) as isize - 1;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    for oj in 0..w_out {
                        let sj = (oj * stride + kj) as isize - 1;
                        if sj < 0 || sj >= wd as isize {
                            continue;
                        }
                        col[[row, oi * w_out + oj]] = x[[ci, si as usize, sj as usize]];
                    }
                }
            }
        }
    }

    let w_mat = ArrayView2::from_shape((c_out, c_in * 9), w).expect("conv weight shape");
    let y_mat = w_mat.dot(&col);
    let mut y = y_mat
        .into_shape_with_order((c_out, h_out, w_out))
        .expect("conv output reshape");
    for co in 0..c_out {
        y.index_axis_mut(ndarray::Axis(0), co)
            .mapv_inplace(|v| v + b[co]);
    }
    (y, col)
}

#[allow(clippy::too_many_arguments)]
pub fn conv3x3_backward(
    dy: &Array3<f64>,
    col: &Array2<f64>,
    w: &[f64],
    in_dim: (usize, usize, usize),
    stride: usize,
    dw: &mut [f64],
    db: &mut [f64],
) -> Array3<f64> {
    let (c_in, h, wd) = in_dim;
    let (c_out, h_out, w_out) = dy.dim();
    let n = h_out * w_out;
    let dy_mat = dy
        .view()
        .into_shape_with_order((c_out, n))
        .expect("dy reshape");

    let dw_mat = dy_mat.dot(&col.t());
    for (dst, src) in dw.iter_mut().zip(dw_mat.iter()) {
        *dst += src;
    }
    for co in 0..c_out {
        db[co] += dy_mat.row(co).sum();
    }

    let w_mat = ArrayView2::from_shape((c_out, c_in * 9), w).expect("conv weight shape");
    let dcol = w_mat.t().dot(&dy_mat);

    let mut dx = Array3::zeros((c_in, h, wd));
    for ci in 0..c_in {
        for ki in 0..3 {
            for kj in 0..3 {
                let row = ci * 9 + ki * 3 + kj;
                for oi in 0..h_out {
                    let si = (oi * stride + ki) as isize - 1;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    for oj in 0..w_out {
                        let sj = (oj * stride + kj) as isize - 1;
                        if sj < 0 || sj >= wd as isize {
                            continue;
                        }
                        dx[[ci, si as usize, sj as usize]] += dcol[[row, oi * w_out + oj]];
                    }
                }
            }
        }
    }
    dx
}

/// Group count convention for normalization layers: the largest divisor of C
/// that is at most 8.
pub fn norm_groups(channels: usize) -> usize {
    let mut g = 8.min(channels);
    while channels % g != 0 {
        g -= 1;
    }
    g
}

pub struct GroupNormCache {
    pub xhat: Array3<f64>,
    pub inv_std: Vec<f64>,
}

pub fn groupnorm_forward(
    x: &Array3<f64>,
    gamma: &[f64],
    beta: &[f64],
    groups: usize,
) -> (Array3<f64>, GroupNormCache) {
    let (c, h, w) = x.dim();
    debug_assert_eq!(c % groups, 0);
    let per = c / groups;
    let m = (per * h * w) as f64;
    let mut xhat = Array3::zeros((c, h, w));
    let mut inv_std = vec![0.0; groups];
    let mut y = Array3::zeros((c, h, w));
    for g in 0..groups {
        let cs = g * per..(g + 1) * per;
        let mut mean = 0.0;
        for ci in cs.clone() {
            mean += x.index_axis(ndarray::Axis(0), ci).sum();
        }
        mean /= m;
        let mut var = 0.0;
        for ci in cs.clone() {
            for &v in x.index_axis(ndarray::Axis(0), ci).iter() {
                var += (v - mean) * (v - mean);
            }
        }
        var /= m;
        let istd = 1.0 / (var + NORM_EPS).sqrt();
        inv_std[g] = istd;
        for ci in cs {
            for hi in 0..h {
                for wi in 0..w {
                    let xh = (x[[ci, hi, wi]] - mean) * istd;
                    xhat[[ci, hi, wi]] = xh;
                    y[[ci, hi, wi]] = gamma[ci] * xh + beta[ci];
                }
            }
        }
    }
    (y, GroupNormCache { xhat, inv_std })
}

pub fn groupnorm_backward(
    dy: &Array3<f64>,
    cache: &GroupNormCache,
    gamma: &[f64],
    groups: usize,
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Array3<f64> {
    let (c, h, w) = dy.dim();
    let per = c / groups;
    let m = (per * h * w) as f64;
    let mut dx = Array3::zeros((c, h, w));
    for g in 0..groups {
        let cs = g * per..(g + 1) * per;
        let istd = cache.inv_std[g];
        let mut sum_v = 0.0;
        let mut sum_vx = 0.0;
        for ci in cs.clone() {
            for hi in 0..h {
                for wi in 0..w {
                    let d = dy[[ci, hi, wi]];
                    let xh = cache.xhat[[ci, hi, wi]];
                    dgamma[ci] += d * xh;
                    dbeta[ci] += d;
                    let v = d * gamma[ci];
                    sum_v += v;
                    sum_vx += v * xh;
                }
            }
        }
        let mean_v = sum_v / m;
        let mean_vx = sum_vx / m;
        for ci in cs {
            for hi in 0..h {
                for wi in 0..w {
                    let v = dy[[ci, hi, wi]] * gamma[ci];
                    let xh = cache.xhat[[ci, hi, wi]];
                    dx[[ci, hi, wi]] = istd * (v - mean_v - xh * mean_vx);
                }
            }
        }
    }
    dx
}

pub fn silu_forward<D: Dimension>(x: &Array<f64, D>) -> Array<f64, D> {
    x.mapv(|v| v / (1.0 + (-v).exp()))
}

pub fn silu_backward<D: Dimension>(x: &Array<f64, D>, dy: &Array<f64, D>) -> Array<f64, D> {
    let mut dx = x.clone();
    dx.zip_mut_with(dy, |v, &d| {
        let s = 1.0 / (1.0 + (-*v).exp());
        *v = d * (s + *v * s * (1.0 - s));
    });
    dx
}

/// Vector linear map: y = W x + b with W [out, in] flattened row-major.
pub fn linear_forward(x: &[f64], w: &[f64], b: &[f64], out_dim: usize) -> Vec<f64> {
    let in_dim = x.len();
    debug_assert_eq!(w.len(), out_dim * in_dim);
    let mut y = b.to_vec();
    for o in 0..out_dim {
        let row = &w[o * in_dim..(o + 1) * in_dim];
        let mut acc = 0.0;
        for (wi, xi) in row.iter().zip(x.iter()) {
            acc += wi * xi;
        }
        y[o] += acc;
    }
    y
}

pub fn linear_backward(
    x: &[f64],
    dy: &[f64],
    w: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    dx: &mut [f64],
) {
    let in_dim = x.len();
    let out_dim = dy.len();
    for o in 0..out_dim {
        db[o] += dy[o];
        let row = &w[o * in_dim..(o + 1) * in_dim];
        let drow = &mut dw[o * in_dim..(o + 1) * in_dim];
        for i in 0..in_dim {
            drow[i] += dy[o] * x[i];
            dx[i] += dy[o] * row[i];
        }
    }
}

/// Token-matrix linear map: y = x W^T + b with x [n, in], W [out, in].
pub fn linear2_forward(x: &Array2<f64>, w: &[f64], b: &[f64], out_dim: usize) -> Array2<f64> {
    let (n, in_dim) = x.dim();
    let w_mat = ArrayView2::from_shape((out_dim, in_dim), w).expect("linear weight shape");
    let mut y = x.dot(&w_mat.t());
    for mut row in y.rows_mut() {
        for (v, bv) in row.iter_mut().zip(b.iter()) {
            *v += bv;
        }
    }
    debug_assert_eq!(y.dim(), (n, out_dim));
    y
}

pub fn linear2_backward(
    x: &Array2<f64>,
    dy: &Array2<f64>,
    w: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
) -> Array2<f64> {
    let (_, in_dim) = x.dim();
    let (_, out_dim) = dy.dim();
    let w_mat = ArrayView2::from_shape((out_dim, in_dim), w).expect("linear weight shape");
    let dw_mat = dy.t().dot(x);
    for (dst, src) in dw.iter_mut().zip(dw_mat.iter()) {
        *dst += src;
    }
    for o in 0..out_dim {
        db[o] += dy.column(o).sum();
    }
    dy.dot(&w_mat)
}

/// Nearest-neighbor spatial doubling.
pub fn upsample2_forward(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, 2 * h, 2 * w), |(ci, i, j)| x[[ci, i / 2, j / 2]])
}

pub fn upsample2_backward(dy: &Array3<f64>) -> Array3<f64> {
    let (c, h2, w2) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array3::zeros((c, h, w));
    for ci in 0..c {
        for i in 0..h2 {
            for j in 0..w2 {
                dx[[ci, i / 2, j / 2]] += dy[[ci, i, j]];
            }
        }
    }
    dx
}

/// Bilinear resize with half-pixel sample centers; preserves constants.
/// Inference-only (no backward needed downstream).
pub fn resize_bilinear(x: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (c, h, w) = x.dim();
    if (h, w) == (out_h, out_w) {
        return x.clone();
    }
    let scale_i = h as f64 / out_h as f64;
    let scale_j = w as f64 / out_w as f64;
    let axis = |o: usize, scale: f64, n: usize| {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let lo = (src.floor() as usize).min(n - 1);
        let hi = (lo + 1).min(n - 1);
        let frac = (src - lo as f64).min(1.0);
        (lo, hi, frac)
    };
    Array3::from_shape_fn((c, out_h, out_w), |(ci, oi, oj)| {
        let (i0, i1, fi) = axis(oi, scale_i, h);
        let (j0, j1, fj) = axis(oj, scale_j, w);
        let top = x[[ci, i0, j0]] * (1.0 - fj) + x[[ci, i0, j1]] * fj;
        let bot = x[[ci, i1, j0]] * (1.0 - fj) + x[[ci, i1, j1]] * fj;
        top * (1.0 - fi) + bot * fi
    })
}

pub fn concat_channels(a: &Array3<f64>, b: &Array3<f64>) -> Array3<f64> {
    let (ca, h, w) = a.dim();
    let (cb, hb, wb) = b.dim();
    debug_assert_eq!((h, w), (hb, wb));
    Array3::from_shape_fn((ca + cb, h, w), |(c, i, j)| {
        if c < ca {
            a[[c, i, j]]
        } else {
            b[[c - ca, i, j]]
        }
    })
}

pub fn split_channels(d: &Array3<f64>, c_a: usize) -> (Array3<f64>, Array3<f64>) {
    let (c, h, w) = d.dim();
    let a = Array3::from_shape_fn((c_a, h, w), |(ci, i, j)| d[[ci, i, j]]);
    let b = Array3::from_shape_fn((c - c_a, h, w), |(ci, i, j)| d[[c_a + ci, i, j]]);
    (a, b)
}

/// Numerically stable softmax of one vector.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Gradient through a softmax row given upstream dL/da where a = softmax(z).
pub fn softmax_backward_row(a: &[f64], da: &[f64]) -> Vec<f64> {
    let dot: f64 = a.iter().zip(da.iter()).map(|(&ai, &di)| ai * di).sum();
    a.iter()
        .zip(da.iter())
        .map(|(&ai, &di)| ai * (di - dot))
        .collect()
}

/// Cross-entropy of softmax(logits) against a 0-based target class.
/// Returns the loss and dL/dlogits.
pub fn cross_entropy(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum: f64 = logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
    let loss = log_sum - logits[target];
    let mut grad = softmax(logits);
    grad[target] -= 1.0;
    (loss, grad)
}

pub struct LayerNormCache {
    pub xhat: Array2<f64>,
    pub inv_std: Vec<f64>,
}

/// Per-row normalization of a token matrix [n, d].
pub fn layernorm_forward(
    x: &Array2<f64>,
    gamma: &[f64],
    beta: &[f64],
) -> (Array2<f64>, LayerNormCache) {
    let (n, d) = x.dim();
    let mut xhat = Array2::zeros((n, d));
    let mut inv_std = vec![0.0; n];
    let mut y = Array2::zeros((n, d));
    for r in 0..n {
        let row = x.row(r);
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let istd = 1.0 / (var + NORM_EPS).sqrt();
        inv_std[r] = istd;
        for c in 0..d {
            let xh = (x[[r, c]] - mean) * istd;
            xhat[[r, c]] = xh;
            y[[r, c]] = gamma[c] * xh + beta[c];
        }
    }
    (y, LayerNormCache { xhat, inv_std })
}

pub fn layernorm_backward(
    dy: &Array2<f64>,
    cache: &LayerNormCache,
    gamma: &[f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Array2<f64> {
    let (n, d) = dy.dim();
    let mut dx = Array2::zeros((n, d));
    for r in 0..n {
        let istd = cache.inv_std[r];
        let mut sum_v = 0.0;
        let mut sum_vx = 0.0;
        for c in 0..d {
            let dyv = dy[[r, c]];
            let xh = cache.xhat[[r, c]];
            dgamma[c] += dyv * xh;
            dbeta[c] += dyv;
            let v = dyv * gamma[c];
            sum_v += v;
            sum_vx += v * xh;
        }
        let mean_v = sum_v / d as f64;
        let mean_vx = sum_vx / d as f64;
        for c in 0..d {
            let v = dy[[r, c]] * gamma[c];
            dx[[r, c]] = istd * (v - mean_v - cache.xhat[[r, c]] * mean_vx);
        }
    }
    dx
}

/// Inverted dropout: surviving activations are scaled by 1/(1-rate) so
/// inference needs no rescaling. The mask is the cache.
pub fn dropout_forward(
    x: &Array2<f64>,
    rate: f64,
    rng: &mut ChaCha8Rng,
) -> (Array2<f64>, Array2<f64>) {
    debug_assert!((0.0..1.0).contains(&rate));
    if rate == 0.0 {
        return (x.clone(), Array2::ones(x.dim()));
    }
    let keep = 1.0 - rate;
    let mask = Array2::from_shape_fn(x.dim(), |_| {
        if rng.random::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    });
    (x * &mask, mask)
}

pub fn dropout_backward(dy: &Array2<f64>, mask: &Array2<f64>) -> Array2<f64> {
    dy * mask
}
