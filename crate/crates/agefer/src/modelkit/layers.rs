//! Differentiable layer primitives in f64 with explicit batched
//! forward/backward passes. Convolution lowers to a single GEMM per batch
//! via im2col, which is where nearly all training time is spent.

use ndarray::{Array1, Array2, Array4};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Flatten (N, C, H, W) patches into a (C·KH·KW, N·OH·OW) matrix so the
/// convolution becomes `weight_matrix · col`.
pub(crate) fn im2col(x: &Array4<f64>, kh: usize, kw: usize, stride: usize, pad: usize) -> (Array2<f64>, (usize, usize)) {
    let (n, c, h, w) = x.dim();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut col = Array2::<f64>::zeros((c * kh * kw, n * oh * ow));
    let xs = x.as_slice().expect("input must be standard layout");
    let cols = n * oh * ow;
    let cs = col.as_slice_mut().unwrap();
    for ni in 0..n {
        for ci in 0..c {
            let x_base = (ni * c + ci) * h * w;
            for khi in 0..kh {
                for kwi in 0..kw {
                    let row = (ci * kh + khi) * kw + kwi;
                    let row_base = row * cols + ni * oh * ow;
                    for ohi in 0..oh {
                        let ih = (ohi * stride + khi) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let src_base = x_base + ih as usize * w;
                        let dst_base = row_base + ohi * ow;
                        for owi in 0..ow {
                            let iw = (owi * stride + kwi) as isize - pad as isize;
                            if iw >= 0 && iw < w as isize {
                                cs[dst_base + owi] = xs[src_base + iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    (col, (oh, ow))
}

/// Scatter-add the columns back into image space (adjoint of [`im2col`]).
pub(crate) fn col2im(
    dcol: &Array2<f64>,
    x_dim: (usize, usize, usize, usize),
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (n, c, h, w) = x_dim;
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut dx = Array4::<f64>::zeros(x_dim);
    let ds = dcol.as_slice().expect("dcol must be standard layout");
    let cols = n * oh * ow;
    let xs = dx.as_slice_mut().unwrap();
    for ni in 0..n {
        for ci in 0..c {
            let x_base = (ni * c + ci) * h * w;
            for khi in 0..kh {
                for kwi in 0..kw {
                    let row = (ci * kh + khi) * kw + kwi;
                    let row_base = row * cols + ni * oh * ow;
                    for ohi in 0..oh {
                        let ih = (ohi * stride + khi) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let dst_base = x_base + ih as usize * w;
                        let src_base = row_base + ohi * ow;
                        for owi in 0..ow {
                            let iw = (owi * stride + kwi) as isize - pad as isize;
                            if iw >= 0 && iw < w as isize {
                                xs[dst_base + iw as usize] += ds[src_base + owi];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// 2D convolution with square stride/padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// (out_channels, in_channels, kh, kw)
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
    pub stride: usize,
    pub pad: usize,
}

pub struct ConvCache {
    col: Array2<f64>,
    x_dim: (usize, usize, usize, usize),
    out_hw: (usize, usize),
}

impl Conv2d {
    /// He-normal initialization, deterministic given the RNG state.
    pub fn he_init(out_c: usize, in_c: usize, kh: usize, kw: usize, stride: usize, pad: usize, rng: &mut impl Rng) -> Self {
        let fan_in = (in_c * kh * kw) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
        let weight = Array4::from_shape_fn((out_c, in_c, kh, kw), |_| normal.sample(rng));
        Conv2d {
            weight,
            bias: Array1::zeros(out_c),
            stride,
            pad,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&self, x: &Array4<f64>) -> (Array4<f64>, ConvCache) {
        let (n, _c, _h, _w) = x.dim();
        let (oc, ic, kh, kw) = self.weight.dim();
        let (col, (oh, ow)) = im2col(x, kh, kw, self.stride, self.pad);
        let wmat = self
            .weight
            .view()
            .into_shape_with_order((oc, ic * kh * kw))
            .expect("weight reshape");
        let mut y_mat = wmat.dot(&col); // (oc, n*oh*ow)
        for (mut row, &b) in y_mat.rows_mut().into_iter().zip(self.bias.iter()) {
            row += b;
        }
        let y = y_mat
            .into_shape_with_order((oc, n, oh, ow))
            .unwrap()
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .to_owned();
        (
            y,
            ConvCache {
                col,
                x_dim: x.dim(),
                out_hw: (oh, ow),
            },
        )
    }

    /// Returns (dweight, dbias, dx). `dx` is computed only when
    /// `want_dx` is set (the first layer of a network does not need it
    /// unless input saliency is requested).
    pub fn backward(&self, cache: &ConvCache, dy: &Array4<f64>, want_dx: bool) -> (Array4<f64>, Array1<f64>, Option<Array4<f64>>) {
        let (oc, ic, kh, kw) = self.weight.dim();
        let n = cache.x_dim.0;
        let (oh, ow) = cache.out_hw;
        let dy_mat = dy
            .view()
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .into_shape_with_order((oc, n * oh * ow))
            .unwrap()
            .to_owned();
        let dw = dy_mat
            .dot(&cache.col.t())
            .into_shape_with_order((oc, ic, kh, kw))
            .unwrap();
        let db = dy_mat.sum_axis(ndarray::Axis(1));
        let dx = want_dx.then(|| {
            let wmat = self
                .weight
                .view()
                .into_shape_with_order((oc, ic * kh * kw))
                .unwrap();
            let dcol = wmat.t().dot(&dy_mat);
            col2im(&dcol, cache.x_dim, kh, kw, self.stride, self.pad)
        });
        (dw, db, dx)
    }
}

/// Fully connected layer; `weight` is (out, in).
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn he_init(out_dim: usize, in_dim: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, (2.0 / in_dim as f64).sqrt()).unwrap();
        Linear {
            weight: Array2::from_shape_fn((out_dim, in_dim), |_| normal.sample(rng)),
            bias: Array1::zeros(out_dim),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// x: (N, in) → (N, out)
    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }

    /// Returns (dweight, dbias, dx).
    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>) -> (Array2<f64>, Array1<f64>, Array2<f64>) {
        let dw = dy.t().dot(x);
        let db = dy.sum_axis(ndarray::Axis(0));
        let dx = dy.dot(&self.weight);
        (dw, db, dx)
    }
}

/// Elementwise max(0, x); the cache is the output itself.
pub fn relu_forward(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(|v| v.max(0.0))
}

pub fn relu_backward(y: &Array4<f64>, dy: &Array4<f64>) -> Array4<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |d, &v| {
        if v <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

/// 2×2 average pooling with stride 2 (floor semantics on odd dims).
/// Panics if a spatial dim is < 2: the backbone geometry must keep maps
/// poolable.
pub fn avgpool2_forward(x: &Array4<f64>) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    assert!(h >= 2 && w >= 2, "avgpool2 needs spatial dims >= 2, got {h}x{w}");
    let (oh, ow) = (h / 2, w / 2);
    Array4::from_shape_fn((n, c, oh, ow), |(ni, ci, r, col)| {
        let (r2, c2) = (r * 2, col * 2);
        0.25 * (x[(ni, ci, r2, c2)] + x[(ni, ci, r2, c2 + 1)] + x[(ni, ci, r2 + 1, c2)] + x[(ni, ci, r2 + 1, c2 + 1)])
    })
}

pub fn avgpool2_backward(x_dim: (usize, usize, usize, usize), dy: &Array4<f64>) -> Array4<f64> {
    let mut dx = Array4::<f64>::zeros(x_dim);
    let (n, c, oh, ow) = dy.dim();
    for ni in 0..n {
        for ci in 0..c {
            for r in 0..oh {
                for col in 0..ow {
                    let g = 0.25 * dy[(ni, ci, r, col)];
                    let (r2, c2) = (r * 2, col * 2);
                    dx[(ni, ci, r2, c2)] += g;
                    dx[(ni, ci, r2, c2 + 1)] += g;
                    dx[(ni, ci, r2 + 1, c2)] += g;
                    dx[(ni, ci, r2 + 1, c2 + 1)] += g;
                }
            }
        }
    }
    dx
}

/// Global average pool (N, C, H, W) → (N, C).
pub fn gap_forward(x: &Array4<f64>) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let scale = 1.0 / (h * w) as f64;
    let mut y = Array2::<f64>::zeros((n, c));
    for ni in 0..n {
        for ci in 0..c {
            let mut sum = 0.0;
            for r in 0..h {
                for col in 0..w {
                    sum += x[(ni, ci, r, col)];
                }
            }
            y[(ni, ci)] = sum * scale;
        }
    }
    y
}

pub fn gap_backward(x_dim: (usize, usize, usize, usize), dy: &Array2<f64>) -> Array4<f64> {
    let (_, _, h, w) = x_dim;
    let scale = 1.0 / (h * w) as f64;
    Array4::from_shape_fn(x_dim, |(ni, ci, _, _)| dy[(ni, ci)] * scale)
}
