//! im2col/col2im lowering for 2-D and 3-D convolutions (stride 1, no padding).

use ndarray::{Array2, Array4, Array5, ArrayView4, ArrayView5};

/// Lower 4-D input `(N, C, H, W)` into a `(C*kh*kw, N*Ho*Wo)` patch matrix
/// with `Ho = H-kh+1`, `Wo = W-kw+1`.
pub fn im2col_2d(x: ArrayView4<f64>, kh: usize, kw: usize) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let (ho, wo) = (h - kh + 1, w - kw + 1);
    let mut cols = Array2::<f64>::zeros((c * kh * kw, n * ho * wo));
    for ci in 0..c {
        for i in 0..kh {
            for j in 0..kw {
                let row = (ci * kh + i) * kw + j;
                let mut out_row = cols.row_mut(row);
                let out = out_row.as_slice_mut().unwrap();
                for b in 0..n {
                    for oy in 0..ho {
                        let base = (b * ho + oy) * wo;
                        for ox in 0..wo {
                            out[base + ox] = x[[b, ci, oy + i, ox + j]];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add a `(C*kh*kw, N*Ho*Wo)` patch matrix back into `(N, C, H, W)`.
pub fn col2im_2d(cols: &Array2<f64>, n: usize, c: usize, h: usize, w: usize, kh: usize, kw: usize) -> Array4<f64> {
    let (ho, wo) = (h - kh + 1, w - kw + 1);
    debug_assert_eq!(cols.dim(), (c * kh * kw, n * ho * wo));
    let mut x = Array4::<f64>::zeros((n, c, h, w));
    for ci in 0..c {
        for i in 0..kh {
            for j in 0..kw {
                let row = (ci * kh + i) * kw + j;
                let src_row = cols.row(row);
                let src = src_row.as_slice().unwrap();
                for b in 0..n {
                    for oy in 0..ho {
                        let base = (b * ho + oy) * wo;
                        for ox in 0..wo {
                            x[[b, ci, oy + i, ox + j]] += src[base + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Lower 5-D input `(N, C, D, H, W)` into a `(C*kd*kh*kw, N*Do*Ho*Wo)` patch matrix.
pub fn im2col_3d(x: ArrayView5<f64>, kd: usize, kh: usize, kw: usize) -> Array2<f64> {
    let (n, c, d, h, w) = x.dim();
    let (dd, ho, wo) = (d - kd + 1, h - kh + 1, w - kw + 1);
    let mut cols = Array2::<f64>::zeros((c * kd * kh * kw, n * dd * ho * wo));
    for ci in 0..c {
        for z in 0..kd {
            for i in 0..kh {
                for j in 0..kw {
                    let row = ((ci * kd + z) * kh + i) * kw + j;
                    let mut out_row = cols.row_mut(row);
                    let out = out_row.as_slice_mut().unwrap();
                    for b in 0..n {
                        for od in 0..dd {
                            for oy in 0..ho {
                                let base = ((b * dd + od) * ho + oy) * wo;
                                for ox in 0..wo {
                                    out[base + ox] = x[[b, ci, od + z, oy + i, ox + j]];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add a patch matrix back into `(N, C, D, H, W)`.
pub fn col2im_3d(
    cols: &Array2<f64>,
    n: usize,
    c: usize,
    d: usize,
    h: usize,
    w: usize,
    kd: usize,
    kh: usize,
    kw: usize,
) -> Array5<f64> {
    let (dd, ho, wo) = (d - kd + 1, h - kh + 1, w - kw + 1);
    debug_assert_eq!(cols.dim(), (c * kd * kh * kw, n * dd * ho * wo));
    let mut x = Array5::<f64>::zeros((n, c, d, h, w));
    for ci in 0..c {
        for z in 0..kd {
            for i in 0..kh {
                for j in 0..kw {
                    let row = ((ci * kd + z) * kh + i) * kw + j;
                    let src_row = cols.row(row);
                    let src = src_row.as_slice().unwrap();
                    for b in 0..n {
                        for od in 0..dd {
                            for oy in 0..ho {
                                let base = ((b * dd + od) * ho + oy) * wo;
                                for ox in 0..wo {
                                    x[[b, ci, od + z, oy + i, ox + j]] += src[base + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// Rearrange `(N, C, P...)` into a `(C, N*P)` matrix.
pub fn to_channel_mat(x: &ndarray::ArrayViewD<f64>) -> Array2<f64> {
    let n = x.shape()[0];
    let c = x.shape()[1];
    let p: usize = x.shape()[2..].iter().product();
    let flat = x.to_shape((n, c, p)).unwrap();
    let mut m = Array2::<f64>::zeros((c, n * p));
    for ci in 0..c {
        let mut row = m.row_mut(ci);
        let out = row.as_slice_mut().unwrap();
        for b in 0..n {
            for pi in 0..p {
                out[b * p + pi] = flat[[b, ci, pi]];
            }
        }
    }
    m
}

/// Inverse of [`to_channel_mat`]: `(C, N*P)` back to `(N, C, P...)`.
pub fn from_channel_mat(m: &Array2<f64>, n: usize, spatial: &[usize]) -> ndarray::ArrayD<f64> {
    let c = m.dim().0;
    let p: usize = spatial.iter().product();
    debug_assert_eq!(m.dim().1, n * p);
    let mut shape = vec![n, c];
    shape.extend_from_slice(spatial);
    let mut x = ndarray::ArrayD::<f64>::zeros(ndarray::IxDyn(&shape));
    {
        let mut flat = x.view_mut().into_shape_with_order((n, c, p)).unwrap();
        for ci in 0..c {
            let row = m.row(ci);
            let src = row.as_slice().unwrap();
            for b in 0..n {
                for pi in 0..p {
                    flat[[b, ci, pi]] = src[b * p + pi];
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array4, Array5};

    #[test]
    fn im2col_col2im_2d_adjoint() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y.
        let mut rng = crate::nn::seeded_rng(7, "im2col-test");
        let x = Array4::from_shape_fn((2, 3, 5, 4), |_| rand::Rng::random_range(&mut rng, -1.0..1.0));
        let cols = im2col_2d(x.view(), 3, 2);
        let y = Array2::from_shape_fn(cols.dim(), |_| rand::Rng::random_range(&mut rng, -1.0..1.0));
        let lhs: f64 = (&cols * &y).sum();
        let back = col2im_2d(&y, 2, 3, 5, 4, 3, 2);
        let rhs: f64 = (&x * &back).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn im2col_col2im_3d_adjoint() {
        let mut rng = crate::nn::seeded_rng(8, "im2col3-test");
        let x = Array5::from_shape_fn((2, 2, 4, 5, 3), |_| rand::Rng::random_range(&mut rng, -1.0..1.0));
        let cols = im2col_3d(x.view(), 2, 3, 2);
        let y = Array2::from_shape_fn(cols.dim(), |_| rand::Rng::random_range(&mut rng, -1.0..1.0));
        let lhs: f64 = (&cols * &y).sum();
        let back = col2im_3d(&y, 2, 2, 4, 5, 3, 2, 3, 2);
        let rhs: f64 = (&x * &back).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn channel_mat_round_trip() {
        let mut rng = crate::nn::seeded_rng(9, "chanmat-test");
        let x = Array4::from_shape_fn((3, 4, 2, 5), |_| rand::Rng::random_range(&mut rng, -1.0..1.0));
        let xd = x.clone().into_dyn();
        let m = to_channel_mat(&xd.view());
        let back = from_channel_mat(&m, 3, &[2, 5]);
        assert_eq!(back, xd);
    }
}
