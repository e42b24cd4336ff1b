//! Individual layers: forward, backward, parameter access.
//!
//! Convolutions follow PyTorch conventions: stride 1, no padding, weight
//! layouts `(Co, Ci, k...)` for convolutions and `(Ci, Co, k...)` for
//! transposed convolutions, uniform fan-in initialization. Batches are
//! processed in fixed-size chunks so the im2col buffers stay small.

use ndarray::{Array1, Array2, ArrayD, ArrayViewD, ArrayViewMutD, Axis, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::im2col::{col2im_2d, col2im_3d, from_channel_mat, im2col_2d, im2col_3d, to_channel_mat};
use super::{Mode, TensorRole};
use crate::error::{Error, Result};

/// Batch rows lowered per im2col GEMM call.
const CONV_CHUNK: usize = 16;

fn uniform(rng: &mut ChaCha8Rng, bound: f64) -> f64 {
    rng.random_range(-bound..bound)
}

fn shape_err(layer: &str, expect: &str, got: &[usize]) -> Error {
    Error::Shape(format!("{layer}: expected {expect}, got {got:?}"))
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    gw: Array2<f64>,
    gb: Array1<f64>,
    cache_x: Option<Array2<f64>>,
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        let w = Array2::from_shape_fn((out_features, in_features), |_| uniform(rng, bound));
        let b = Array1::from_shape_fn(out_features, |_| uniform(rng, bound));
        Self {
            gw: Array2::zeros(w.dim()),
            gb: Array1::zeros(b.dim()),
            w,
            b,
            cache_x: None,
        }
    }

    pub fn forward(&mut self, x: &ArrayD<f64>, _mode: Mode, train: bool) -> Result<ArrayD<f64>> {
        let x2 = x
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .map_err(|_| shape_err("Linear", "(N, in)", x.shape()))?;
        if x2.dim().1 != self.w.dim().1 {
            return Err(shape_err("Linear", &format!("(N, {})", self.w.dim().1), x.shape()));
        }
        let mut y = x2.dot(&self.w.t());
        y += &self.b;
        if train {
            self.cache_x = Some(x2.to_owned());
        }
        Ok(y.into_dyn())
    }

    pub fn backward(&mut self, gy: &ArrayD<f64>) -> Result<ArrayD<f64>> {
        let gy2 = gy
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .map_err(|_| shape_err("Linear", "(N, out)", gy.shape()))?;
        let x = self.cache_x.take().ok_or_else(|| Error::Shape("Linear: backward before forward".into()))?;
        self.gw += &gy2.t().dot(&x);
        self.gb += &gy2.sum_axis(Axis(0));
        Ok(gy2.dot(&self.w).into_dyn())
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<f64>, ArrayViewD<f64>)) {
        f(&format!("{prefix}.weight"), self.w.view_mut().into_dyn(), self.gw.view().into_dyn());
        f(&format!("{prefix}.bias"), self.b.view_mut().into_dyn(), self.gb.view().into_dyn());
    }

    pub fn zero_grad(&mut self) {
        self.gw.fill(0.0);
        self.gb.fill(0.0);
    }
}

// ---------------------------------------------------------------------------
// ReLU
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Option<ArrayD<f64>>,
}

impl Relu {
    pub fn new() -> Self {
        Self { mask: None }
    }

    pub fn forward(&mut self, x: &ArrayD<f64>, train: bool) -> ArrayD<f64> {
        let y = x.mapv(|v| if v > 0.0 { v } else { 0.0 });
        if train {
            self.mask = Some(x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }));
        }
        y
    }

    pub fn backward(&mut self, gy: &ArrayD<f64>) -> Result<ArrayD<f64>> {
        let mask = self.mask.take().ok_or_else(|| Error::Shape("ReLU: backward before forward".into()))?;
        Ok(gy * &mask)
    }
}

// ---------------------------------------------------------------------------
// Conv2d / Conv3d
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Conv2d {
    /// `(Co, Ci, kh, kw)`
    pub w: ArrayD<f64>,
    pub b: Array1<f64>,
    gw: ArrayD<f64>,
    gb: Array1<f64>,
    cache_x: Option<ArrayD<f64>>,
}

impl Conv2d {
    pub fn new(ci: usize, co: usize, kh: usize, kw: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / ((ci * kh * kw) as f64).sqrt();
        let w = ArrayD::from_shape_fn(IxDyn(&[co, ci, kh, kw]), |_| uniform(rng, bound));
        let b = Array1::from_shape_fn(co, |_| uniform(rng, bound));
        Self {
            gw: ArrayD::zeros(w.raw_dim()),
            gb: Array1::zeros(co),
            w,
            b,
            cache_x: None,
        }
    }

    fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.w.shape();
        (s[0], s[1], s[2], s[3])
    }

    pub fn forward(&mut self, x: &ArrayD<f64>, train: bool) -> Result<ArrayD<f64>> {
        let (co, ci, kh, kw) = self.dims();
        let x4 = x
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .map_err(|_| shape_err("Conv2d", "(N, C, H, W)", x.shape()))?;
        let (n, c, h, w) = x4.dim();
        if c != ci || h < kh || w < kw {
            return Err(shape_err("Conv2d", &format!("(N, {ci}, >={kh}, >={kw})"), x.shape()));
        }
        let (ho, wo) = (h - kh + 1, w - kw + 1);
        let w_mat = self.w.view().into_shape_with_order((co, ci * kh * kw)).unwrap();
        let mut y = ArrayD::<f64>::zeros(IxDyn(&[n, co, ho, wo]));
        for start in (0..n).step_by(CONV_CHUNK) {
            let stop = (start + CONV_CHUNK).min(n);
            let xc = x4.slice(ndarray::s![start..stop, .., .., ..]);
            let cols = im2col_2d(xc, kh, kw);
            let y_mat = w_mat.dot(&cols);
            let yc = from_channel_mat(&y_mat, stop - start, &[ho, wo]);
            y.slice_mut(ndarray::s![start..stop, .., .., ..]).assign(&yc);
        }
        for c_out in 0..co {
            y.index_axis_mut(Axis(1), c_out).mapv_inplace(|v| v + self.b[c_out]);
        }
        if train {
            self.cache_x = Some(x.clone());
        }
        Ok(y)
    }

    pub fn backward(&mut self, gy: &ArrayD<f64>) -> Result<ArrayD<f64>> {
        let (co, ci, kh, kw) = self.dims();
        let x = self.cache_x.take().ok_or_else(|| Error::Shape("Conv2d: backward before forward".into()))?;
        let x4 = x.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let gy4 = gy
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .map_err(|_| shape_err("Conv2d", "(N, Co, Ho, Wo)", gy.shape()))?;
        let (n, _, h, w) = x4.dim();
        let w_mat = self.w.view().into_shape_with_order((co, ci * kh * kw)).unwrap();
        let mut gw_mat = Array2::<f64>::zeros((co, ci * kh * kw));
        let mut gx = ArrayD::<f64>::zeros(x.raw_dim());
        for start in (0..n).step_by(CONV_CHUNK) {
            let stop = (start + CONV_CHUNK).min(n);
            let xc = x4.slice(ndarray::s![start..stop, .., .., ..]);
            let cols = im2col_2d(xc, kh, kw);
            let gyc = gy4.slice(ndarray::s![start..stop, .., .., ..]);
            let gy_mat = to_channel_mat(&gyc.into_dyn());
            gw_mat += &gy_mat.dot(&cols.t());
            self.gb += &gy_mat.sum_axis(Axis(1));
            let dcols = w_mat.t().dot(&gy_mat);
            let gxc = col2im_2d(&dcols, stop - start, ci, h, w, kh, kw);
            gx.slice_mut(ndarray::s![start..stop, .., .., ..]).assign(&gxc);
        }
        self.gw += &gw_mat.into_shape_with_order((co, ci, kh, kw)).unwrap().into_dyn();
        Ok(gx)
    }
}

#[derive(Debug, Clone)]
pub struct Conv3d {
    /// `(Co, Ci, kd, kh, kw)`
    pub w: ArrayD<f64>,
    pub b: Array1<f64>,
    gw: ArrayD<f64>,
    gb: Array1<f64>,
    cache_x: Option<ArrayD<f64>>,
}

impl Conv3d {
    pub fn new(ci: usize, co: usize, kd: usize, kh: usize, kw: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / ((ci * kd * kh * kw) as f64).sqrt();
        let w = ArrayD::from_shape_fn(IxDyn(&[co, ci, kd, kh, kw]), |_| uniform(rng, bound));
        let b = Array1::from_shape_fn(co, |_| uniform(rng, bound));
        Self {
            gw: ArrayD::zeros(w.raw_dim()),
            gb: Array1::zeros(co),
            w,
            b,
            cache_x: None,
        }
    }

    fn dims(&self) -> (usize, usize, usize, usize, usize) {
        let s = self.w.shape();
        (s[0], s[1], s[2], s[3], s[4])
    }

    pub fn forward(&mut self, x: &ArrayD<f64>, train: bool) -> Result<ArrayD<f64>> {
        let (co, ci, kd, kh, kw) = self.dims();
        let x5 = x
            .view()
            .into_dimensionality::<ndarray::Ix5>()
            .map_err(|_| shape_err("Conv3d", "(N, C, D, H, W)", x.shape()))?;
        let (n, c, d, h, w) = x5.dim();
        if c != ci || d < kd || h < kh || w < kw {
            return Err(shape_err(
                "Conv3d",
                &format!("(N, {ci}, >={kd}, >={kh}, >={kw})"),
                x.shape(),
            ));
        }
        let (dd, ho, wo) = (d - kd + 1, h - kh + 1, w - kw + 1);
        let w_mat = self.w.view().into_shape_with_order((co, ci * kd * kh * kw)).unwrap();
        let mut y = ArrayD::<f64>::zeros(IxDyn(&[n, co, dd, ho, wo]));
        for start in (0..n).step_by(CONV_CHUNK) {
            let stop = (start + CONV_CHUNK).min(n);
            let xc = x5.slice(ndarray::s![start..stop, .., .., .., ..]);
            let cols = im2col_3d(xc, kd, kh, kw);
            let y_mat = w_mat.dot(&cols);
            let yc = from_channel_mat(&y_mat, stop - start, &[dd, ho, wo]);
            y.slice_mut(ndarray::s![start..stop, .., .., .., ..]).assign(&yc);
        }
        for c_out in 0..co {
            y.index_axis_mut(Axis(1), c_out).mapv_inplace(|v| v + self.b[c_out]);
        }
        if train {
            self.cache_x = Some(x.clone());
        }
        Ok(y)
    }

    pub fn backward(&mut self, gy: &ArrayD<f64>) -> Result<ArrayD<f64>> {
        let (co, ci, kd, kh, kw) = self.dims();
        let x = self.cache_x.take().ok_or_else(|| Error::Shape("Conv3d: backward before forward".into()))?;
        let x5 = x.view().into_dimensionality::<ndarray::Ix5>().unwrap();
        let gy5 = gy
            .view()
            .into_dimensionality::<ndarray::Ix5>()
            .map_err(|_| shape_err("Conv3d", "(N, Co, Do, Ho, Wo)", gy.shape()))?;
        let (n, _, d, h, w) = x5.dim();
        let w_mat = self.w.view().into_shape_with_order((co, ci * kd * kh * kw)).unwrap();
        let mut gw_mat = Array2::<f64>::zeros((co, ci * kd * kh * kw));
        let mut gx = ArrayD::<f64>::zeros(x.raw_dim());
        for start in (0..n).step_by(CONV_CHUNK) {
            let stop = (start + CONV_CHUNK).min(n);
            let xc = x5.slice(ndarray::s![start..stop, .., .., .., ..]);
            let cols = im2col_3d(xc, kd, kh, kw);
            let gyc = gy5.slice(ndarray::s![start..stop, .., .., .., ..]);
            let gy_mat = to_channel_mat(&gyc.into_dyn());
            gw_mat += &gy_mat.dot(&cols.t());
            self.gb += &gy_mat.sum_axis(Axis(1));
            let dcols = w_mat.t().dot(&gy_mat);
            let gxc = col2im_3d(&dcols, stop - start, ci, d, h, w, kd, kh, kw);
            gx.slice_mut(ndarray::s![start..stop, .., .., .., ..]).assign(&gxc);
        }
        self.gw += &gw_mat.into_shape_with_order((co, ci, kd, kh, kw)).unwrap().into_dyn();
        Ok(gx)
    }
}

// ---------------------------------------------------------------------------
// Transposed convolutions
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    /// `(Ci, Co, kh, kw)`
    pub w: ArrayD<f64>,
    pub b: Array1<f64>,
    gw: ArrayD<f64>,
    gb: Array1<f64>,
    cache_x: Option<ArrayD<f64>>,
}

impl ConvTranspose2d {
    pub fn new(ci: usize, co: usize, kh: usize, kw: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / ((co * kh * kw) as f64).sqrt();
        let w = ArrayD::from_shape_fn(IxDyn(&[ci, co, kh, kw]), |_| uniform(rng, bound));
        let b = Array1::from_shape_fn(co, |_| uniform(rng, bound));
        Self {
            gw: ArrayD::zeros(w.raw_dim()),
            gb: Array1::zeros(co),
            w,
            b,
            cache_x: None,
        }
    }

    fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.w.shape();
        (s[0], s[1], s[2], s[3])
    }

    pub fn forward(&mut self, x: &ArrayD<f64>, train: bool) -> Result<ArrayD<f64>> {
        let (ci, co, kh, kw) = self.dims();
        let x4 = x
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .map_err(|_| shape_err("ConvTransposed2d", "(N, C, H, W)", x.shape()))?;
        let (n, c, h, w) = x4.dim();
        if c != ci {
            return Err(shape_err("ConvTransposed2d", &format!("(N, {ci}, H, W)"), x.shape()));
        }
        let (ho, wo) = (h + kh - 1, w + kw - 1);
        let w_mat = self.w.view().into_shape_with_order((ci, co * kh * kw)).unwrap();
        let mut y = ArrayD::<f64>::zeros(IxDyn(&[n, co, ho, wo]));
        for start in (0..n).step_by(CONV_CHUNK) {
            let stop = (start + CONV_CHUNK).min(n);
            let xc = x4.slice(ndarray::s![start..stop, .., .., ..]);
            let x_mat = to_channel_mat(&xc.into_dyn());
            let cols = w_mat.t().dot(&x_mat);
            let yc = col2im_2d(&cols, stop - start, co, ho, wo, kh, kw);
            y.slice_mut(ndarray::s![start..stop, .., .., ..]).assign(&yc);
        }
        for c_out in 0..co {
            y.index_axis_mut(Axis(1), c_out).mapv_inplace(|v| v + self.b[c_out]);
        }
        if train {
            self.cache_x = Some(x.clone());
        }
        Ok(y)
    }

    pub fn backward(&mut self, gy: &ArrayD<f64>) -> Result<ArrayD<f64>> {
        let (ci, co, kh, kw) = self.dims();
        let x = self
            .cache_x
            .take()
            .ok_or_else(|| Error::Shape("ConvTransposed2d: backward before forward".into()))?;
        let x4 = x.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let gy4 = gy
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .map_err(|_| shape_err("ConvTransposed2d", "(N, Co, Ho, Wo)", gy.shape()))?;
        let (n, _, h, w) = x4.dim();
        let w_mat = self.w.view().into_shape_with_order((ci, co * kh * kw)).unwrap();
        let mut gw_mat = Array2::<f64>::zeros((ci, co * kh * kw));
        let mut gx = ArrayD::<f64>::zeros(x.raw_dim());
        for start in (0..n).step_by(CONV_CHUNK) {
            let stop = (start + CONV_CHUNK).min(n);
            let gyc = gy4.slice(ndarray::s![start..stop, .., .., ..]);
            let dcols = im2col_2d(gyc, kh, kw);
            let xc = x4.slice(ndarray::s![start..stop, .., .., ..]);
            let x_mat = to_channel_mat(&xc.into_dyn());
            gw_mat += &x_mat.dot(&dcols.t());
            let gx_mat = w_mat.dot(&dcols);
            let gxc = from_channel_mat(&gx_mat, stop - start, &[h, w]);
            gx.slice_mut(ndarray::s![start..stop, .., .., ..]).assign(&gxc);
            for c_out in 0..co {
                self.gb[c_out] += gyc.index_axis(Axis(1), c_out).sum();
            }
        }
        self.gw += &gw_mat.into_shape_with_order((ci, co, kh, kw)).unwrap().into_dyn();
        Ok(gx)
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose3d {
    /// `(Ci, Co, kd, kh, kw)`
    pub w: ArrayD<f64>,
    pub b: Array1<f64>,
    gw: ArrayD<f64>,
    gb: Array1<f64>,
    cache_x: Option<ArrayD<f64>>,
}

impl ConvTranspose3d {
    pub fn new(ci: usize, co: usize, kd: usize, kh: usize, kw: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / ((co * kd * kh * kw) as f64).sqrt();
        let w = ArrayD::from_shape_fn(IxDyn(&[ci, co, kd, kh, kw]), |_| uniform(rng, bound));
        let b = Array1::from_shape_fn(co, |_| uniform(rng, bound));
        Self {
            gw: ArrayD::zeros(w.raw_dim()),
            gb: Array1::zeros(co),
            w,
            b,
            cache_x: None,
        }
    }

    fn dims(&self) -> (usize, usize, usize, usize, usize) {
        let s = self.w.shape();
        (s[0], s[1], s[2], s[3], s[4])
    }

    pub fn forward(&mut self, x: &ArrayD<f64>, train: bool) -> Result<ArrayD<f64>> {
        let (ci, co, kd, kh, kw) = self.dims();
        let x5 = x
            .view()
            .into_dimensionality::<ndarray::Ix5>()
            .map_err(|_| shape_err("ConvTransposed3d", "(N, C, D, H, W)", x.shape()))?;
        let (n, c, d, h, w) = x5.dim();
        if c != ci {
            return Err(shape_err("ConvTransposed3d", &format!("(N, {ci}, D, H, W)"), x.shape()));
        }
        let (dp, ho, wo) = (d + kd - 1, h + kh - 1, w + kw - 1);
        let w_mat = self.w.view().into_shape_with_order((ci, co * kd * kh * kw)).unwrap();
        let mut y = ArrayD::<f64>::zeros(IxDyn(&[n, co, dp, ho, wo]));
        for start in (0..n).step_by(CONV_CHUNK) {
            let stop = (start + CONV_CHUNK).min(n);
            let xc = x5.slice(ndarray::s![start..stop, .., .., .., ..]);
            let x_mat = to_channel_mat(&xc.into_dyn());
            let cols = w_mat.t().dot(&x_mat);
            let yc = col2im_3d(&cols, stop - start, co, dp, ho, wo, kd, kh, kw);
            y.slice_mut(ndarray::s![start..stop, .., .., .., ..]).assign(&yc);
        }
        for c_out in 0..co {
            y.index_axis_mut(Axis(1), c_out).mapv_inplace(|v| v + self.b[c_out]);
        }
        if train {
            self.cache_x = Some(x.clone());
        }
        Ok(y)
    }

    pub fn backward(&mut self, gy: &ArrayD<f64>) -> Result<ArrayD<f64>> {
        let (ci, co, kd, kh, kw) = self.dims();
        let x = self
            .cache_x
            .take()
            .ok_or_else(|| Error::Shape("ConvTransposed3d: backward before forward".into()))?;
        let x5 = x.view().into_dimensionality::<ndarray::Ix5>().unwrap();
        let gy5 = gy
            .view()
            .into_dimensionality::<ndarray::Ix5>()
            .map_err(|_| shape_err("ConvTransposed3d", "(N, Co, Do, Ho, Wo)", gy.shape()))?;
        let (n, _, d, h, w) = x5.dim();
        let w_mat = self.w.view().into_shape_with_order((ci, co * kd * kh * kw)).unwrap();
        let mut gw_mat = Array2::<f64>::zeros((ci, co * kd * kh * kw));
        let mut gx = ArrayD::<f64>::zeros(x.raw_dim());
        for start in (0..n).step_by(CONV_CHUNK) {
            let stop = (start + CONV_CHUNK).min(n);
            let gyc = gy5.slice(ndarray::s![start..stop, .., .., .., ..]);
            let dcols = im2col_3d(gyc, kd, kh, kw);
            let xc = x5.slice(ndarray::s![start..stop, .., .., .., ..]);
            let x_mat = to_channel_mat(&xc.into_dyn());
            gw_mat += &x_mat.dot(&dcols.t());
            let gx_mat = w_mat.dot(&dcols);
            let gxc = from_channel_mat(&gx_mat, stop - start, &[d, h, w]);
            gx.slice_mut(ndarray::s![start..stop, .., .., .., ..]).assign(&gxc);
            for c_out in 0..co {
                self.gb[c_out] += gyc.index_axis(Axis(1), c_out).sum();
            }
        }
        self.gw += &gw_mat.into_shape_with_order((ci, co, kd, kh, kw)).unwrap().into_dyn();
        Ok(gx)
    }
}

// ---------------------------------------------------------------------------
// BatchNorm
// ---------------------------------------------------------------------------

/// Dimensionality hint so traces report `BatchNorm2d`/`BatchNorm3d` like
/// the PyTorch layer names.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnKind {
    OneD,
    TwoD,
    ThreeD,
}

/// Batch normalization over axis 1 with running statistics
/// (momentum 0.1, eps 1e-5, PyTorch semantics: biased variance for
/// normalization, unbiased for the running estimate).
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    g_gamma: Array1<f64>,
    g_beta: Array1<f64>,
    eps: f64,
    momentum: f64,
    kind: BnKind,
    cache: Option<BnCache>,
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: ArrayD<f64>,
    inv_std: Array1<f64>,
}

impl BatchNorm {
    pub fn new(channels: usize, kind: BnKind) -> Self {
        Self {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            g_gamma: Array1::zeros(channels),
            g_beta: Array1::zeros(channels),
            eps: 1e-5,
            momentum: 0.1,
            kind,
            cache: None,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            BnKind::OneD => "BatchNorm1d",
            BnKind::TwoD => "BatchNorm2d",
            BnKind::ThreeD => "BatchNorm3d",
        }
    }

    pub fn forward(&mut self, x: &ArrayD<f64>, mode: Mode, train: bool) -> Result<ArrayD<f64>> {
        let c = self.gamma.len();
        if x.ndim() < 2 || x.shape()[1] != c {
            return Err(shape_err("BatchNorm", &format!("(N, {c}, ...)"), x.shape()));
        }
        let n = x.shape()[0];
        let p: usize = x.shape()[2..].iter().product();
        let xf = x.view().into_shape_with_order((n, c, p)).unwrap();
        let mut y = ArrayD::<f64>::zeros(x.raw_dim());
        let mut yf = y.view_mut().into_shape_with_order((n, c, p)).unwrap();
        match mode {
            Mode::Eval => {
                for ci in 0..c {
                    let inv = 1.0 / (self.running_var[ci] + self.eps).sqrt();
                    let (g, bt, mu) = (self.gamma[ci], self.beta[ci], self.running_mean[ci]);
                    for b in 0..n {
                        for pi in 0..p {
                            yf[[b, ci, pi]] = g * (xf[[b, ci, pi]] - mu) * inv + bt;
                        }
                    }
                }
                self.cache = None;
            }
            Mode::Train => {
                let m = (n * p) as f64;
                let mut xhat = ArrayD::<f64>::zeros(x.raw_dim());
                let mut xhat_f = xhat.view_mut().into_shape_with_order((n, c, p)).unwrap();
                let mut inv_std = Array1::<f64>::zeros(c);
                for ci in 0..c {
                    let mut sum = 0.0;
                    let mut sum_sq = 0.0;
                    for b in 0..n {
                        for pi in 0..p {
                            let v = xf[[b, ci, pi]];
                            sum += v;
                            sum_sq += v * v;
                        }
                    }
                    let mean = sum / m;
                    let var = (sum_sq / m - mean * mean).max(0.0);
                    let inv = 1.0 / (var + self.eps).sqrt();
                    inv_std[ci] = inv;
                    let (g, bt) = (self.gamma[ci], self.beta[ci]);
                    for b in 0..n {
                        for pi in 0..p {
                            let xh = (xf[[b, ci, pi]] - mean) * inv;
                            xhat_f[[b, ci, pi]] = xh;
                            yf[[b, ci, pi]] = g * xh + bt;
                        }
                    }
                    let unbiased = if m > 1.0 { var * m / (m - 1.0) } else { var };
                    self.running_mean[ci] = (1.0 - self.momentum) * self.running_mean[ci] + self.momentum * mean;
                    self.running_var[ci] = (1.0 - self.momentum) * self.running_var[ci] + self.momentum * unbiased;
                }
                drop(xhat_f);
                if train {
                    self.cache = Some(BnCache { xhat, inv_std });
                }
            }
        }
        drop(yf);
        Ok(y)
    }

    pub fn backward(&mut self, gy: &ArrayD<f64>) -> Result<ArrayD<f64>> {
        let cache = self.cache.take().ok_or_else(|| Error::Shape("BatchNorm: backward before forward".into()))?;
        let c = self.gamma.len();
        let n = gy.shape()[0];
        let p: usize = gy.shape()[2..].iter().product();
        let m = (n * p) as f64;
        let gyf = gy.view().into_shape_with_order((n, c, p)).unwrap();
        let xhat_f = cache.xhat.view().into_shape_with_order((n, c, p)).unwrap();
        let mut gx = ArrayD::<f64>::zeros(gy.raw_dim());
        let mut gxf = gx.view_mut().into_shape_with_order((n, c, p)).unwrap();
        for ci in 0..c {
            let mut s1 = 0.0;
            let mut s2 = 0.0;
            for b in 0..n {
                for pi in 0..p {
                    let g = gyf[[b, ci, pi]];
                    s1 += g;
                    s2 += g * xhat_f[[b, ci, pi]];
                }
            }
            self.g_beta[ci] += s1;
            self.g_gamma[ci] += s2;
            let coeff = self.gamma[ci] * cache.inv_std[ci];
            for b in 0..n {
                for pi in 0..p {
                    let g = gyf[[b, ci, pi]];
                    gxf[[b, ci, pi]] = coeff * (g - s1 / m - xhat_f[[b, ci, pi]] * s2 / m);
                }
            }
        }
        drop(gxf);
        Ok(gx)
    }
}

// ---------------------------------------------------------------------------
// AdaptiveAvgPool2d
// ---------------------------------------------------------------------------

fn pool_region(i: usize, input: usize, output: usize) -> (usize, usize) {
    let start = (i * input) / output;
    let end = ((i + 1) * input).div_ceil(output);
    (start, end)
}

/// Adaptive average pooling to a fixed `(out_h, out_w)` map, PyTorch
/// region arithmetic (regions may overlap when sizes do not divide).
#[derive(Debug, Clone)]
pub struct AdaptiveAvgPool2d {
    pub out_h: usize,
    pub out_w: usize,
    cache_in: Option<Vec<usize>>,
}

impl AdaptiveAvgPool2d {
    pub fn new(out_h: usize, out_w: usize) -> Self {
        Self { out_h, out_w, cache_in: None }
    }

    pub fn forward(&mut self, x: &ArrayD<f64>, train: bool) -> Result<ArrayD<f64>> {
        let x4 = x
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .map_err(|_| shape_err("AdaptiveAvgPool2d", "(N, C, H, W)", x.shape()))?;
        let (n, c, h, w) = x4.dim();
        let mut y = ArrayD::<f64>::zeros(IxDyn(&[n, c, self.out_h, self.out_w]));
        for b in 0..n {
            for ci in 0..c {
                for oy in 0..self.out_h {
                    let (y0, y1) = pool_region(oy, h, self.out_h);
                    for ox in 0..self.out_w {
                        let (x0, x1) = pool_region(ox, w, self.out_w);
                        let mut sum = 0.0;
                        for iy in y0..y1 {
                            for ix in x0..x1 {
                                sum += x4[[b, ci, iy, ix]];
                            }
                        }
                        y[[b, ci, oy, ox]] = sum / ((y1 - y0) * (x1 - x0)) as f64;
                    }
                }
            }
        }
        if train {
            self.cache_in = Some(x.shape().to_vec());
        }
        Ok(y)
    }

    pub fn backward(&mut self, gy: &ArrayD<f64>) -> Result<ArrayD<f64>> {
        let in_shape = self
            .cache_in
            .take()
            .ok_or_else(|| Error::Shape("AdaptiveAvgPool2d: backward before forward".into()))?;
        let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
        let gy4 = gy.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let mut gx = ArrayD::<f64>::zeros(IxDyn(&in_shape));
        for b in 0..n {
            for ci in 0..c {
                for oy in 0..self.out_h {
                    let (y0, y1) = pool_region(oy, h, self.out_h);
                    for ox in 0..self.out_w {
                        let (x0, x1) = pool_region(ox, w, self.out_w);
                        let g = gy4[[b, ci, oy, ox]] / ((y1 - y0) * (x1 - x0)) as f64;
                        for iy in y0..y1 {
                            for ix in x0..x1 {
                                gx[[b, ci, iy, ix]] += g;
                            }
                        }
                    }
                }
            }
        }
        Ok(gx)
    }
}

// ---------------------------------------------------------------------------
// Reshape
// ---------------------------------------------------------------------------

/// Reshapes the per-sample dimensions (batch axis is preserved).
#[derive(Debug, Clone)]
pub struct Reshape {
    pub to: Vec<usize>,
    cache_in: Option<Vec<usize>>,
}

impl Reshape {
    pub fn new(to: Vec<usize>) -> Self {
        Self { to, cache_in: None }
    }

    pub fn forward(&mut self, x: &ArrayD<f64>, train: bool) -> Result<ArrayD<f64>> {
        let n = x.shape()[0];
        let per: usize = x.shape()[1..].iter().product();
        let want: usize = self.to.iter().product();
        if per != want {
            return Err(shape_err("Reshape", &format!("{want} elements per sample"), x.shape()));
        }
        let mut shape = vec![n];
        shape.extend_from_slice(&self.to);
        if train {
            self.cache_in = Some(x.shape().to_vec());
        }
        Ok(x.view().into_shape_with_order(IxDyn(&shape)).unwrap().to_owned())
    }

    pub fn backward(&mut self, gy: &ArrayD<f64>) -> Result<ArrayD<f64>> {
        let in_shape = self
            .cache_in
            .take()
            .ok_or_else(|| Error::Shape("Reshape: backward before forward".into()))?;
        Ok(gy.view().into_shape_with_order(IxDyn(&in_shape)).unwrap().to_owned())
    }
}

// ---------------------------------------------------------------------------
// Layer enum
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub enum Layer {
    Linear(Linear),
    Relu(Relu),
    Conv2d(Conv2d),
    Conv3d(Conv3d),
    ConvTranspose2d(ConvTranspose2d),
    ConvTranspose3d(ConvTranspose3d),
    BatchNorm(BatchNorm),
    AdaptiveAvgPool2d(AdaptiveAvgPool2d),
    Reshape(Reshape),
}

impl Layer {
    /// Layer-type label used in shape traces (PyTorch naming).
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Linear(_) => "Linear",
            Layer::Relu(_) => "ReLU",
            Layer::Conv2d(_) => "Conv2d",
            Layer::Conv3d(_) => "Conv3d",
            Layer::ConvTranspose2d(_) => "ConvTransposed2d",
            Layer::ConvTranspose3d(_) => "ConvTransposed3d",
            Layer::BatchNorm(b) => b.kind_name(),
            Layer::AdaptiveAvgPool2d(_) => "AdaptiveAvgPool2d",
            Layer::Reshape(_) => "Reshape",
        }
    }

    /// `train` controls whether backward caches are kept; `mode` selects
    /// batch-norm statistics.
    pub fn forward(&mut self, x: &ArrayD<f64>, mode: Mode, train: bool) -> Result<ArrayD<f64>> {
        match self {
            Layer::Linear(l) => l.forward(x, mode, train),
            Layer::Relu(l) => Ok(l.forward(x, train)),
            Layer::Conv2d(l) => l.forward(x, train),
            Layer::Conv3d(l) => l.forward(x, train),
            Layer::ConvTranspose2d(l) => l.forward(x, train),
            Layer::ConvTranspose3d(l) => l.forward(x, train),
            Layer::BatchNorm(l) => l.forward(x, mode, train),
            Layer::AdaptiveAvgPool2d(l) => l.forward(x, train),
            Layer::Reshape(l) => l.forward(x, train),
        }
    }

    pub fn backward(&mut self, gy: &ArrayD<f64>) -> Result<ArrayD<f64>> {
        match self {
            Layer::Linear(l) => l.backward(gy),
            Layer::Relu(l) => l.backward(gy),
            Layer::Conv2d(l) => l.backward(gy),
            Layer::Conv3d(l) => l.backward(gy),
            Layer::ConvTranspose2d(l) => l.backward(gy),
            Layer::ConvTranspose3d(l) => l.backward(gy),
            Layer::BatchNorm(l) => l.backward(gy),
            Layer::AdaptiveAvgPool2d(l) => l.backward(gy),
            Layer::Reshape(l) => l.backward(gy),
        }
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<f64>, ArrayViewD<f64>)) {
        match self {
            Layer::Linear(l) => l.visit_params(prefix, f),
            Layer::Conv2d(l) => {
                f(&format!("{prefix}.weight"), l.w.view_mut(), l.gw.view());
                f(&format!("{prefix}.bias"), l.b.view_mut().into_dyn(), l.gb.view().into_dyn());
            }
            Layer::Conv3d(l) => {
                f(&format!("{prefix}.weight"), l.w.view_mut(), l.gw.view());
                f(&format!("{prefix}.bias"), l.b.view_mut().into_dyn(), l.gb.view().into_dyn());
            }
            Layer::ConvTranspose2d(l) => {
                f(&format!("{prefix}.weight"), l.w.view_mut(), l.gw.view());
                f(&format!("{prefix}.bias"), l.b.view_mut().into_dyn(), l.gb.view().into_dyn());
            }
            Layer::ConvTranspose3d(l) => {
                f(&format!("{prefix}.weight"), l.w.view_mut(), l.gw.view());
                f(&format!("{prefix}.bias"), l.b.view_mut().into_dyn(), l.gb.view().into_dyn());
            }
            Layer::BatchNorm(l) => {
                f(&format!("{prefix}.gamma"), l.gamma.view_mut().into_dyn(), l.g_gamma.view().into_dyn());
                f(&format!("{prefix}.beta"), l.beta.view_mut().into_dyn(), l.g_beta.view().into_dyn());
            }
            Layer::Relu(_) | Layer::AdaptiveAvgPool2d(_) | Layer::Reshape(_) => {}
        }
    }

    pub fn visit_tensors(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorRole, ArrayViewD<f64>)) {
        use TensorRole::*;
        match self {
            Layer::Linear(l) => {
                f(&format!("{prefix}.weight"), Param, l.w.view().into_dyn());
                f(&format!("{prefix}.bias"), Param, l.b.view().into_dyn());
            }
            Layer::Conv2d(l) => {
                f(&format!("{prefix}.weight"), Param, l.w.view());
                f(&format!("{prefix}.bias"), Param, l.b.view().into_dyn());
            }
            Layer::Conv3d(l) => {
                f(&format!("{prefix}.weight"), Param, l.w.view());
                f(&format!("{prefix}.bias"), Param, l.b.view().into_dyn());
            }
            Layer::ConvTranspose2d(l) => {
                f(&format!("{prefix}.weight"), Param, l.w.view());
                f(&format!("{prefix}.bias"), Param, l.b.view().into_dyn());
            }
            Layer::ConvTranspose3d(l) => {
                f(&format!("{prefix}.weight"), Param, l.w.view());
                f(&format!("{prefix}.bias"), Param, l.b.view().into_dyn());
            }
            Layer::BatchNorm(l) => {
                f(&format!("{prefix}.gamma"), Param, l.gamma.view().into_dyn());
                f(&format!("{prefix}.beta"), Param, l.beta.view().into_dyn());
                f(&format!("{prefix}.running_mean"), Buffer, l.running_mean.view().into_dyn());
                f(&format!("{prefix}.running_var"), Buffer, l.running_var.view().into_dyn());
            }
            Layer::Relu(_) | Layer::AdaptiveAvgPool2d(_) | Layer::Reshape(_) => {}
        }
    }

    pub fn visit_tensors_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorRole, ArrayViewMutD<f64>)) {
        use TensorRole::*;
        match self {
            Layer::Linear(l) => {
                f(&format!("{prefix}.weight"), Param, l.w.view_mut().into_dyn());
                f(&format!("{prefix}.bias"), Param, l.b.view_mut().into_dyn());
            }
            Layer::Conv2d(l) => {
                f(&format!("{prefix}.weight"), Param, l.w.view_mut());
                f(&format!("{prefix}.bias"), Param, l.b.view_mut().into_dyn());
            }
            Layer::Conv3d(l) => {
                f(&format!("{prefix}.weight"), Param, l.w.view_mut());
                f(&format!("{prefix}.bias"), Param, l.b.view_mut().into_dyn());
            }
            Layer::ConvTranspose2d(l) => {
                f(&format!("{prefix}.weight"), Param, l.w.view_mut());
                f(&format!("{prefix}.bias"), Param, l.b.view_mut().into_dyn());
            }
            Layer::ConvTranspose3d(l) => {
                f(&format!("{prefix}.weight"), Param, l.w.view_mut());
                f(&format!("{prefix}.bias"), Param, l.b.view_mut().into_dyn());
            }
            Layer::BatchNorm(l) => {
                f(&format!("{prefix}.gamma"), Param, l.gamma.view_mut().into_dyn());
                f(&format!("{prefix}.beta"), Param, l.beta.view_mut().into_dyn());
                f(&format!("{prefix}.running_mean"), Buffer, l.running_mean.view_mut().into_dyn());
                f(&format!("{prefix}.running_var"), Buffer, l.running_var.view_mut().into_dyn());
            }
            Layer::Relu(_) | Layer::AdaptiveAvgPool2d(_) | Layer::Reshape(_) => {}
        }
    }

    pub fn zero_grad(&mut self) {
        match self {
            Layer::Linear(l) => l.zero_grad(),
            Layer::Conv2d(l) => {
                l.gw.fill(0.0);
                l.gb.fill(0.0);
            }
            Layer::Conv3d(l) => {
                l.gw.fill(0.0);
                l.gb.fill(0.0);
            }
            Layer::ConvTranspose2d(l) => {
                l.gw.fill(0.0);
                l.gb.fill(0.0);
            }
            Layer::ConvTranspose3d(l) => {
                l.gw.fill(0.0);
                l.gb.fill(0.0);
            }
            Layer::BatchNorm(l) => {
                l.g_gamma.fill(0.0);
                l.g_beta.fill(0.0);
            }
            Layer::Relu(_) | Layer::AdaptiveAvgPool2d(_) | Layer::Reshape(_) => {}
        }
    }
}
