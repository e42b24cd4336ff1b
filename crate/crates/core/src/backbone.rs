//! Hybrid 3-D/2-D convolutional trunk and mirrored decoder shared by the
//! VAE and AAE streams.
//!
//! For 27×27×15 patches the stack reproduces the published layer shapes
//! exactly: three no-padding 3-D convolutions with kernels (7,3,3),
//! (5,3,3), (3,3,3), a reshape that folds the remaining spectral depth
//! into channels, one 3×3 2-D convolution, and adaptive average pooling
//! to a 4×4×64 map (1024-d flattened). Other patch geometries clip each
//! spectral kernel to the remaining depth; the spatial path needs S ≥ 9.

use ndarray::ArrayD;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::hsi::PatchSet;
use crate::nn::{
    AdaptiveAvgPool2d, BatchNorm, BnKind, Conv2d, Conv3d, ConvTranspose2d, ConvTranspose3d, Layer,
    Linear, Relu, Reshape, Sequential,
};

/// Pooled feature dimension: 64 channels × 4 × 4.
pub const POOLED_DIM: usize = 1024;
/// Latent code dimension.
pub const LATENT_DIM: usize = 128;

/// Input patch geometry: spectral channels after PCA and window size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGeometry {
    pub bands: usize,
    pub window: usize,
}

impl PatchGeometry {
    pub fn new(bands: usize, window: usize) -> Result<Self> {
        let g = Self { bands, window };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bands == 0 {
            return Err(Error::Validation("patch geometry needs at least one band".into()));
        }
        if self.window % 2 == 0 {
            return Err(Error::Validation(format!("window must be odd, got {}", self.window)));
        }
        if self.window < 9 {
            return Err(Error::Validation(format!(
                "window must be >= 9 for the four 3x3 spatial stages, got {}",
                self.window
            )));
        }
        Ok(())
    }

    /// Spectral kernel depths, nominally (7, 5, 3), clipped so every stage
    /// keeps depth >= 1.
    pub fn spectral_kernels(&self) -> [usize; 3] {
        let mut d = self.bands;
        let mut ks = [0usize; 3];
        for (i, nominal) in [7usize, 5, 3].into_iter().enumerate() {
            let k = nominal.min(d);
            ks[i] = k;
            d = d - k + 1;
        }
        ks
    }

    /// Spectral depths after each 3-D stage: `[d0, d1, d2, d3]`.
    pub fn depths(&self) -> [usize; 4] {
        let ks = self.spectral_kernels();
        let d0 = self.bands;
        let d1 = d0 - ks[0] + 1;
        let d2 = d1 - ks[1] + 1;
        let d3 = d2 - ks[2] + 1;
        [d0, d1, d2, d3]
    }

    /// Spatial sizes after each convolution: `[S, S-2, S-4, S-6, S-8]`.
    pub fn spatial(&self) -> [usize; 5] {
        let s = self.window;
        [s, s - 2, s - 4, s - 6, s - 8]
    }

    /// Expected network input shape per sample: `(1, bands, S, S)`.
    pub fn input_shape(&self) -> [usize; 4] {
        [1, self.bands, self.window, self.window]
    }
}

/// Convolutional trunk: `(N, 1, K, S, S)` → `(N, 1024)` pooled features.
pub fn conv_trunk(geom: PatchGeometry, rng: &mut ChaCha8Rng) -> Sequential {
    let ks = geom.spectral_kernels();
    let d = geom.depths();
    let s = geom.spatial();
    let mut seq = Sequential::new();
    seq.push("conv1", Layer::Conv3d(Conv3d::new(1, 8, ks[0], 3, 3, rng)));
    seq.push("bn1", Layer::BatchNorm(BatchNorm::new(8, BnKind::ThreeD)));
    seq.push("relu1", Layer::Relu(Relu::new()));
    seq.push("conv2", Layer::Conv3d(Conv3d::new(8, 16, ks[1], 3, 3, rng)));
    seq.push("bn2", Layer::BatchNorm(BatchNorm::new(16, BnKind::ThreeD)));
    seq.push("relu2", Layer::Relu(Relu::new()));
    seq.push("conv3", Layer::Conv3d(Conv3d::new(16, 32, ks[2], 3, 3, rng)));
    seq.push("bn3", Layer::BatchNorm(BatchNorm::new(32, BnKind::ThreeD)));
    seq.push("relu3", Layer::Relu(Relu::new()));
    seq.push("fold", Layer::Reshape(Reshape::new(vec![32 * d[3], s[3], s[3]])));
    seq.push("conv4", Layer::Conv2d(Conv2d::new(32 * d[3], 64, 3, 3, rng)));
    seq.push("bn4", Layer::BatchNorm(BatchNorm::new(64, BnKind::TwoD)));
    seq.push("relu4", Layer::Relu(Relu::new()));
    seq.push("pool", Layer::AdaptiveAvgPool2d(AdaptiveAvgPool2d::new(4, 4)));
    seq.push("flatten", Layer::Reshape(Reshape::new(vec![POOLED_DIM])));
    seq
}

/// Decoder: `(N, 128)` latent → `(N, 1, K, S, S)` reconstruction.
/// Final layer is a BatchNorm3d with no activation.
pub fn decoder(geom: PatchGeometry, rng: &mut ChaCha8Rng) -> Sequential {
    let ks = geom.spectral_kernels();
    let d = geom.depths();
    let s = geom.spatial();
    let mut seq = Sequential::new();
    seq.push("lin1", Layer::Linear(Linear::new(LATENT_DIM, 256, rng)));
    seq.push("relu1", Layer::Relu(Relu::new()));
    seq.push("lin2", Layer::Linear(Linear::new(256, 64 * s[4] * s[4], rng)));
    seq.push("relu2", Layer::Relu(Relu::new()));
    seq.push("unflatten", Layer::Reshape(Reshape::new(vec![64, s[4], s[4]])));
    seq.push("deconv4", Layer::ConvTranspose2d(ConvTranspose2d::new(64, 32 * d[3], 3, 3, rng)));
    seq.push("bn4", Layer::BatchNorm(BatchNorm::new(32 * d[3], BnKind::TwoD)));
    seq.push("relu3", Layer::Relu(Relu::new()));
    seq.push("unfold", Layer::Reshape(Reshape::new(vec![32, d[3], s[3], s[3]])));
    seq.push("deconv3", Layer::ConvTranspose3d(ConvTranspose3d::new(32, 16, ks[2], 3, 3, rng)));
    seq.push("bn3", Layer::BatchNorm(BatchNorm::new(16, BnKind::ThreeD)));
    seq.push("relu4", Layer::Relu(Relu::new()));
    seq.push("deconv2", Layer::ConvTranspose3d(ConvTranspose3d::new(16, 8, ks[1], 3, 3, rng)));
    seq.push("bn2", Layer::BatchNorm(BatchNorm::new(8, BnKind::ThreeD)));
    seq.push("relu5", Layer::Relu(Relu::new()));
    seq.push("deconv1", Layer::ConvTranspose3d(ConvTranspose3d::new(8, 1, ks[0], 3, 3, rng)));
    seq.push("bn1", Layer::BatchNorm(BatchNorm::new(1, BnKind::ThreeD)));
    seq
}

/// Converts selected patches `(N, S, S, K)` into network input `(N, 1, K, S, S)`.
pub fn patches_to_input(set: &PatchSet, indices: &[usize]) -> ArrayD<f64> {
    let (_, s, _, k) = set.patches.dim();
    let n = indices.len();
    let mut x = ArrayD::<f64>::zeros(ndarray::IxDyn(&[n, 1, k, s, s]));
    for (row, &idx) in indices.iter().enumerate() {
        for b in 0..k {
            for y in 0..s {
                for xx in 0..s {
                    x[[row, 0, b, y, xx]] = set.patches[[idx, y, xx, b]] as f64;
                }
            }
        }
    }
    x
}

/// Checks a batch against the geometry's expected input shape.
pub fn check_input_shape(geom: PatchGeometry, x: &ArrayD<f64>) -> Result<()> {
    let want = geom.input_shape();
    if x.ndim() != 5 || x.shape()[1..] != want {
        return Err(Error::Shape(format!(
            "patch batch must be (N, 1, {}, {}, {}), got {:?}",
            geom.bands,
            geom.window,
            geom.window,
            x.shape()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{seeded_rng, Mode};

    #[test]
    fn canonical_geometry_matches_tables() {
        let g = PatchGeometry::new(15, 27).unwrap();
        assert_eq!(g.spectral_kernels(), [7, 5, 3]);
        assert_eq!(g.depths(), [15, 9, 5, 3]);
        assert_eq!(g.spatial(), [27, 25, 23, 21, 19]);
    }

    #[test]
    fn small_bands_clip_kernels() {
        let g = PatchGeometry::new(8, 9).unwrap();
        assert_eq!(g.spectral_kernels(), [7, 2, 1]);
        assert_eq!(g.depths(), [8, 2, 1, 1]);
        let mut rng = seeded_rng(1, "bk");
        let mut trunk = conv_trunk(g, &mut rng);
        let x = ArrayD::zeros(ndarray::IxDyn(&[2, 1, 8, 9, 9]));
        let y = trunk.forward(&x, Mode::Eval, false).unwrap();
        assert_eq!(y.shape(), &[2, POOLED_DIM]);
    }

    #[test]
    fn decoder_inverts_trunk_shapes() {
        for (bands, window) in [(15usize, 27usize), (8, 9), (1, 11)] {
            let g = PatchGeometry::new(bands, window).unwrap();
            let mut rng = seeded_rng(2, "bk-dec");
            let mut dec = decoder(g, &mut rng);
            let z = ArrayD::zeros(ndarray::IxDyn(&[2, LATENT_DIM]));
            let y = dec.forward(&z, Mode::Eval, false).unwrap();
            assert_eq!(y.shape(), &[2, 1, bands, window, window]);
        }
    }

    #[test]
    fn window_below_nine_rejected() {
        assert!(PatchGeometry::new(8, 7).is_err());
        assert!(PatchGeometry::new(8, 10).is_err());
    }
}
