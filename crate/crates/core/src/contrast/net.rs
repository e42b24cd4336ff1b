//! ContrastNet encoder: 1024-d autoencoder features reshaped to 4×4×64
//! maps, a light transposed-conv/conv stack, and a SimCLR-style projection
//! head. Pre-head features serve extraction; head outputs serve training.

use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};

use crate::backbone::POOLED_DIM;
use crate::error::{Error, Result};
use crate::nn::{
    seeded_rng, BatchNorm, BnKind, Conv2d, ConvTranspose2d, Layer, Linear, Mode, NetParams, Relu,
    Reshape, Sequential, TensorRole, TraceRow,
};
use crate::FeatureMatrix;

/// Contrast feature dimension (pre-head and projected).
pub const CONTRAST_DIM: usize = 128;

/// One forward batch: both outputs are L2-normalized row-wise.
#[derive(Debug, Clone)]
pub struct ContrastOutputs {
    /// Pre-head features, used for extraction/testing.
    pub contrast_feature: Array2<f64>,
    /// Projection-head outputs, used by the training losses.
    pub projected: Array2<f64>,
}

/// Row-wise L2 normalization; returns the normalized rows and the norms.
pub fn normalize_rows(x: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let (n, _) = x.dim();
    let mut y = x.clone();
    let mut norms = Array1::<f64>::zeros(n);
    for (i, mut row) in y.outer_iter_mut().enumerate() {
        let norm = row.dot(&row).sqrt().max(1e-12);
        norms[i] = norm;
        row.mapv_inplace(|v| v / norm);
    }
    (y, norms)
}

/// Backward through row normalization: `gx = (gy − y (y·gy)) / ‖x‖`.
fn normalize_rows_backward(y: &Array2<f64>, norms: &Array1<f64>, gy: &Array2<f64>) -> Array2<f64> {
    let (n, d) = y.dim();
    let mut gx = Array2::<f64>::zeros((n, d));
    for i in 0..n {
        let yi = y.row(i);
        let gyi = gy.row(i);
        let dot = yi.dot(&gyi);
        for k in 0..d {
            gx[[i, k]] = (gyi[k] - yi[k] * dot) / norms[i];
        }
    }
    gx
}

#[derive(Debug, Clone)]
struct NormCache {
    projected: Array2<f64>,
    norms: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct ContrastEncoder {
    trunk: Sequential,
    head: Sequential,
    cache: Option<NormCache>,
}

impl ContrastEncoder {
    pub fn new(seed: u64) -> Self {
        let mut rng = seeded_rng(seed, "contrast-init");
        let mut trunk = Sequential::new();
        trunk.push("unflatten", Layer::Reshape(Reshape::new(vec![64, 4, 4])));
        trunk.push("deconv1", Layer::ConvTranspose2d(ConvTranspose2d::new(64, 64, 3, 3, &mut rng)));
        trunk.push("bn1", Layer::BatchNorm(BatchNorm::new(64, BnKind::TwoD)));
        trunk.push("relu1", Layer::Relu(Relu::new()));
        trunk.push("deconv2", Layer::ConvTranspose2d(ConvTranspose2d::new(64, 64, 3, 3, &mut rng)));
        trunk.push("bn2", Layer::BatchNorm(BatchNorm::new(64, BnKind::TwoD)));
        trunk.push("relu2", Layer::Relu(Relu::new()));
        trunk.push("conv1", Layer::Conv2d(Conv2d::new(64, 128, 3, 3, &mut rng)));
        trunk.push("bn3", Layer::BatchNorm(BatchNorm::new(128, BnKind::TwoD)));
        trunk.push("relu3", Layer::Relu(Relu::new()));
        trunk.push("conv2", Layer::Conv2d(Conv2d::new(128, 64, 3, 3, &mut rng)));
        trunk.push("bn4", Layer::BatchNorm(BatchNorm::new(64, BnKind::TwoD)));
        trunk.push("relu4", Layer::Relu(Relu::new()));
        trunk.push("conv3", Layer::Conv2d(Conv2d::new(64, 32, 3, 3, &mut rng)));
        trunk.push("relu5", Layer::Relu(Relu::new()));
        trunk.push("flatten", Layer::Reshape(Reshape::new(vec![CONTRAST_DIM])));
        let mut head = Sequential::new();
        head.push("lin1", Layer::Linear(Linear::new(CONTRAST_DIM, CONTRAST_DIM, &mut rng)));
        head.push("relu", Layer::Relu(Relu::new()));
        head.push("lin2", Layer::Linear(Linear::new(CONTRAST_DIM, CONTRAST_DIM, &mut rng)));
        Self { trunk, head, cache: None }
    }

    fn check_input(x: &Array2<f64>) -> Result<()> {
        if x.dim().1 != POOLED_DIM {
            return Err(Error::Shape(format!(
                "contrast encoder expects (N, {POOLED_DIM}) features, got {:?}",
                x.dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&mut self, x: &Array2<f64>, mode: Mode, train: bool) -> Result<ContrastOutputs> {
        Self::check_input(x)?;
        let h = self.trunk.forward(&x.clone().into_dyn(), mode, train)?;
        let h2: Array2<f64> = h.into_dimensionality().unwrap();
        let (feature, _) = normalize_rows(&h2);
        let p = self.head.forward(&h2.into_dyn(), mode, train)?;
        let p2: Array2<f64> = p.into_dimensionality().unwrap();
        let (projected, norms) = normalize_rows(&p2);
        if train {
            self.cache = Some(NormCache { projected: projected.clone(), norms });
        }
        Ok(ContrastOutputs { contrast_feature: feature, projected })
    }

    /// Backward from a gradient on the normalized projection.
    pub fn backward(&mut self, g_projected: &Array2<f64>) -> Result<()> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::Shape("ContrastEncoder: backward before forward".into()))?;
        let gp = normalize_rows_backward(&cache.projected, &cache.norms, g_projected);
        let gh = self.head.backward(&gp.into_dyn())?;
        self.trunk.backward(&gh)?;
        Ok(())
    }

    pub fn trace(&mut self, x: &Array2<f64>) -> Result<Vec<TraceRow>> {
        Self::check_input(x)?;
        let (h, mut rows) = self.trunk.trace(&x.clone().into_dyn())?;
        let (_, head_rows) = self.head.trace(&h)?;
        rows.extend(head_rows);
        Ok(rows)
    }
}

impl NetParams for ContrastEncoder {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<f64>, ArrayViewD<f64>)) {
        self.trunk.visit_params(&mut |n, p, g| f(&format!("trunk.{n}"), p, g));
        self.head.visit_params(&mut |n, p, g| f(&format!("head.{n}"), p, g));
    }

    fn visit_tensors(&self, f: &mut dyn FnMut(&str, TensorRole, ArrayViewD<f64>)) {
        self.trunk.visit_tensors(&mut |n, r, t| f(&format!("trunk.{n}"), r, t));
        self.head.visit_tensors(&mut |n, r, t| f(&format!("head.{n}"), r, t));
    }

    fn visit_tensors_mut(&mut self, f: &mut dyn FnMut(&str, TensorRole, ArrayViewMutD<f64>)) {
        self.trunk.visit_tensors_mut(&mut |n, r, t| f(&format!("trunk.{n}"), r, t));
        self.head.visit_tensors_mut(&mut |n, r, t| f(&format!("head.{n}"), r, t));
    }

    fn zero_grad(&mut self) {
        self.trunk.zero_grad();
        self.head.zero_grad();
    }
}

/// Converts rows of a stored feature matrix into a network input batch.
pub fn features_to_input(feats: &FeatureMatrix, rows: &[usize]) -> Array2<f64> {
    let d = feats.dim().1;
    let mut x = Array2::<f64>::zeros((rows.len(), d));
    for (i, &r) in rows.iter().enumerate() {
        for j in 0..d {
            x[[i, j]] = feats[[r, j]] as f64;
        }
    }
    x
}
