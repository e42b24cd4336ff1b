//! Hyperspectral cube ingestion, PCA band reduction, patch extraction and
//! stratified splits.

mod container;
mod patches;
mod pca;
mod split;

pub use container::{load_cube, load_labels, save_cube, save_labels, ContainerHeader};
pub use patches::{extract_patches, PatchScope};
pub use pca::{apply_pca, fit_pca, standardize_bands, BandStats};
pub use split::stratified_split;

use ndarray::{Array1, Array2, Array3, Array4};

use crate::error::{Error, Result};

/// H×W×B radiance array plus a dataset identifier.
#[derive(Debug, Clone)]
pub struct HyperspectralCube {
    /// `(H, W, B)`, band fastest-varying in storage.
    pub data: Array3<f32>,
    pub name: String,
}

impl HyperspectralCube {
    pub fn new(data: Array3<f32>, name: impl Into<String>) -> Result<Self> {
        let (h, w, b) = data.dim();
        if h == 0 || w == 0 || b == 0 {
            return Err(Error::Validation(format!("cube dimensions must be >= 1, got {h}x{w}x{b}")));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Validation("cube contains non-finite values".into()));
        }
        Ok(Self { data, name: name.into() })
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn bands(&self) -> usize {
        self.data.dim().2
    }
}

/// Per-pixel class ids: 0 = unlabeled, 1..=C = classes.
#[derive(Debug, Clone)]
pub struct LabelMap {
    pub labels: Array2<i32>,
}

impl LabelMap {
    /// Validates non-negative labels and that every class in `1..=C`
    /// (with `C` the maximum label) has at least one pixel.
    pub fn new(labels: Array2<i32>) -> Result<Self> {
        let max = labels.iter().copied().max().unwrap_or(0);
        if labels.iter().any(|&v| v < 0) {
            return Err(Error::Validation("labels must be non-negative".into()));
        }
        if max < 2 {
            return Err(Error::Validation(format!(
                "label map needs at least 2 classes, highest class id is {max}"
            )));
        }
        let mut present = vec![false; (max + 1) as usize];
        for &v in labels.iter() {
            present[v as usize] = true;
        }
        if let Some(missing) = (1..=max).find(|&c| !present[c as usize]) {
            return Err(Error::Validation(format!("class {missing} of {max} has no pixels")));
        }
        Ok(Self { labels })
    }

    pub fn num_classes(&self) -> usize {
        *self.labels.iter().max().unwrap_or(&0) as usize
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.iter().filter(|&&v| v > 0).count()
    }
}

/// Principal directions fitted over all pixels of a cube.
#[derive(Debug, Clone)]
pub struct PcaModel {
    /// Length-B per-band mean of the fitting pixels.
    pub mean: Array1<f64>,
    /// `(K, B)`; rows are orthonormal principal directions.
    pub components: Array2<f64>,
    /// Non-increasing, length K.
    pub explained_variance: Array1<f64>,
}

impl PcaModel {
    pub fn output_dims(&self) -> usize {
        self.components.dim().0
    }

    pub fn input_bands(&self) -> usize {
        self.components.dim().1
    }
}

/// Sliding-window patches with their center coordinates and labels.
#[derive(Debug, Clone)]
pub struct PatchSet {
    /// `(N, S, S, K)`.
    pub patches: Array4<f32>,
    /// `(N, 2)` row/col center coordinates.
    pub coords: Array2<u32>,
    /// Length N; 0 means unlabeled.
    pub labels: Vec<i32>,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.patches.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn window(&self) -> usize {
        self.patches.dim().1
    }

    pub fn channels(&self) -> usize {
        self.patches.dim().3
    }

    /// Distinct class ids (> 0) present, ascending.
    pub fn classes(&self) -> Vec<i32> {
        let mut c: Vec<i32> = self.labels.iter().copied().filter(|&v| v > 0).collect();
        c.sort_unstable();
        c.dedup();
        c
    }
}

/// Disjoint train/test index lists into a labeled [`PatchSet`].
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SplitIndex {
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub seed: u64,
}
