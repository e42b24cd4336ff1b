//! Prototypical contrastive learning over the two autoencoder feature
//! streams: ContrastNet encoder + projection head, momentum encoder,
//! k-means prototypes with concentration estimates, InfoNCE/ProtoNCE, and
//! the EM training loop.

mod kmeans;
mod losses;
mod net;
mod train;

pub use kmeans::{kmeans, KmeansResult};
pub use losses::{
    clamp_concentrations, concentration, info_nce, info_nce_with_grad, proto_nce,
    proto_nce_with_grad, PHI_FLOOR,
};
pub use net::{features_to_input, normalize_rows, ContrastEncoder, ContrastOutputs, CONTRAST_DIM};
pub use train::{
    contrast_forward, extract_contrast_features, run_estep, train_contrastnet, ContrastConfig,
    ContrastEpochRecord, ContrastTrainResult,
};

pub use crate::nn::momentum_update;

use ndarray::Array2;

use crate::error::{Error, Result};

/// Prototypes for one cluster count `k_m`.
#[derive(Debug, Clone)]
pub struct PrototypeGranularity {
    /// `(k, d)`; rows are unit-norm after the E-step normalization.
    pub centroids: Array2<f64>,
    /// Per-cluster concentration, clamped to at least [`PHI_FLOOR`].
    pub phi: Vec<f64>,
    /// Cluster id of every training sample.
    pub assignments: Vec<usize>,
}

/// E-step output across all granularities.
#[derive(Debug, Clone)]
pub struct PrototypeSet {
    pub granularities: Vec<PrototypeGranularity>,
}

impl PrototypeSet {
    pub fn validate(&self) -> Result<()> {
        for (m, g) in self.granularities.iter().enumerate() {
            let (k, _) = g.centroids.dim();
            if k == 0 {
                return Err(Error::Validation(format!("granularity {m} has no clusters")));
            }
            if g.phi.len() != k {
                return Err(Error::Shape(format!("granularity {m}: {} phis for {k} clusters", g.phi.len())));
            }
            if g.phi.iter().any(|p| !p.is_finite() || *p < PHI_FLOOR) {
                return Err(Error::Validation(format!("granularity {m} has an invalid concentration")));
            }
            for row in g.centroids.outer_iter() {
                let norm = row.dot(&row).sqrt();
                if (norm - 1.0).abs() > 1e-5 {
                    return Err(Error::Validation(format!(
                        "granularity {m} centroid norm {norm} is not unit"
                    )));
                }
            }
            if g.assignments.iter().any(|&a| a >= k) {
                return Err(Error::Validation(format!("granularity {m} has an out-of-range assignment")));
            }
        }
        Ok(())
    }
}
