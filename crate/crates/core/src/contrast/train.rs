//! EM training loop: warmup on InfoNCE with a momentum-embedding queue,
//! then per-epoch E-steps (cluster momentum embeddings of the VAE stream)
//! and M-steps (ProtoNCE on the primary encoder fed by the AAE stream).

use std::collections::VecDeque;

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::kmeans::kmeans;
use super::losses::{clamp_concentrations, concentration, info_nce_with_grad, proto_nce_with_grad, PHI_FLOOR};
use super::net::{features_to_input, normalize_rows, ContrastEncoder, ContrastOutputs};
use super::{PrototypeGranularity, PrototypeSet};
use crate::error::{Error, Result};
use crate::nn::{momentum_update, seeded_rng, Mode, NetParams, Sgd, TrainedEncoder};
use crate::FeatureMatrix;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastConfig {
    /// Negative sample count r.
    pub negatives: usize,
    pub temperature: f64,
    /// Cluster counts, one per granularity.
    pub clusters: Vec<usize>,
    /// Momentum-encoder EMA coefficient.
    pub momentum: f64,
    /// InfoNCE-only epochs before the EM phase starts.
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Learning rate is multiplied by `lr_decay_factor` once the epoch
    /// exceeds each listed boundary.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    /// Concentration smoothing α.
    pub alpha: f64,
    pub seed: u64,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        Self {
            negatives: 640,
            temperature: 0.01,
            clusters: vec![1000, 1500, 2500],
            momentum: 0.999,
            warmup_epochs: 30,
            total_epochs: 200,
            batch_size: 128,
            learning_rate: 0.003,
            weight_decay: 0.001,
            lr_decay_epochs: vec![120, 160],
            lr_decay_factor: 0.1,
            alpha: 10.0,
            seed: 1,
        }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(Error::Config("contrast temperature must be positive".into()));
        }
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return Err(Error::Config("contrast momentum must lie in (0, 1)".into()));
        }
        if self.negatives == 0 {
            return Err(Error::Config("contrast needs at least one negative".into()));
        }
        if self.clusters.is_empty() || self.clusters.iter().any(|&k| k < 2) {
            return Err(Error::Config("every cluster count must be >= 2".into()));
        }
        if self.total_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("contrast epochs and batch_size must be positive".into()));
        }
        if self.warmup_epochs > self.total_epochs {
            return Err(Error::Config("contrast warmup_epochs cannot exceed total_epochs".into()));
        }
        if self.learning_rate < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("contrast learning rates must be non-negative".into()));
        }
        if self.alpha <= 0.0 {
            return Err(Error::Config("contrast alpha must be positive".into()));
        }
        Ok(())
    }

    /// Desk-scale rule: every cluster count must satisfy `k_m <= N/4`.
    pub fn validate_clusters_for(&self, n_samples: usize) -> Result<()> {
        let limit = n_samples / 4;
        if let Some(&bad) = self.clusters.iter().find(|&&k| k > limit) {
            return Err(Error::Config(format!(
                "cluster count {bad} exceeds N/4 = {limit} for N = {n_samples}; \
                 override contrast.clusters with a smaller list"
            )));
        }
        Ok(())
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        let mut lr = self.learning_rate;
        for &boundary in &self.lr_decay_epochs {
            if epoch > boundary {
                lr *= self.lr_decay_factor;
            }
        }
        lr
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ContrastEpochRecord {
    pub epoch: usize,
    /// `warmup` or `proto`.
    pub phase: String,
    pub mean_loss: f64,
    pub lr: f64,
    /// Cluster counts in use this epoch (empty during warmup).
    pub clusters: Vec<usize>,
    pub phi_min: Option<f64>,
    pub phi_median: Option<f64>,
    pub phi_max: Option<f64>,
}

#[derive(Debug)]
pub struct ContrastTrainResult {
    pub encoder: TrainedEncoder<ContrastEncoder>,
    pub log: Vec<ContrastEpochRecord>,
}

/// Momentum-encodes every row (eval mode) and returns the projected,
/// normalized embeddings.
fn momentum_encode_all(
    momentum_enc: &ContrastEncoder,
    feats: &FeatureMatrix,
    batch_size: usize,
) -> Result<Array2<f64>> {
    let mut net = momentum_enc.clone();
    let n = feats.dim().0;
    let mut out = Array2::<f64>::zeros((n, super::CONTRAST_DIM));
    let indices: Vec<usize> = (0..n).collect();
    for batch in indices.chunks(batch_size.max(1)) {
        let x = features_to_input(feats, batch);
        let res = net.forward(&x, Mode::Eval, false)?;
        for (row, &idx) in batch.iter().enumerate() {
            out.row_mut(idx).assign(&res.projected.row(row));
        }
    }
    Ok(out)
}

/// E-step: cluster the momentum embeddings of the VAE stream at every
/// granularity and estimate per-cluster concentrations.
///
/// Pure in the encoder: it is taken by shared reference and never updated.
/// Concentrations use the raw k-means centroids; centroid rows are
/// normalized afterwards for use in the dot-product losses.
pub fn run_estep(
    momentum_enc: &ContrastEncoder,
    vae_feats: &FeatureMatrix,
    cfg: &ContrastConfig,
    epoch: usize,
) -> Result<PrototypeSet> {
    let v = momentum_encode_all(momentum_enc, vae_feats, cfg.batch_size)?;
    let n = v.dim().0;
    let mut granularities = Vec::with_capacity(cfg.clusters.len());
    for (m, &k) in cfg.clusters.iter().enumerate() {
        let seed = cfg.seed ^ ((epoch as u64) << 16) ^ (m as u64);
        let result = kmeans(&v, k, seed)?;
        let mut phi = Vec::with_capacity(k);
        for c in 0..k {
            let members: Vec<usize> = (0..n).filter(|&i| result.assignments[i] == c).collect();
            if members.is_empty() {
                phi.push(PHI_FLOOR);
                continue;
            }
            let mut member_feats = Array2::<f64>::zeros((members.len(), v.dim().1));
            for (row, &i) in members.iter().enumerate() {
                member_feats.row_mut(row).assign(&v.row(i));
            }
            let centroid: Vec<f64> = result.centroids.row(c).to_vec();
            phi.push(concentration(&member_feats, &centroid, cfg.alpha)?);
        }
        clamp_concentrations(&mut phi);
        let (centroids, _) = normalize_rows(&result.centroids);
        granularities.push(PrototypeGranularity { centroids, phi, assignments: result.assignments });
    }
    let set = PrototypeSet { granularities };
    set.validate()?;
    Ok(set)
}

/// Negative pool for InfoNCE: a queue snapshot plus the other in-batch
/// momentum embeddings. Samples without replacement once the pool exceeds
/// `r`; uses the whole pool otherwise.
fn sample_info_negatives(
    v_momentum: &Array2<f64>,
    queue: &[Array1<f64>],
    r: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Array3<f64> {
    let (b, d) = v_momentum.dim();
    let pool = queue.len() + b.saturating_sub(1);
    let take = r.min(pool);
    let mut negs = Array3::<f64>::zeros((b, take, d));
    let mut ids: Vec<usize> = Vec::with_capacity(pool);
    for i in 0..b {
        ids.clear();
        ids.extend(0..pool);
        // partial Fisher-Yates: the first `take` entries are a uniform
        // sample without replacement
        for j in 0..take {
            let pick = rng.random_range(j..pool);
            ids.swap(j, pick);
        }
        for (slot, &id) in ids[..take].iter().enumerate() {
            if id < queue.len() {
                negs.slice_mut(ndarray::s![i, slot, ..]).assign(&queue[id]);
            } else {
                let mut other = id - queue.len();
                if other >= i {
                    other += 1;
                }
                negs.slice_mut(ndarray::s![i, slot, ..]).assign(&v_momentum.row(other));
            }
        }
    }
    negs
}

/// Per-row negative prototypes: `min(r, k−1)` cluster ids sampled without
/// replacement, excluding the row's own cluster.
fn sample_proto_negatives(
    assignments: &[usize],
    k: usize,
    r: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let take = r.min(k - 1);
    let mut out = Vec::with_capacity(assignments.len());
    let mut ids: Vec<usize> = Vec::with_capacity(k - 1);
    for &own in assignments {
        ids.clear();
        ids.extend((0..k).filter(|&c| c != own));
        for j in 0..take {
            let pick = rng.random_range(j..ids.len());
            ids.swap(j, pick);
        }
        out.push(ids[..take].to_vec());
    }
    out
}

pub fn train_contrastnet(
    aae_feats: &FeatureMatrix,
    vae_feats: &FeatureMatrix,
    cfg: &ContrastConfig,
) -> Result<ContrastTrainResult> {
    cfg.validate()?;
    let n = aae_feats.dim().0;
    if vae_feats.dim() != aae_feats.dim() {
        return Err(Error::Shape(format!(
            "feature streams disagree: aae {:?} vs vae {:?}; rows must align per patch",
            aae_feats.dim(),
            vae_feats.dim()
        )));
    }
    if n == 0 {
        return Err(Error::Validation("cannot train on empty feature matrices".into()));
    }
    cfg.validate_clusters_for(n)?;

    let mut enc = ContrastEncoder::new(cfg.seed);
    // Algorithm start: θ' = θ.
    let mut momentum_enc = enc.clone();
    let mut order_rng = seeded_rng(cfg.seed, "contrast-batches");
    let mut neg_rng = seeded_rng(cfg.seed, "contrast-negatives");
    let mut queue: VecDeque<Array1<f64>> = VecDeque::with_capacity(cfg.negatives + cfg.batch_size);

    let mut log = Vec::with_capacity(cfg.total_epochs);
    for epoch in 1..=cfg.total_epochs {
        let warmup = epoch <= cfg.warmup_epochs;
        let lr = cfg.lr_at(epoch);
        let mut opt = Sgd::new(lr, cfg.weight_decay);

        let protos = if warmup {
            None
        } else {
            Some(run_estep(&momentum_enc, vae_feats, cfg, epoch)?)
        };

        let mut order: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut order_rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let b = batch.len();
            let x_primary = features_to_input(aae_feats, batch);
            let x_momentum = features_to_input(vae_feats, batch);

            enc.zero_grad();
            let out = enc.forward(&x_primary, Mode::Train, true)?;
            let key = momentum_enc.forward(&x_momentum, Mode::Eval, false)?;

            let queue_snapshot: Vec<Array1<f64>> = queue.iter().cloned().collect();
            let negs = sample_info_negatives(&key.projected, &queue_snapshot, cfg.negatives, &mut neg_rng);
            let (info, info_grad) =
                info_nce_with_grad(&out.projected, &key.projected, &negs, cfg.temperature)?;

            let (loss, grad) = match &protos {
                None => (info, info_grad),
                Some(protos) => {
                    let mut batch_assignments = Vec::with_capacity(protos.granularities.len());
                    let mut neg_ids = Vec::with_capacity(protos.granularities.len());
                    for gran in &protos.granularities {
                        let rows: Vec<usize> = batch.iter().map(|&i| gran.assignments[i]).collect();
                        let k = gran.centroids.dim().0;
                        neg_ids.push(sample_proto_negatives(&rows, k, cfg.negatives, &mut neg_rng));
                        batch_assignments.push(rows);
                    }
                    proto_nce_with_grad(
                        &out.projected,
                        protos,
                        &batch_assignments,
                        &neg_ids,
                        info,
                        Some(&info_grad),
                    )?
                }
            };
            if !loss.is_finite() {
                return Err(Error::Divergence(format!("contrast loss became {loss} at epoch {epoch}")));
            }
            loss_sum += loss * b as f64;

            enc.backward(&grad)?;
            opt.step(&mut enc);
            momentum_update(&mut momentum_enc, &enc, cfg.momentum)?;

            for row in key.projected.outer_iter() {
                queue.push_back(row.to_owned());
                while queue.len() > cfg.negatives {
                    queue.pop_front();
                }
            }
        }

        let (phi_min, phi_median, phi_max) = match &protos {
            None => (None, None, None),
            Some(p) => {
                let mut all: Vec<f64> = p
                    .granularities
                    .iter()
                    .flat_map(|g| g.phi.iter().copied())
                    .collect();
                all.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let median = all[all.len() / 2];
                (Some(all[0]), Some(median), Some(*all.last().unwrap()))
            }
        };
        log.push(ContrastEpochRecord {
            epoch,
            phase: if warmup { "warmup".into() } else { "proto".into() },
            mean_loss: loss_sum / n as f64,
            lr,
            clusters: if warmup { Vec::new() } else { cfg.clusters.clone() },
            phi_min,
            phi_median,
            phi_max,
        });
    }
    Ok(ContrastTrainResult { encoder: TrainedEncoder::eval(enc), log })
}

/// Forward pass over raw 1024-d feature rows under the encoder's mode.
pub fn contrast_forward(
    enc: &TrainedEncoder<ContrastEncoder>,
    feats: &Array2<f64>,
) -> Result<ContrastOutputs> {
    let mut net = enc.net.clone();
    net.forward(feats, enc.mode, false)
}

/// Extracts the pre-head 128-d contrast features, row order preserved.
pub fn extract_contrast_features(
    enc: &TrainedEncoder<ContrastEncoder>,
    aae_feats: &FeatureMatrix,
    batch_size: usize,
) -> Result<FeatureMatrix> {
    enc.require_eval()?;
    let mut net = enc.net.clone();
    let n = aae_feats.dim().0;
    let mut out = Array2::<f32>::zeros((n, super::CONTRAST_DIM));
    let indices: Vec<usize> = (0..n).collect();
    for batch in indices.chunks(batch_size.max(1)) {
        let x = features_to_input(aae_feats, batch);
        let res = net.forward(&x, Mode::Eval, false)?;
        for (row, &idx) in batch.iter().enumerate() {
            for j in 0..super::CONTRAST_DIM {
                out[[idx, j]] = res.contrast_feature[[row, j]] as f32;
            }
        }
    }
    Ok(out)
}
