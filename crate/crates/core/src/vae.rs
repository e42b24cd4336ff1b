//! Variational autoencoder over patches: hybrid conv encoder with μ/log σ²
//! heads, reparameterized latent, transposed-conv decoder.
//!
//! The encoder predicts log σ² rather than σ for numerical stability;
//! σ = exp(log σ² / 2) wherever the losses need it.

use ndarray::{Array2, ArrayD, ArrayViewD, ArrayViewMutD};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backbone::{
    check_input_shape, conv_trunk, decoder, patches_to_input, PatchGeometry, LATENT_DIM, POOLED_DIM,
};
use crate::error::{Error, Result};
use crate::hsi::PatchSet;
use crate::nn::{
    seeded_rng, Adam, Layer, Linear, Mode, NetParams, Relu, Sequential, TensorRole, TraceRow,
    TrainedEncoder,
};
use crate::FeatureMatrix;

/// Per-batch encoder outputs. `pooled` is the flattened 4×4×64 map taken
/// after adaptive pooling, before the 512-d linear stage.
#[derive(Debug, Clone)]
pub struct VaeEncoderOutput {
    pub mu: Array2<f64>,
    pub log_var: Array2<f64>,
    pub pooled: Array2<f64>,
}

/// Encoder: conv trunk → Linear(1024,512)+ReLU → parallel μ / log σ² heads.
#[derive(Debug, Clone)]
pub struct VaeEncoder {
    pub geom: PatchGeometry,
    trunk: Sequential,
    fc: Sequential,
    mu_head: Linear,
    logvar_head: Linear,
}

impl VaeEncoder {
    pub fn new(geom: PatchGeometry, seed: u64) -> Result<Self> {
        geom.validate()?;
        let mut rng = seeded_rng(seed, "vae-init");
        let trunk = conv_trunk(geom, &mut rng);
        let mut fc = Sequential::new();
        fc.push("lin", Layer::Linear(Linear::new(POOLED_DIM, 512, &mut rng)));
        fc.push("relu", Layer::Relu(Relu::new()));
        let mu_head = Linear::new(512, LATENT_DIM, &mut rng);
        let logvar_head = Linear::new(512, LATENT_DIM, &mut rng);
        Ok(Self { geom, trunk, fc, mu_head, logvar_head })
    }

    pub fn forward(&mut self, x: &ArrayD<f64>, mode: Mode, train: bool) -> Result<VaeEncoderOutput> {
        check_input_shape(self.geom, x)?;
        let pooled = self.trunk.forward(x, mode, train)?;
        let h = self.fc.forward(&pooled, mode, train)?;
        let mu = self.mu_head.forward(&h, mode, train)?;
        let log_var = self.logvar_head.forward(&h, mode, train)?;
        Ok(VaeEncoderOutput {
            mu: mu.into_dimensionality().unwrap(),
            log_var: log_var.into_dimensionality().unwrap(),
            pooled: pooled.into_dimensionality().unwrap(),
        })
    }

    /// Pooled 1024-d features only (the extraction path).
    pub fn forward_pooled(&mut self, x: &ArrayD<f64>, mode: Mode) -> Result<Array2<f64>> {
        check_input_shape(self.geom, x)?;
        let pooled = self.trunk.forward(x, mode, false)?;
        Ok(pooled.into_dimensionality().unwrap())
    }

    /// Backpropagates head gradients through the whole encoder.
    pub fn backward(&mut self, g_mu: &Array2<f64>, g_log_var: &Array2<f64>) -> Result<()> {
        let gh_mu = self.mu_head.backward(&g_mu.clone().into_dyn())?;
        let gh_lv = self.logvar_head.backward(&g_log_var.clone().into_dyn())?;
        let gh = gh_mu + gh_lv;
        let g_pooled = self.fc.backward(&gh)?;
        self.trunk.backward(&g_pooled)?;
        Ok(())
    }

    /// Eval-mode shape trace: trunk, fc stage, then both heads.
    pub fn trace(&mut self, x: &ArrayD<f64>) -> Result<Vec<TraceRow>> {
        let (pooled, mut rows) = self.trunk.trace(x)?;
        let (h, fc_rows) = self.fc.trace(&pooled)?;
        rows.extend(fc_rows);
        let mu = self.mu_head.forward(&h, Mode::Eval, false)?;
        rows.push(TraceRow { kind: "Linear".into(), shape: mu.shape()[1..].to_vec() });
        let lv = self.logvar_head.forward(&h, Mode::Eval, false)?;
        rows.push(TraceRow { kind: "Linear".into(), shape: lv.shape()[1..].to_vec() });
        Ok(rows)
    }
}

impl NetParams for VaeEncoder {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<f64>, ArrayViewD<f64>)) {
        self.trunk.visit_params(&mut |n, p, g| f(&format!("trunk.{n}"), p, g));
        self.fc.visit_params(&mut |n, p, g| f(&format!("fc.{n}"), p, g));
        self.mu_head.visit_params("mu", f);
        self.logvar_head.visit_params("logvar", f);
    }

    fn visit_tensors(&self, f: &mut dyn FnMut(&str, TensorRole, ArrayViewD<f64>)) {
        self.trunk.visit_tensors(&mut |n, r, t| f(&format!("trunk.{n}"), r, t));
        self.fc.visit_tensors(&mut |n, r, t| f(&format!("fc.{n}"), r, t));
        f("mu.weight", TensorRole::Param, self.mu_head.w.view().into_dyn());
        f("mu.bias", TensorRole::Param, self.mu_head.b.view().into_dyn());
        f("logvar.weight", TensorRole::Param, self.logvar_head.w.view().into_dyn());
        f("logvar.bias", TensorRole::Param, self.logvar_head.b.view().into_dyn());
    }

    fn visit_tensors_mut(&mut self, f: &mut dyn FnMut(&str, TensorRole, ArrayViewMutD<f64>)) {
        self.trunk.visit_tensors_mut(&mut |n, r, t| f(&format!("trunk.{n}"), r, t));
        self.fc.visit_tensors_mut(&mut |n, r, t| f(&format!("fc.{n}"), r, t));
        f("mu.weight", TensorRole::Param, self.mu_head.w.view_mut().into_dyn());
        f("mu.bias", TensorRole::Param, self.mu_head.b.view_mut().into_dyn());
        f("logvar.weight", TensorRole::Param, self.logvar_head.w.view_mut().into_dyn());
        f("logvar.bias", TensorRole::Param, self.logvar_head.b.view_mut().into_dyn());
    }

    fn zero_grad(&mut self) {
        self.trunk.zero_grad();
        self.fc.zero_grad();
        self.mu_head.zero_grad();
        self.logvar_head.zero_grad();
    }
}

/// z = μ + ε·σ with σ = exp(log σ² / 2), elementwise.
pub fn reparameterize(mu: &Array2<f64>, log_var: &Array2<f64>, eps: &Array2<f64>) -> Array2<f64> {
    let mut z = Array2::zeros(mu.raw_dim());
    ndarray::Zip::from(&mut z)
        .and(mu)
        .and(log_var)
        .and(eps)
        .for_each(|zi, &m, &lv, &e| *zi = m + e * (lv / 2.0).exp());
    z
}

/// KL divergence to the unit Gaussian: ½ Σ_samples Σ_dims (μ² + σ² − log σ² − 1).
pub fn kl_loss(mu: &Array2<f64>, log_var: &Array2<f64>) -> f64 {
    let mut acc = 0.0;
    ndarray::Zip::from(mu).and(log_var).for_each(|&m, &lv| {
        acc += m * m + lv.exp() - lv - 1.0;
    });
    0.5 * acc
}

/// Gradients of [`kl_loss`]: ∂/∂μ = μ and ∂/∂log σ² = ½(σ² − 1).
pub fn kl_loss_grad(mu: &Array2<f64>, log_var: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    (mu.clone(), log_var.mapv(|lv| 0.5 * (lv.exp() - 1.0)))
}

/// Reconstruction loss: Σ_samples mean_cells (I − Î)².
pub fn recon_loss(input: &ArrayD<f64>, output: &ArrayD<f64>) -> Result<f64> {
    if input.shape() != output.shape() {
        return Err(Error::Shape(format!(
            "reconstruction loss: {:?} vs {:?}",
            input.shape(),
            output.shape()
        )));
    }
    let cells: usize = input.shape()[1..].iter().product();
    let mut acc = 0.0;
    ndarray::Zip::from(input).and(output).for_each(|&a, &b| {
        let d = a - b;
        acc += d * d;
    });
    Ok(acc / cells as f64)
}

/// Gradient of [`recon_loss`] with respect to the reconstruction.
pub fn recon_loss_grad(input: &ArrayD<f64>, output: &ArrayD<f64>) -> ArrayD<f64> {
    let cells: usize = input.shape()[1..].iter().product();
    let scale = 2.0 / cells as f64;
    let mut g = ArrayD::zeros(output.raw_dim());
    ndarray::Zip::from(&mut g).and(input).and(output).for_each(|gi, &a, &b| {
        *gi = scale * (b - a);
    });
    g
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct VaeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 128,
            learning_rate: 0.001,
            weight_decay: 0.0005,
            seed: 1,
        }
    }
}

impl VaeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("vae epochs and batch_size must be positive".into()));
        }
        if self.learning_rate < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config(
                "vae learning_rate and weight_decay must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// One line of the per-epoch training log.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct VaeEpochRecord {
    pub epoch: usize,
    pub mean_total: f64,
    pub mean_kl: f64,
    pub mean_recon: f64,
    pub lr: f64,
}

#[derive(Debug)]
pub struct VaeTrainResult {
    pub encoder: TrainedEncoder<VaeEncoder>,
    pub log: Vec<VaeEpochRecord>,
}

/// Trains encoder and decoder jointly on KL + reconstruction with two Adam
/// optimizers; only the encoder is retained.
pub fn train_vae(set: &PatchSet, cfg: &VaeTrainConfig) -> Result<VaeTrainResult> {
    cfg.validate()?;
    if set.is_empty() {
        return Err(Error::Validation("cannot train on an empty patch set".into()));
    }
    let geom = PatchGeometry::new(set.channels(), set.window())?;
    let mut enc = VaeEncoder::new(geom, cfg.seed)?;
    let mut dec = decoder(geom, &mut seeded_rng(cfg.seed, "vae-decoder-init"));
    let mut opt_enc = Adam::new(cfg.learning_rate, cfg.weight_decay);
    let mut opt_dec = Adam::new(cfg.learning_rate, cfg.weight_decay);
    let mut order_rng = seeded_rng(cfg.seed, "vae-batches");
    let mut eps_rng = seeded_rng(cfg.seed, "vae-eps");

    let n = set.len();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut order_rng);
        let mut sum_total = 0.0;
        let mut sum_kl = 0.0;
        let mut sum_recon = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let x = patches_to_input(set, batch);
            enc.zero_grad();
            dec.zero_grad();

            let out = enc.forward(&x, Mode::Train, true)?;
            let eps = Array2::from_shape_fn(out.mu.raw_dim(), |_| StandardNormal.sample(&mut eps_rng));
            let z = reparameterize(&out.mu, &out.log_var, &eps);
            let xhat = dec.forward(&z.clone().into_dyn(), Mode::Train, true)?;

            let l_kl = kl_loss(&out.mu, &out.log_var);
            let l_recon = recon_loss(&x, &xhat)?;
            let total = l_kl + l_recon;
            if !total.is_finite() {
                return Err(Error::Divergence(format!("vae loss became {total} at epoch {epoch}")));
            }
            sum_total += total;
            sum_kl += l_kl;
            sum_recon += l_recon;

            let g_xhat = recon_loss_grad(&x, &xhat);
            let g_z = dec.backward(&g_xhat)?.into_dimensionality::<ndarray::Ix2>().unwrap();
            let (mut g_mu, mut g_lv) = kl_loss_grad(&out.mu, &out.log_var);
            // Reparameterized pathway: ∂z/∂μ = 1, ∂z/∂log σ² = ε·σ/2.
            ndarray::Zip::from(&mut g_mu).and(&g_z).for_each(|g, &gz| *g += gz);
            ndarray::Zip::from(&mut g_lv)
                .and(&g_z)
                .and(&eps)
                .and(&out.log_var)
                .for_each(|g, &gz, &e, &lv| *g += gz * e * (lv / 2.0).exp() * 0.5);
            enc.backward(&g_mu, &g_lv)?;

            opt_enc.step(&mut enc);
            opt_dec.step(&mut dec);
        }
        log.push(VaeEpochRecord {
            epoch,
            mean_total: sum_total / n as f64,
            mean_kl: sum_kl / n as f64,
            mean_recon: sum_recon / n as f64,
            lr: cfg.learning_rate,
        });
    }
    Ok(VaeTrainResult { encoder: TrainedEncoder::eval(enc), log })
}

/// Runs the encoder over a raw `(N, 1, K, S, S)` batch under its stored mode.
pub fn vae_encode(enc: &mut TrainedEncoder<VaeEncoder>, batch: &ArrayD<f64>) -> Result<VaeEncoderOutput> {
    let mode = enc.mode;
    enc.net.forward(batch, mode, false)
}

/// Extracts the 1024-d pooled features for every patch, in patch order.
pub fn extract_vae_features(
    enc: &TrainedEncoder<VaeEncoder>,
    set: &PatchSet,
    batch_size: usize,
) -> Result<FeatureMatrix> {
    enc.require_eval()?;
    let mut net = enc.net.clone();
    let n = set.len();
    let mut out = Array2::<f32>::zeros((n, POOLED_DIM));
    let indices: Vec<usize> = (0..n).collect();
    for batch in indices.chunks(batch_size.max(1)) {
        let x = patches_to_input(set, batch);
        let pooled = net.forward_pooled(&x, Mode::Eval)?;
        for (row, &idx) in batch.iter().enumerate() {
            for j in 0..POOLED_DIM {
                out[[idx, j]] = pooled[[row, j]] as f32;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::IxDyn;

    pub(crate) fn synthetic_patchset(n: usize, bands: usize, window: usize, seed: u64) -> PatchSet {
        let mut rng = seeded_rng(seed, "vae-test-data");
        let patches = ndarray::Array4::from_shape_fn((n, window, window, bands), |_| {
            rand::Rng::random_range(&mut rng, -1.0f32..1.0)
        });
        PatchSet {
            patches,
            coords: ndarray::Array2::zeros((n, 2)),
            labels: vec![1; n],
        }
    }

    #[test]
    fn reparameterize_identities() {
        let mu = ndarray::array![[1.0, -2.0]];
        let lv = ndarray::array![[0.3, -0.7]];
        let zero = Array2::zeros((1, 2));
        assert_eq!(reparameterize(&mu, &lv, &zero), mu);

        let eps = ndarray::array![[0.5, 1.5]];
        let z = reparameterize(&zero, &zero, &eps);
        assert_eq!(z, eps);

        // μ=1, σ=2 (log σ² = 2 ln 2), ε=0.5 → z = 2.
        let mu = ndarray::array![[1.0]];
        let lv = ndarray::array![[2.0 * 2.0f64.ln()]];
        let eps = ndarray::array![[0.5]];
        assert_abs_diff_eq!(reparameterize(&mu, &lv, &eps)[[0, 0]], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn kl_loss_hand_values() {
        let mu = Array2::zeros((3, 4));
        let lv = Array2::zeros((3, 4));
        assert_abs_diff_eq!(kl_loss(&mu, &lv), 0.0, epsilon = 1e-12);

        let mu = ndarray::array![[1.0]];
        let lv = ndarray::array![[0.0]];
        assert_abs_diff_eq!(kl_loss(&mu, &lv), 0.5, epsilon = 1e-12);

        let mu = ndarray::array![[0.0]];
        let lv = ndarray::array![[1.0]];
        assert_abs_diff_eq!(kl_loss(&mu, &lv), 0.5 * (std::f64::consts::E - 2.0), epsilon = 1e-12);
        assert_abs_diff_eq!(kl_loss(&mu, &lv), 0.35914, epsilon = 1e-5);
    }

    #[test]
    fn kl_loss_nonnegative_property() {
        let mut rng = seeded_rng(3, "kl-prop");
        for _ in 0..200 {
            let mu = Array2::from_shape_fn((2, 5), |_| rand::Rng::random_range(&mut rng, -3.0..3.0));
            let lv = Array2::from_shape_fn((2, 5), |_| rand::Rng::random_range(&mut rng, -3.0..3.0));
            assert!(kl_loss(&mu, &lv) >= 0.0);
        }
    }

    #[test]
    fn recon_loss_cases() {
        let a = ArrayD::zeros(IxDyn(&[1, 2, 2, 2]));
        assert_abs_diff_eq!(recon_loss(&a, &a).unwrap(), 0.0);

        let ones = ArrayD::from_elem(IxDyn(&[1, 2, 2, 2]), 1.0);
        assert_abs_diff_eq!(recon_loss(&a, &ones).unwrap(), 1.0, epsilon = 1e-12);

        // N=2: one identical pair plus the all-ones pair → still 1.0.
        let mut x = ArrayD::zeros(IxDyn(&[2, 2, 2, 2]));
        let mut y = ArrayD::zeros(IxDyn(&[2, 2, 2, 2]));
        x.slice_mut(ndarray::s![1, .., .., ..]).fill(0.5);
        y.slice_mut(ndarray::s![1, .., .., ..]).fill(0.5);
        y.slice_mut(ndarray::s![0, .., .., ..]).fill(1.0);
        assert_abs_diff_eq!(recon_loss(&x, &y).unwrap(), 1.0, epsilon = 1e-12);

        let bad = ArrayD::zeros(IxDyn(&[1, 2, 2, 3]));
        assert!(recon_loss(&a, &bad).is_err());
    }

    #[test]
    fn recon_loss_symmetry_and_quadratic_scaling() {
        let mut rng = seeded_rng(4, "recon-prop");
        for _ in 0..50 {
            let a = ArrayD::from_shape_fn(IxDyn(&[2, 3, 3]), |_| rand::Rng::random_range(&mut rng, -2.0..2.0));
            let b = ArrayD::from_shape_fn(IxDyn(&[2, 3, 3]), |_| rand::Rng::random_range(&mut rng, -2.0..2.0));
            let l = recon_loss(&a, &b).unwrap();
            assert!(l >= 0.0);
            assert_abs_diff_eq!(l, recon_loss(&b, &a).unwrap(), epsilon = 1e-12);
            let s = 1.7;
            assert_abs_diff_eq!(recon_loss(&(&a * s), &(&b * s)).unwrap(), s * s * l, epsilon = 1e-9);
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        use crate::nn::gradcheck::max_grad_error;
        let mut rng = seeded_rng(5, "vae-gradcheck");
        let (n, d) = (4, 6);
        let mu0 = Array2::from_shape_fn((n, d), |_| rand::Rng::random_range(&mut rng, -1.0..1.0));
        let lv0 = Array2::from_shape_fn((n, d), |_| rand::Rng::random_range(&mut rng, -1.0..1.0));

        let (g_mu, g_lv) = kl_loss_grad(&mu0, &lv0);
        let flat_mu: Vec<f64> = mu0.iter().copied().collect();
        let lv_c = lv0.clone();
        let mut f = |x: &[f64]| kl_loss(&Array2::from_shape_vec((n, d), x.to_vec()).unwrap(), &lv_c);
        let g: Vec<f64> = g_mu.iter().copied().collect();
        assert!(max_grad_error(&mut f, &flat_mu, &g, 1e-6) < 1e-4);

        let flat_lv: Vec<f64> = lv0.iter().copied().collect();
        let mu_c = mu0.clone();
        let mut f = |x: &[f64]| kl_loss(&mu_c, &Array2::from_shape_vec((n, d), x.to_vec()).unwrap());
        let g: Vec<f64> = g_lv.iter().copied().collect();
        assert!(max_grad_error(&mut f, &flat_lv, &g, 1e-6) < 1e-4);

        let a = ArrayD::from_shape_fn(IxDyn(&[2, 3, 2]), |_| rand::Rng::random_range(&mut rng, -1.0..1.0));
        let b = ArrayD::from_shape_fn(IxDyn(&[2, 3, 2]), |_| rand::Rng::random_range(&mut rng, -1.0..1.0));
        let gb = recon_loss_grad(&a, &b);
        let flat_b: Vec<f64> = b.iter().copied().collect();
        let a_c = a.clone();
        let mut f = |x: &[f64]| {
            recon_loss(&a_c, &ArrayD::from_shape_vec(IxDyn(&[2, 3, 2]), x.to_vec()).unwrap()).unwrap()
        };
        let g: Vec<f64> = gb.iter().copied().collect();
        assert!(max_grad_error(&mut f, &flat_b, &g, 1e-6) < 1e-4);
    }

    #[test]
    fn encoder_shapes_and_row_symmetry() {
        let geom = PatchGeometry::new(4, 9).unwrap();
        let mut enc = VaeEncoder::new(geom, 7).unwrap();
        enc.visit_tensors_mut(&mut |name, _, mut t| {
            if name.ends_with(".bias") {
                t.fill(0.0);
            }
        });
        let x = ArrayD::zeros(IxDyn(&[2, 1, 4, 9, 9]));
        let out = enc.forward(&x, Mode::Eval, false).unwrap();
        assert_eq!(out.mu.dim(), (2, 128));
        assert_eq!(out.log_var.dim(), (2, 128));
        assert_eq!(out.pooled.dim(), (2, 1024));
        assert!(out.mu.iter().all(|v| v.is_finite()));
        for j in 0..128 {
            assert_eq!(out.mu[[0, j]], out.mu[[1, j]]);
        }
        let bad = ArrayD::zeros(IxDyn(&[2, 1, 5, 9, 9]));
        assert!(enc.forward(&bad, Mode::Eval, false).is_err());
    }

    #[test]
    fn parameter_count_matches_analytic_oracle() {
        let geom = PatchGeometry::new(15, 27).unwrap();
        let enc = VaeEncoder::new(geom, 1).unwrap();
        let conv = |co: usize, ci: usize, k: usize| co * ci * k + co;
        let bn = |c: usize| 2 * c;
        let lin = |o: usize, i: usize| o * i + o;
        let expected = conv(8, 1, 7 * 3 * 3)
            + bn(8)
            + conv(16, 8, 5 * 3 * 3)
            + bn(16)
            + conv(32, 16, 3 * 3 * 3)
            + bn(32)
            + conv(64, 96, 3 * 3)
            + bn(64)
            + lin(512, 1024)
            + lin(128, 512)
            + lin(128, 512);
        assert_eq!(enc.param_count(), expected);
    }

    #[test]
    fn smoke_training_loss_decreases() {
        let set = synthetic_patchset(200, 4, 9, 11);
        let cfg = VaeTrainConfig { epochs: 3, batch_size: 64, seed: 5, ..Default::default() };
        let result = train_vae(&set, &cfg).unwrap();
        assert_eq!(result.log.len(), 3);
        assert!(
            result.log[2].mean_total < result.log[0].mean_total,
            "epoch3 {} !< epoch1 {}",
            result.log[2].mean_total,
            result.log[0].mean_total
        );
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let set = synthetic_patchset(32, 4, 9, 12);
        let cfg = VaeTrainConfig {
            epochs: 1,
            batch_size: 16,
            learning_rate: 0.0,
            weight_decay: 0.0,
            seed: 9,
        };
        let before = VaeEncoder::new(PatchGeometry::new(4, 9).unwrap(), 9).unwrap();
        let result = train_vae(&set, &cfg).unwrap();
        let reference = before.tensor_map();
        let mut idx = 0;
        let mut diff = 0.0f64;
        let mut trained = result.encoder.net;
        trained.visit_tensors_mut(&mut |name, role, t| {
            let (ref_name, _, ref_t) = &reference[idx];
            assert_eq!(name, ref_name);
            if role == TensorRole::Param {
                ndarray::Zip::from(&t.view()).and(ref_t).for_each(|a, b| diff += (a - b).abs());
            }
            idx += 1;
        });
        assert_eq!(diff, 0.0, "trainable parameters moved under zero lr");
    }

    #[test]
    fn extraction_contract() {
        let mut set = synthetic_patchset(5, 4, 9, 13);
        let row0 = set.patches.index_axis(ndarray::Axis(0), 0).to_owned();
        set.patches.index_axis_mut(ndarray::Axis(0), 4).assign(&row0);

        let enc = TrainedEncoder::eval(VaeEncoder::new(PatchGeometry::new(4, 9).unwrap(), 21).unwrap());
        let feats = extract_vae_features(&enc, &set, 2).unwrap();
        assert_eq!(feats.dim(), (5, 1024));
        for j in 0..1024 {
            assert_eq!(feats[[0, j]], feats[[4, j]], "duplicate rows must map to duplicates");
        }

        let feats_b1 = extract_vae_features(&enc, &set, 1).unwrap();
        let feats_b128 = extract_vae_features(&enc, &set, 128).unwrap();
        for (a, b) in feats_b1.iter().zip(feats_b128.iter()) {
            assert!((a - b).abs() < 1e-5);
        }

        let train_enc = TrainedEncoder::new(enc.net.clone(), Mode::Train);
        assert!(extract_vae_features(&train_enc, &set, 4).is_err());
    }
}
