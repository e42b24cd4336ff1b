//! Adversarial autoencoder: the shared conv backbone as a GAN generator,
//! with the latent pushed toward N(0,1) by a weight-clipped WGAN critic.
//!
//! Training alternates a reconstruction phase (two Adam optimizers on the
//! same loss as the VAE stream) and a regularization phase (critic step on
//! latent-vs-prior, weight clipping, then a generator step).

use ndarray::{Array1, Array2, ArrayD, ArrayViewD, ArrayViewMutD};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backbone::{
    check_input_shape, conv_trunk, decoder, patches_to_input, PatchGeometry, LATENT_DIM, POOLED_DIM,
};
use crate::error::{Error, Result};
use crate::hsi::PatchSet;
use crate::nn::{
    seeded_rng, Adam, Layer, Linear, Mode, NetParams, Relu, Sequential, Sgd, TensorRole, TraceRow,
    TrainedEncoder,
};
pub use crate::vae::{recon_loss, recon_loss_grad};
use crate::FeatureMatrix;

/// Encoder/generator: conv trunk → Linear(1024,512)+ReLU → Linear(512,128).
/// The latent is the raw linear output (no reparameterization).
#[derive(Debug, Clone)]
pub struct AaeEncoder {
    pub geom: PatchGeometry,
    trunk: Sequential,
    fc: Sequential,
    latent_head: Linear,
}

impl AaeEncoder {
    pub fn new(geom: PatchGeometry, seed: u64) -> Result<Self> {
        geom.validate()?;
        let mut rng = seeded_rng(seed, "aae-init");
        let trunk = conv_trunk(geom, &mut rng);
        let mut fc = Sequential::new();
        fc.push("lin", Layer::Linear(Linear::new(POOLED_DIM, 512, &mut rng)));
        fc.push("relu", Layer::Relu(Relu::new()));
        let latent_head = Linear::new(512, LATENT_DIM, &mut rng);
        Ok(Self { geom, trunk, fc, latent_head })
    }

    /// Returns `(latent N×128, pooled N×1024)`.
    pub fn forward(&mut self, x: &ArrayD<f64>, mode: Mode, train: bool) -> Result<(Array2<f64>, Array2<f64>)> {
        check_input_shape(self.geom, x)?;
        let pooled = self.trunk.forward(x, mode, train)?;
        let h = self.fc.forward(&pooled, mode, train)?;
        let latent = self.latent_head.forward(&h, mode, train)?;
        Ok((
            latent.into_dimensionality().unwrap(),
            pooled.into_dimensionality().unwrap(),
        ))
    }

    pub fn forward_pooled(&mut self, x: &ArrayD<f64>, mode: Mode) -> Result<Array2<f64>> {
        check_input_shape(self.geom, x)?;
        let pooled = self.trunk.forward(x, mode, false)?;
        Ok(pooled.into_dimensionality().unwrap())
    }

    pub fn backward(&mut self, g_latent: &Array2<f64>) -> Result<()> {
        let gh = self.latent_head.backward(&g_latent.clone().into_dyn())?;
        let g_pooled = self.fc.backward(&gh)?;
        self.trunk.backward(&g_pooled)?;
        Ok(())
    }

    pub fn trace(&mut self, x: &ArrayD<f64>) -> Result<Vec<TraceRow>> {
        let (pooled, mut rows) = self.trunk.trace(x)?;
        let (h, fc_rows) = self.fc.trace(&pooled)?;
        rows.extend(fc_rows);
        let latent = self.latent_head.forward(&h, Mode::Eval, false)?;
        rows.push(TraceRow { kind: "Linear".into(), shape: latent.shape()[1..].to_vec() });
        Ok(rows)
    }
}

impl NetParams for AaeEncoder {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<f64>, ArrayViewD<f64>)) {
        self.trunk.visit_params(&mut |n, p, g| f(&format!("trunk.{n}"), p, g));
        self.fc.visit_params(&mut |n, p, g| f(&format!("fc.{n}"), p, g));
        self.latent_head.visit_params("latent", f);
    }

    fn visit_tensors(&self, f: &mut dyn FnMut(&str, TensorRole, ArrayViewD<f64>)) {
        self.trunk.visit_tensors(&mut |n, r, t| f(&format!("trunk.{n}"), r, t));
        self.fc.visit_tensors(&mut |n, r, t| f(&format!("fc.{n}"), r, t));
        f("latent.weight", TensorRole::Param, self.latent_head.w.view().into_dyn());
        f("latent.bias", TensorRole::Param, self.latent_head.b.view().into_dyn());
    }

    fn visit_tensors_mut(&mut self, f: &mut dyn FnMut(&str, TensorRole, ArrayViewMutD<f64>)) {
        self.trunk.visit_tensors_mut(&mut |n, r, t| f(&format!("trunk.{n}"), r, t));
        self.fc.visit_tensors_mut(&mut |n, r, t| f(&format!("fc.{n}"), r, t));
        f("latent.weight", TensorRole::Param, self.latent_head.w.view_mut().into_dyn());
        f("latent.bias", TensorRole::Param, self.latent_head.b.view_mut().into_dyn());
    }

    fn zero_grad(&mut self) {
        self.trunk.zero_grad();
        self.fc.zero_grad();
        self.latent_head.zero_grad();
    }
}

/// WGAN critic over 128-d latents: Linear(128,64) → ReLU → Linear(64,1),
/// no final activation.
pub fn critic(seed: u64) -> Sequential {
    let mut rng = seeded_rng(seed, "aae-critic-init");
    let mut seq = Sequential::new();
    seq.push("lin1", Layer::Linear(Linear::new(LATENT_DIM, 64, &mut rng)));
    seq.push("relu", Layer::Relu(Relu::new()));
    seq.push("lin2", Layer::Linear(Linear::new(64, 1, &mut rng)));
    seq
}

/// Critic loss: E_{x~P_g}[D(x)] − E_{x~P_r}[D(x)].
pub fn wgan_d_loss(critic_fake: &Array1<f64>, critic_real: &Array1<f64>) -> f64 {
    critic_fake.mean().unwrap_or(0.0) - critic_real.mean().unwrap_or(0.0)
}

/// Generator loss: −E_{x~P_g}[D(x)].
pub fn wgan_g_loss(critic_fake: &Array1<f64>) -> f64 {
    -critic_fake.mean().unwrap_or(0.0)
}

/// Clamps every critic parameter into `[-clip, clip]`.
pub fn clip_weights(net: &mut dyn NetParams, clip: f64) {
    net.visit_tensors_mut(&mut |_, role, mut t| {
        if role == TensorRole::Param {
            t.mapv_inplace(|v| v.clamp(-clip, clip));
        }
    });
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct AaeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Reconstruction-phase Adam learning rate (encoder and decoder).
    pub recon_learning_rate: f64,
    pub recon_weight_decay: f64,
    /// Regularization-phase SGD learning rates.
    pub generator_learning_rate: f64,
    pub discriminator_learning_rate: f64,
    pub critic_clip: f64,
    pub seed: u64,
}

impl Default for AaeTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 128,
            recon_learning_rate: 0.001,
            recon_weight_decay: 0.0005,
            generator_learning_rate: 0.0001,
            discriminator_learning_rate: 0.00005,
            critic_clip: 0.01,
            seed: 1,
        }
    }
}

impl AaeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("aae epochs and batch_size must be positive".into()));
        }
        if self.recon_learning_rate < 0.0
            || self.generator_learning_rate < 0.0
            || self.discriminator_learning_rate < 0.0
            || self.recon_weight_decay < 0.0
        {
            return Err(Error::Config("aae learning rates must be non-negative".into()));
        }
        if self.critic_clip <= 0.0 {
            return Err(Error::Config("aae critic_clip must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AaeEpochRecord {
    pub epoch: usize,
    pub mean_recon: f64,
    pub mean_d_loss: f64,
    pub mean_g_loss: f64,
    /// Sample standard deviation of the latent entries seen this epoch.
    pub latent_std: f64,
    pub lr: f64,
}

/// Generator, decoder and critic after training.
#[derive(Debug, Clone)]
pub struct AaeBundle {
    pub encoder: TrainedEncoder<AaeEncoder>,
    pub decoder: Sequential,
    pub discriminator: Sequential,
}

#[derive(Debug)]
pub struct AaeTrainResult {
    pub bundle: AaeBundle,
    pub log: Vec<AaeEpochRecord>,
}

pub fn train_aae(set: &PatchSet, cfg: &AaeTrainConfig) -> Result<AaeTrainResult> {
    cfg.validate()?;
    if set.is_empty() {
        return Err(Error::Validation("cannot train on an empty patch set".into()));
    }
    let geom = PatchGeometry::new(set.channels(), set.window())?;
    let mut enc = AaeEncoder::new(geom, cfg.seed)?;
    let mut dec = decoder(geom, &mut seeded_rng(cfg.seed, "aae-decoder-init"));
    let mut disc = critic(cfg.seed);

    let mut opt_enc = Adam::new(cfg.recon_learning_rate, cfg.recon_weight_decay);
    let mut opt_dec = Adam::new(cfg.recon_learning_rate, cfg.recon_weight_decay);
    let mut opt_gen = Sgd::new(cfg.generator_learning_rate, 0.0);
    let mut opt_disc = Sgd::new(cfg.discriminator_learning_rate, 0.0);

    let mut order_rng = seeded_rng(cfg.seed, "aae-batches");
    let mut prior_rng = seeded_rng(cfg.seed, "aae-prior");

    let n = set.len();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut order_rng);
        let mut sum_recon = 0.0;
        let mut sum_d = 0.0;
        let mut sum_g = 0.0;
        let mut latent_sum = 0.0;
        let mut latent_sq = 0.0;
        let mut latent_n = 0usize;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let x = patches_to_input(set, batch);
            let b = batch.len();

            // Reconstruction phase (Adam on encoder and decoder).
            enc.zero_grad();
            dec.zero_grad();
            let (z, _) = enc.forward(&x, Mode::Train, true)?;
            let xhat = dec.forward(&z.clone().into_dyn(), Mode::Train, true)?;
            let l_recon = recon_loss(&x, &xhat)?;
            if !l_recon.is_finite() {
                return Err(Error::Divergence(format!("aae recon loss became {l_recon} at epoch {epoch}")));
            }
            sum_recon += l_recon;
            let g_xhat = recon_loss_grad(&x, &xhat);
            let g_z = dec.backward(&g_xhat)?.into_dimensionality::<ndarray::Ix2>().unwrap();
            enc.backward(&g_z)?;
            opt_enc.step(&mut enc);
            opt_dec.step(&mut dec);

            // Regularization phase, critic first.
            disc.zero_grad();
            let (z_fake, _) = enc.forward(&x, Mode::Train, false)?;
            let prior = Array2::from_shape_fn((b, LATENT_DIM), |_| StandardNormal.sample(&mut prior_rng));
            let score_fake = disc.forward(&z_fake.clone().into_dyn(), Mode::Train, true)?;
            let fake_vec = score_fake.view().into_shape_with_order(b).unwrap().to_owned();
            // d/dscore of mean(fake): 1/b. Backprop fake and real passes separately.
            let g_fake = ArrayD::from_elem(score_fake.raw_dim(), 1.0 / b as f64);
            disc.backward(&g_fake)?;
            let score_real = disc.forward(&prior.clone().into_dyn(), Mode::Train, true)?;
            let real_vec = score_real.view().into_shape_with_order(b).unwrap().to_owned();
            let g_real = ArrayD::from_elem(score_real.raw_dim(), -1.0 / b as f64);
            disc.backward(&g_real)?;
            let l_d = wgan_d_loss(&fake_vec, &real_vec);
            if !l_d.is_finite() {
                return Err(Error::Divergence(format!("aae critic loss became {l_d} at epoch {epoch}")));
            }
            sum_d += l_d;
            opt_disc.step(&mut disc);
            clip_weights(&mut disc, cfg.critic_clip);

            // Generator step: push critic scores of the latent up.
            enc.zero_grad();
            disc.zero_grad();
            let (z_gen, _) = enc.forward(&x, Mode::Train, true)?;
            for v in z_gen.iter() {
                latent_sum += v;
                latent_sq += v * v;
            }
            latent_n += z_gen.len();
            let score_gen = disc.forward(&z_gen.clone().into_dyn(), Mode::Train, true)?;
            let gen_vec = score_gen.view().into_shape_with_order(b).unwrap().to_owned();
            let l_g = wgan_g_loss(&gen_vec);
            sum_g += l_g;
            let g_score = ArrayD::from_elem(score_gen.raw_dim(), -1.0 / b as f64);
            let g_latent = disc.backward(&g_score)?.into_dimensionality::<ndarray::Ix2>().unwrap();
            enc.backward(&g_latent)?;
            opt_gen.step(&mut enc);

            batches += 1;
        }
        let latent_mean = latent_sum / latent_n as f64;
        let latent_var = (latent_sq / latent_n as f64 - latent_mean * latent_mean).max(0.0);
        log.push(AaeEpochRecord {
            epoch,
            mean_recon: sum_recon / n as f64,
            mean_d_loss: sum_d / batches as f64,
            mean_g_loss: sum_g / batches as f64,
            latent_std: latent_var.sqrt(),
            lr: cfg.recon_learning_rate,
        });
    }
    Ok(AaeTrainResult {
        bundle: AaeBundle {
            encoder: TrainedEncoder::eval(enc),
            decoder: dec,
            discriminator: disc,
        },
        log,
    })
}

/// Runs the encoder over a raw batch: `(latent N×128, pooled N×1024)`.
pub fn aae_encode(bundle: &AaeBundle, batch: &ArrayD<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
    let mut net = bundle.encoder.net.clone();
    net.forward(batch, bundle.encoder.mode, false)
}

/// Extracts the 1024-d pooled features for every patch, in patch order.
pub fn extract_aae_features(
    enc: &TrainedEncoder<AaeEncoder>,
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
