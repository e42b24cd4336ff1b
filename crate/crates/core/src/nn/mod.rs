//! Minimal dense/convolutional layer stack with explicit backpropagation.
//!
//! Everything runs in `f64` on the CPU. Convolutions are im2col + GEMM;
//! each layer caches what its backward pass needs during `forward` and
//! accumulates parameter gradients during `backward`. Reductions are
//! sequential, so forward and backward passes are bitwise deterministic
//! for a fixed input.

pub mod gradcheck;
mod im2col;
mod layers;
mod optim;
mod sequential;

pub use layers::{
    AdaptiveAvgPool2d, BatchNorm, BnKind, Conv2d, Conv3d, ConvTranspose2d, ConvTranspose3d, Layer,
    Linear, Relu, Reshape,
};
pub use optim::{Adam, Sgd};
pub use sequential::{Sequential, TraceRow};

use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Forward-pass mode. Eval mode uses batch-norm running statistics and is
/// a pure function of the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Architecture identifier carried by checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchId {
    VaeEnc,
    AaeEnc,
    AaeDisc,
    ContrastEnc,
}

impl ArchId {
    pub fn as_str(&self) -> &'static str {
        match self {
            ArchId::VaeEnc => "vae_enc",
            ArchId::AaeEnc => "aae_enc",
            ArchId::AaeDisc => "aae_disc",
            ArchId::ContrastEnc => "contrast_enc",
        }
    }

    pub fn from_str(s: &str) -> Result<Self> {
        match s {
            "vae_enc" => Ok(ArchId::VaeEnc),
            "aae_enc" => Ok(ArchId::AaeEnc),
            "aae_disc" => Ok(ArchId::AaeDisc),
            "contrast_enc" => Ok(ArchId::ContrastEnc),
            other => Err(Error::Format(format!("unknown arch_id `{other}`"))),
        }
    }
}

/// Role of a named tensor inside a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorRole {
    /// Trainable parameter, updated by optimizers and Eq.-11 momentum.
    Param,
    /// Tracked state such as batch-norm running statistics.
    Buffer,
}

/// Named-tensor access shared by all networks.
pub trait NetParams {
    /// Visit trainable parameters together with their accumulated
    /// gradients, in a stable order.
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<f64>, ArrayViewD<f64>));

    /// Visit every named tensor (parameters and buffers).
    fn visit_tensors(&self, f: &mut dyn FnMut(&str, TensorRole, ArrayViewD<f64>));

    /// Mutable variant of [`visit_tensors`](Self::visit_tensors), used by
    /// checkpoint loading and momentum updates.
    fn visit_tensors_mut(&mut self, f: &mut dyn FnMut(&str, TensorRole, ArrayViewMutD<f64>));

    fn zero_grad(&mut self);

    /// Number of trainable scalar parameters.
    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_tensors(&mut |_, role, t| {
            if role == TensorRole::Param {
                n += t.len();
            }
        });
        n
    }

    /// Snapshot of every named tensor.
    fn tensor_map(&self) -> Vec<(String, TensorRole, ArrayD<f64>)> {
        let mut out = Vec::new();
        self.visit_tensors(&mut |name, role, t| out.push((name.to_string(), role, t.to_owned())));
        out
    }
}

/// Momentum (EMA) update: every parameter of `target` becomes
/// `m * target + (1 - m) * source`; buffers are copied from `source`.
/// `source` is never modified.
pub fn momentum_update(target: &mut dyn NetParams, source: &dyn NetParams, m: f64) -> Result<()> {
    let src = source.tensor_map();
    let mut idx = 0usize;
    let mut err: Option<Error> = None;
    target.visit_tensors_mut(&mut |name, role, mut t| {
        if err.is_some() {
            return;
        }
        let Some((src_name, _, src_t)) = src.get(idx) else {
            err = Some(Error::Shape("momentum update: source has fewer tensors".into()));
            return;
        };
        if src_name != name || src_t.shape() != t.shape() {
            err = Some(Error::Shape(format!(
                "momentum update: tensor `{name}` {:?} does not match source `{src_name}` {:?}",
                t.shape(),
                src_t.shape()
            )));
            return;
        }
        match role {
            TensorRole::Param => t.zip_mut_with(src_t, |a, b| *a = m * *a + (1.0 - m) * b),
            TensorRole::Buffer => t.assign(src_t),
        }
        idx += 1;
    });
    if let Some(e) = err {
        return Err(e);
    }
    if idx != src.len() {
        return Err(Error::Shape("momentum update: source has more tensors".into()));
    }
    Ok(())
}

/// Deterministic per-purpose RNG stream derived from a run seed.
pub fn seeded_rng(seed: u64, label: &str) -> ChaCha8Rng {
    // FNV-1a over the label separates purposes sharing one run seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(h);
    rng
}

/// A trained network plus its train/eval flag.
///
/// Eval mode uses batch-norm running statistics, so the forward pass is a
/// deterministic function of the input; feature extraction requires it.
#[derive(Debug, Clone)]
pub struct TrainedEncoder<N> {
    pub net: N,
    pub mode: Mode,
}

impl<N> TrainedEncoder<N> {
    pub fn new(net: N, mode: Mode) -> Self {
        Self { net, mode }
    }

    pub fn eval(net: N) -> Self {
        Self { net, mode: Mode::Eval }
    }

    pub fn require_eval(&self) -> Result<()> {
        if self.mode != Mode::Eval {
            return Err(Error::Validation(
                "encoder is in train mode; feature extraction requires eval mode".into(),
            ));
        }
        Ok(())
    }
}
