//! Ordered layer container with named slots and shape tracing.

use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD};

use super::layers::Layer;
use super::{Mode, NetParams, TensorRole};
use crate::error::Result;

/// One recorded step of a forward shape trace: layer-type label plus the
/// output shape without the batch axis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRow {
    pub kind: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct Sequential {
    names: Vec<String>,
    layers: Vec<Layer>,
}

impl Sequential {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: &str, layer: Layer) {
        self.names.push(name.to_string());
        self.layers.push(layer);
    }

    pub fn forward(&mut self, x: &ArrayD<f64>, mode: Mode, train: bool) -> Result<ArrayD<f64>> {
        let mut cur = x.clone();
        for layer in &mut self.layers {
            cur = layer.forward(&cur, mode, train)?;
        }
        Ok(cur)
    }

    pub fn backward(&mut self, gy: &ArrayD<f64>) -> Result<ArrayD<f64>> {
        let mut cur = gy.clone();
        for layer in self.layers.iter_mut().rev() {
            cur = layer.backward(&cur)?;
        }
        Ok(cur)
    }

    /// Forward in eval mode recording every layer's output shape.
    pub fn trace(&mut self, x: &ArrayD<f64>) -> Result<(ArrayD<f64>, Vec<TraceRow>)> {
        let mut rows = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &mut self.layers {
            cur = layer.forward(&cur, Mode::Eval, false)?;
            rows.push(TraceRow {
                kind: layer.kind_name().to_string(),
                shape: cur.shape()[1..].to_vec(),
            });
        }
        Ok((cur, rows))
    }
}

impl NetParams for Sequential {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<f64>, ArrayViewD<f64>)) {
        for (name, layer) in self.names.iter().zip(&mut self.layers) {
            layer.visit_params(name, f);
        }
    }

    fn visit_tensors(&self, f: &mut dyn FnMut(&str, TensorRole, ArrayViewD<f64>)) {
        for (name, layer) in self.names.iter().zip(&self.layers) {
            layer.visit_tensors(name, f);
        }
    }

    fn visit_tensors_mut(&mut self, f: &mut dyn FnMut(&str, TensorRole, ArrayViewMutD<f64>)) {
        for (name, layer) in self.names.iter().zip(&mut self.layers) {
            layer.visit_tensors_mut(name, f);
        }
    }

    fn zero_grad(&mut self) {
        for layer in &mut self.layers {
            layer.zero_grad();
        }
    }
}
