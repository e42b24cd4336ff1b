//! Adam and SGD with PyTorch update rules (L2 weight decay added to the
//! gradient before the step).

use std::collections::HashMap;

use ndarray::ArrayD;

use super::NetParams;

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step_count: u64,
    state: HashMap<String, (ArrayD<f64>, ArrayD<f64>)>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step_count: 0,
            state: HashMap::new(),
        }
    }

    pub fn step(&mut self, net: &mut dyn NetParams) {
        self.step_count += 1;
        let t = self.step_count;
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        let (lr, b1, b2, eps, wd) = (self.lr, self.beta1, self.beta2, self.eps, self.weight_decay);
        let state = &mut self.state;
        net.visit_params(&mut |name, mut p, g| {
            let (m, v) = state
                .entry(name.to_string())
                .or_insert_with(|| (ArrayD::zeros(g.raw_dim()), ArrayD::zeros(g.raw_dim())));
            ndarray::Zip::from(&mut p)
                .and(&mut *m)
                .and(&mut *v)
                .and(&g)
                .for_each(|pi, mi, vi, &gi| {
                    let gd = gi + wd * *pi;
                    *mi = b1 * *mi + (1.0 - b1) * gd;
                    *vi = b2 * *vi + (1.0 - b2) * gd * gd;
                    *pi -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
                });
        });
    }
}

pub struct Sgd {
    pub lr: f64,
    pub weight_decay: f64,
}

impl Sgd {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, weight_decay }
    }

    pub fn step(&mut self, net: &mut dyn NetParams) {
        let (lr, wd) = (self.lr, self.weight_decay);
        net.visit_params(&mut |_, mut p, g| {
            ndarray::Zip::from(&mut p).and(&g).for_each(|pi, &gi| {
                *pi -= lr * (gi + wd * *pi);
            });
        });
    }
}
