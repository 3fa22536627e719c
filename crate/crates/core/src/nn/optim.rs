use std::collections::BTreeMap;

/// SGD with classical momentum and L2 weight decay, PyTorch semantics:
/// `v = μ·v + (g + λ·p)`, `p -= lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: BTreeMap<usize, Vec<f32>>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32, weight_decay: f32) -> Self {
        Self { lr, momentum, weight_decay, velocity: BTreeMap::new() }
    }

    /// Applies one update to the parameter registered under `slot`.
    pub fn step(&mut self, slot: usize, param: &mut [f32], grad: &[f32]) {
        assert_eq!(param.len(), grad.len(), "parameter/gradient length mismatch in slot {slot}");
        let v = self.velocity.entry(slot).or_insert_with(|| vec![0.0; param.len()]);
        for ((p, &g), vi) in param.iter_mut().zip(grad).zip(v.iter_mut()) {
            let g = g + self.weight_decay * *p;
            *vi = self.momentum * *vi + g;
            *p -= self.lr * *vi;
        }
    }

    /// [`Sgd::step`] for arrays; the gradient may be in any memory order.
    pub fn step_array<D: ndarray::Dimension>(&mut self, slot: usize, param: &mut ndarray::Array<f32, D>, grad: &ndarray::Array<f32, D>) {
        assert_eq!(param.shape(), grad.shape(), "parameter/gradient shape mismatch in slot {slot}");
        let grad = grad.as_standard_layout();
        let param = param.as_slice_mut().expect("parameters are stored in standard layout");
        self.step(slot, param, grad.as_slice().expect("standard layout"));
    }
}

/// Multiplies the base rate by `gamma` at each milestone epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiStepLr {
    pub base_lr: f32,
    pub milestones: Vec<usize>,
    pub gamma: f32,
}

impl MultiStepLr {
    pub fn lr_at(&self, epoch: usize) -> f32 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.base_lr * self.gamma.powi(passed as i32)
    }
}
