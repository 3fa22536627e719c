use ndarray::{Array1, Array2, Axis};

use super::backbone::Mode;

/// Per-channel batch normalisation over `(C, N*H*W)` activations.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d {
    pub gamma: Array1<f32>,
    pub beta: Array1<f32>,
    pub running_mean: Array1<f32>,
    pub running_var: Array1<f32>,
    pub momentum: f32,
    pub eps: f32,
}

#[derive(Debug, Clone)]
pub struct BnCache {
    pub xhat: Array2<f32>,
    pub inv_std: Array1<f32>,
    pub mode: Mode,
}

/// Batch statistics observed during a training forward, applied to the
/// running estimates only by the owner of the layer.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Array1<f32>,
    pub var_unbiased: Array1<f32>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&self, x: &Array2<f32>, mode: Mode) -> (Array2<f32>, BnCache, Option<BatchStats>) {
        let m = x.ncols() as f32;
        let (mean, var, stats) = match mode {
            Mode::Train => {
                let mean = x.mean_axis(Axis(1)).expect("non-empty batch");
                let centered = x - &mean.view().insert_axis(Axis(1));
                let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / m;
                let unbiased = if m > 1.0 { &var * (m / (m - 1.0)) } else { var.clone() };
                let stats = BatchStats { mean: mean.clone(), var_unbiased: unbiased };
                (mean, var, Some(stats))
            }
            Mode::Eval => (self.running_mean.clone(), self.running_var.clone(), None),
        };
        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let xhat = (x - &mean.view().insert_axis(Axis(1))) * &inv_std.view().insert_axis(Axis(1));
        let y = &xhat * &self.gamma.view().insert_axis(Axis(1)) + &self.beta.view().insert_axis(Axis(1));
        (y, BnCache { xhat, inv_std, mode }, stats)
    }

    pub fn update_running(&mut self, stats: &BatchStats) {
        let mom = self.momentum;
        self.running_mean = &self.running_mean * (1.0 - mom) + &stats.mean * mom;
        self.running_var = &self.running_var * (1.0 - mom) + &stats.var_unbiased * mom;
    }

    /// Returns `(grad_input, grad_gamma, grad_beta)`.
    pub fn backward(&self, cache: &BnCache, grad: &Array2<f32>) -> (Array2<f32>, Array1<f32>, Array1<f32>) {
        let dgamma = (grad * &cache.xhat).sum_axis(Axis(1));
        let dbeta = grad.sum_axis(Axis(1));
        let scale = (&self.gamma * &cache.inv_std).insert_axis(Axis(1));
        let dx = match cache.mode {
            Mode::Eval => grad * &scale,
            Mode::Train => {
                let m = grad.ncols() as f32;
                let mean_g = (&dbeta / m).insert_axis(Axis(1));
                let mean_gx = (&dgamma / m).insert_axis(Axis(1));
                (grad - &mean_g - &cache.xhat * &mean_gx) * &scale
            }
        };
        (dx, dgamma, dbeta)
    }
}
