//! Dynamic weighting unit over concatenated per-task representations.
//!
//! `ω(x) = σ(W2 · ReLU(W1 · x))` gives one importance weight in `(0, 1)` per
//! channel of the concatenated vector. During plugin training the unit is
//! regressed towards block targets: 0 on blocks of tasks that precede the
//! sample's task, 1 elsewhere.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use rand_distr::{Distribution, Normal};

use crate::error::{dim_err, Error, Result};
use crate::nn::ops::sigmoid;
use crate::nn::optim::Sgd;
use crate::nn::params::ParamVisitor;
use crate::rng;
use crate::serialize::{Reader, Writer};

pub const GATE_MAGIC: &[u8; 4] = b"DLCG";
pub const GATE_INIT_STD: f32 = 0.02;

/// Pre-sigmoid clamp; keeps every f32 output strictly inside `(0, 1)`.
const LOGIT_BOUND: f32 = 16.0;

/// Hidden width for a gate over `k_gate` channels.
pub fn hidden_width(k_gate: usize) -> usize {
    (k_gate / 16).max(4)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightingUnit {
    /// Down-projection, `(d_hidden, k_gate)`.
    pub w1: Array2<f32>,
    /// Up-projection, `(k_gate, d_hidden)`.
    pub w2: Array2<f32>,
    pub d_feat: usize,
}

/// Intermediate values of a gate forward pass.
#[derive(Debug, Clone)]
pub struct GateCache {
    pub hidden: Array2<f32>,
    pub omega: Array2<f32>,
}

#[derive(Debug, Clone)]
pub struct GateGrads {
    pub w1: Array2<f32>,
    pub w2: Array2<f32>,
    pub input: Array2<f32>,
}

fn gaussian(shape: (usize, usize), seed: u64, tag: &str) -> Array2<f32> {
    let normal = Normal::new(0.0f32, GATE_INIT_STD).expect("positive std");
    let mut r = rng::stream(seed, tag, &[shape.0 as u64, shape.1 as u64]);
    Array2::from_shape_simple_fn(shape, || normal.sample(&mut r))
}

impl WeightingUnit {
    /// Fresh unit covering a single task block (`k_gate = d_feat`).
    pub fn new(d_feat: usize, seed: u64) -> Result<Self> {
        Self::with_width(d_feat, d_feat, seed)
    }

    pub fn with_width(d_feat: usize, k_gate: usize, seed: u64) -> Result<Self> {
        if d_feat == 0 || k_gate == 0 || k_gate % d_feat != 0 {
            return Err(Error::Config(format!("gate width {k_gate} must be a positive multiple of {d_feat}")));
        }
        let d = hidden_width(k_gate);
        Ok(Self { w1: gaussian((d, k_gate), seed, "gate.w1"), w2: gaussian((k_gate, d), seed, "gate.w2"), d_feat })
    }

    pub fn k_gate(&self) -> usize {
        self.w1.ncols()
    }

    pub fn d_hidden(&self) -> usize {
        self.w1.nrows()
    }

    pub fn task_blocks(&self) -> usize {
        self.k_gate() / self.d_feat
    }

    /// Widens the unit, warm-starting the overlapping block from `self`.
    pub fn grow(&self, new_k_gate: usize, seed: u64) -> Result<Self> {
        if new_k_gate <= self.k_gate() {
            return Err(Error::Config(format!(
                "gate can only grow: {} -> {new_k_gate}",
                self.k_gate()
            )));
        }
        let mut unit = Self::with_width(self.d_feat, new_k_gate, seed)?;
        let (d, k) = self.w1.dim();
        unit.w1.slice_mut(s![..d, ..k]).assign(&self.w1);
        unit.w2.slice_mut(s![..k, ..d]).assign(&self.w2);
        Ok(unit)
    }

    pub fn forward(&self, x: &Array2<f32>) -> Result<Array2<f32>> {
        Ok(self.forward_cached(x)?.omega)
    }

    pub fn forward_cached(&self, x: &Array2<f32>) -> Result<GateCache> {
        if x.ncols() != self.k_gate() {
            return Err(dim_err("gate input width", self.k_gate(), x.ncols()));
        }
        let hidden = x.dot(&self.w1.t()).mapv(|v| v.max(0.0));
        let omega = hidden.dot(&self.w2.t()).mapv(|z| sigmoid(z.clamp(-LOGIT_BOUND, LOGIT_BOUND)));
        Ok(GateCache { hidden, omega })
    }

    pub fn backward(&self, x: &Array2<f32>, cache: &GateCache, grad_omega: &Array2<f32>) -> GateGrads {
        let gz = grad_omega * &cache.omega.mapv(|w| w * (1.0 - w));
        let w2 = gz.t().dot(&cache.hidden);
        let mut gh = gz.dot(&self.w2);
        gh.zip_mut_with(&cache.hidden, |g, &h| {
            if h <= 0.0 {
                *g = 0.0;
            }
        });
        let w1 = gh.t().dot(x);
        let input = gh.dot(&self.w1);
        GateGrads { w1, w2, input }
    }

    pub fn apply_grads(&mut self, sgd: &mut Sgd, slot: usize, grads: &GateGrads) {
        sgd.step_array(slot, &mut self.w1, &grads.w1);
        sgd.step_array(slot + 1, &mut self.w2, &grads.w2);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(GATE_MAGIC);
        w.u32(self.k_gate() as u32);
        w.u32(self.d_hidden() as u32);
        w.u32(self.d_feat as u32);
        w.f32s(self.w1.as_slice().expect("contiguous"));
        w.f32s(self.w2.as_slice().expect("contiguous"));
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(GATE_MAGIC)?;
        let k = r.u32()? as usize;
        let d = r.u32()? as usize;
        let d_feat = r.u32()? as usize;
        if d_feat == 0 || k % d_feat != 0 {
            return Err(Error::Format(format!("gate width {k} incompatible with block {d_feat}")));
        }
        let w1 = Array2::from_shape_vec((d, k), r.f32s(d * k)?).expect("sized read");
        let w2 = Array2::from_shape_vec((k, d), r.f32s(k * d)?).expect("sized read");
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes after gate".into()));
        }
        Ok(Self { w1, w2, d_feat })
    }
}

impl ParamVisitor for WeightingUnit {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f32])) {
        f("w1", self.w1.as_slice().expect("contiguous"));
        f("w2", self.w2.as_slice().expect("contiguous"));
    }
    fn param_count(&self) -> usize {
        self.w1.len() + self.w2.len()
    }
}

/// Element-wise `ω ⊙ h`.
pub fn apply_gate(omega: ArrayView2<f32>, h: ArrayView2<f32>) -> Result<Array2<f32>> {
    if omega.dim() != h.dim() {
        return Err(Error::Dimension(format!("gate {:?} vs features {:?}", omega.dim(), h.dim())));
    }
    Ok(&omega * &h)
}

/// Block targets for a sample of `sample_task` (1-based) among `task_count` tasks.
pub fn ideal_weights(sample_task: usize, task_count: usize, d_feat: usize) -> Result<Array1<f32>> {
    if sample_task == 0 || sample_task > task_count {
        return Err(Error::Input(format!("sample task {sample_task} outside 1..={task_count}")));
    }
    let mut w = Array1::ones(task_count * d_feat);
    w.slice_mut(s![..(sample_task - 1) * d_feat]).fill(0.0);
    Ok(w)
}

/// `‖ω − ω_ideal‖² / k` for one sample.
pub fn loss_ia(omega: ArrayView1<f32>, ideal: ArrayView1<f32>) -> Result<f32> {
    if omega.len() != ideal.len() {
        return Err(dim_err("importance target width", omega.len(), ideal.len()));
    }
    if omega.is_empty() {
        return Err(Error::Input("empty gate vector".into()));
    }
    let sq: f32 = omega.iter().zip(ideal).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sq / omega.len() as f32)
}

/// Batch mean of [`loss_ia`] and its gradient w.r.t. `ω`.
pub fn loss_ia_batch(omega: &Array2<f32>, ideal: &Array2<f32>) -> Result<(f32, Array2<f32>)> {
    if omega.dim() != ideal.dim() {
        return Err(Error::Dimension(format!("gate {:?} vs targets {:?}", omega.dim(), ideal.dim())));
    }
    let (n, k) = omega.dim();
    let diff = omega - ideal;
    let loss = diff.iter().map(|d| d * d).sum::<f32>() / (n * k) as f32;
    let grad = diff * (2.0 / (n * k) as f32);
    Ok((loss, grad))
}
