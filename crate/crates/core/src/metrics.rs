//! Accuracy, confusion matrices, parameter and memory ledgers, feature drift.

use ndarray::{Array2, ArrayView4};

use crate::engine::DlcState;
use crate::error::{Error, Result};
use crate::nn::backbone::FeatureExtractor;
use crate::nn::params::ParamVisitor;

const MIB: f64 = (1u64 << 20) as f64;

/// Percentage of correct predictions.
pub fn stage_accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Input(format!("{} predictions for {} labels", predictions.len(), labels.len())));
    }
    if labels.is_empty() {
        return Err(Error::Input("accuracy of an empty set".into()));
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(100.0 * correct as f64 / labels.len() as f64)
}

pub fn average_accuracy(stage_accuracies: &[f64]) -> Result<f64> {
    if stage_accuracies.is_empty() {
        return Err(Error::Input("average over zero stages".into()));
    }
    Ok(stage_accuracies.iter().sum::<f64>() / stage_accuracies.len() as f64)
}

/// `(i, j)` counts samples of true class `i` predicted as `j`.
pub fn confusion_matrix(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<Array2<u64>> {
    if predictions.len() != labels.len() {
        return Err(Error::Input(format!("{} predictions for {} labels", predictions.len(), labels.len())));
    }
    let mut m = Array2::zeros((num_classes, num_classes));
    for (&p, &l) in predictions.iter().zip(labels) {
        if p >= num_classes || l >= num_classes {
            return Err(Error::Input(format!("class id {} outside 0..{num_classes}", p.max(l))));
        }
        m[[l, p]] += 1;
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemoryLedger {
    pub param_count: u64,
    pub bytes_per_param: u64,
    pub exemplar_count: u64,
    pub bytes_per_exemplar: u64,
    pub total_mb: f64,
}

impl MemoryLedger {
    pub fn total_bytes(&self) -> u64 {
        self.param_count * self.bytes_per_param + self.exemplar_count * self.bytes_per_exemplar
    }
}

/// Total memory in MB (2^20 bytes).
pub fn memory_ledger(param_count: u64, bytes_per_param: u64, exemplar_count: u64, bytes_per_exemplar: u64) -> MemoryLedger {
    let bytes = param_count * bytes_per_param + exemplar_count * bytes_per_exemplar;
    MemoryLedger {
        param_count,
        bytes_per_param,
        exemplar_count,
        bytes_per_exemplar,
        total_mb: bytes as f64 / MIB,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ParameterReport {
    pub lora_total: usize,
    pub extractor_total: usize,
    pub heads_total: usize,
    pub gate_total: usize,
}

impl ParameterReport {
    /// Everything kept for inference. The auxiliary head is discarded after
    /// phase 2 and is not counted.
    pub fn model_total(&self) -> usize {
        self.lora_total + self.extractor_total + self.heads_total + self.gate_total
    }
}

/// Literal scalar counts of the learner's components.
pub fn parameter_report(state: &DlcState) -> ParameterReport {
    let lora_total = state.plugins().iter().map(|p| p.lora_param_count()).sum();
    let heads_total =
        state.base_head().param_count() + state.aggregate_head().map_or(0, |h| h.param_count());
    ParameterReport {
        lora_total,
        extractor_total: state.phi().param_count(),
        heads_total,
        gate_total: state.gate().map_or(0, |g| g.param_count()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftReport {
    pub layer: String,
    pub probe_size: usize,
    pub mean: f64,
    pub max: f64,
}

/// Per-sample L2 distance between post-activation outputs of `layer` in two
/// snapshots of the same architecture.
pub fn measure_drift(
    before: &FeatureExtractor,
    after: &FeatureExtractor,
    layer: usize,
    probe: ArrayView4<f32>,
) -> Result<DriftReport> {
    if before.spec() != after.spec() {
        return Err(Error::Config("drift snapshots have different architectures".into()));
    }
    let n_layers = before.layers().len();
    if layer >= n_layers {
        return Err(Error::Config(format!("layer {layer} outside 0..{n_layers}")));
    }
    if probe.shape()[0] == 0 {
        return Err(Error::Input("empty drift probe".into()));
    }
    let a = before.layer_outputs(probe, &[])?.swap_remove(layer);
    let b = after.layer_outputs(probe, &[])?.swap_remove(layer);
    let (mut sum, mut max) = (0.0f64, 0.0f64);
    for (ra, rb) in a.rows().into_iter().zip(b.rows()) {
        let d = ra
            .iter()
            .zip(rb)
            .map(|(&x, &y)| {
                let e = f64::from(x) - f64::from(y);
                e * e
            })
            .sum::<f64>()
            .sqrt();
        sum += d;
        max = max.max(d);
    }
    Ok(DriftReport {
        layer: before.layers()[layer].name.clone(),
        probe_size: a.nrows(),
        mean: sum / a.nrows() as f64,
        max,
    })
}

/// Evaluation of one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord {
    pub stage: usize,
    pub known_classes: usize,
    pub accuracy: f64,
    pub average_so_far: f64,
    pub lora_params: usize,
    pub extractor_params: usize,
    pub buffer_count: usize,
    pub memory_mb: f64,
    pub confusion: Array2<u64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub stages: Vec<StageRecord>,
    /// Ledgers of the model after the last recorded stage.
    pub parameters: ParameterReport,
    pub memory: Option<MemoryLedger>,
}

impl MetricsReport {
    pub fn push(&mut self, record: StageRecord) {
        self.stages.push(record);
    }

    pub fn stage_accuracies(&self) -> Vec<f64> {
        self.stages.iter().map(|s| s.accuracy).collect()
    }

    /// Ā over all recorded stages.
    pub fn average(&self) -> Result<f64> {
        average_accuracy(&self.stage_accuracies())
    }

    /// A_T, the last stage's accuracy.
    pub fn last(&self) -> Result<f64> {
        self.stages.last().map(|s| s.accuracy).ok_or_else(|| Error::Input("report has no stages".into()))
    }
}
