//! Batch-mean losses over logits, each returning its gradient w.r.t. the
//! student logits.

use std::ops::Range;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::nn::ops::{log_softmax_rows, softmax_rows};

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f32,
    pub grad: Array2<f32>,
}

fn check_batch(logits: &ArrayView2<f32>, n: usize) -> Result<()> {
    if logits.nrows() != n || n == 0 {
        return Err(Error::Dimension(format!("{} logit rows for {n} targets", logits.nrows())));
    }
    Ok(())
}

/// Mean negative log-softmax of the true class.
pub fn loss_ce(logits: ArrayView2<f32>, labels: &[usize]) -> Result<LossOutput> {
    check_batch(&logits, labels.len())?;
    let classes = logits.ncols();
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Input(format!("label {bad} outside {classes} known classes")));
    }
    let n = labels.len() as f32;
    let logp = log_softmax_rows(logits, 1.0);
    let value = -labels.iter().enumerate().map(|(i, &l)| logp[[i, l]]).sum::<f32>() / n;
    let mut grad = logp.mapv(f32::exp);
    for (i, &l) in labels.iter().enumerate() {
        grad[[i, l]] -= 1.0;
    }
    grad /= n;
    Ok(LossOutput { value, grad })
}

fn check_pair(student: &ArrayView2<f32>, teacher: &ArrayView2<f32>) -> Result<()> {
    if student.dim() != teacher.dim() {
        return Err(Error::Dimension(format!(
            "student logits {:?} vs teacher logits {:?}",
            student.dim(),
            teacher.dim()
        )));
    }
    if student.is_empty() {
        return Err(Error::Input("empty logits".into()));
    }
    Ok(())
}

/// Cross-entropy distillation `−Σ q̂ log q`, both sides softmax-normalised.
pub fn loss_kd_ce(student: ArrayView2<f32>, teacher: ArrayView2<f32>) -> Result<LossOutput> {
    check_pair(&student, &teacher)?;
    let n = student.nrows() as f32;
    let q_hat = softmax_rows(teacher, 1.0);
    let logq = log_softmax_rows(student, 1.0);
    let value = -(&q_hat * &logq).sum() / n;
    let grad = (logq.mapv(f32::exp) - &q_hat) / n;
    Ok(LossOutput { value, grad })
}

/// Temperature-softened KL distillation `τ² Σ q̂_τ log(q̂_τ / q_τ)`.
pub fn loss_kd_kl(student: ArrayView2<f32>, teacher: ArrayView2<f32>, tau: f32) -> Result<LossOutput> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    check_pair(&student, &teacher)?;
    let n = student.nrows() as f32;
    let logq_hat = log_softmax_rows(teacher, tau);
    let logq = log_softmax_rows(student, tau);
    let q_hat = logq_hat.mapv(f32::exp);
    let kl: f32 = q_hat
        .iter()
        .zip(logq_hat.iter().zip(logq.iter()))
        .map(|(&p, (&lp, &lq))| if p > 0.0 { p * (lp - lq) } else { 0.0 })
        .sum();
    let value = (tau * tau * kl / n).max(0.0);
    let grad = (logq.mapv(f32::exp) - &q_hat) * (tau / n);
    Ok(LossOutput { value, grad })
}

/// Auxiliary cross-entropy: labels inside `current` keep their class,
/// everything else maps to one trailing "old" class.
pub fn loss_aux(aux_logits: ArrayView2<f32>, labels: &[usize], current: Range<usize>) -> Result<LossOutput> {
    let width = current.len() + 1;
    if aux_logits.ncols() != width {
        return Err(Error::Dimension(format!(
            "auxiliary head has {} outputs, expected {width}",
            aux_logits.ncols()
        )));
    }
    let mapped: Vec<usize> = labels
        .iter()
        .map(|&l| if current.contains(&l) { l - current.start } else { width - 1 })
        .collect();
    loss_ce(aux_logits, &mapped)
}
