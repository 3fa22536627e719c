//! The two-phase learner.
//!
//! Per task: phase 1 trains the extractor and base head on cross-entropy plus
//! the method's distillation term, with every plugin set out of the path.
//! Phase 2 freezes the extractor (batch-norm statistics included), creates
//! the task's plugin set and trains it together with the gate, the aggregate
//! head and a throwaway auxiliary head. The plugin set is then frozen for good.

use std::ops::Range;

use ndarray::{concatenate, s, Array2, ArrayView4, Axis};
use rand::seq::SliceRandom;

use super::buffer::{l2_normalize_rows, ExemplarBuffer};
use super::config::{KdVariant, TrainConfig};
use super::data::ImageSet;
use super::losses::{loss_aux, loss_ce, loss_kd_ce, loss_kd_kl};
use super::stream::Task;
use crate::convlora::{AdapterGrads, PluginSet};
use crate::error::{Error, Result};
use crate::gating::{ideal_weights, loss_ia_batch, GateGrads, WeightingUnit};
use crate::nn::backbone::{BackboneSpec, FeatureExtractor};
use crate::nn::head::{ClassifierHead, HeadGrads, HeadRole};
use crate::nn::ops::argmax_rows;
use crate::nn::optim::{MultiStepLr, Sgd};
use crate::nn::params::{checksum, Checksum, ParamVisitor};
use crate::rng;

const EVAL_BATCH: usize = 256;

/// One training sample: where it lives, its incremental label and its task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolItem {
    pub index: usize,
    pub label: usize,
    pub task_id: usize,
}

/// Frozen copy of the extractor and base head taken at the end of a stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Teacher {
    phi: FeatureExtractor,
    head: ClassifierHead,
}

impl Teacher {
    pub fn new(phi: FeatureExtractor, head: ClassifierHead) -> Self {
        Self { phi, head }
    }

    pub fn phi(&self) -> &FeatureExtractor {
        &self.phi
    }

    pub fn head(&self) -> &ClassifierHead {
        &self.head
    }

    pub fn logits(&self, batch: ArrayView4<f32>) -> Result<Array2<f32>> {
        self.head.forward(&self.phi.forward_features(batch)?)
    }

    pub fn checksum(&self) -> Checksum {
        struct Both<'a>(&'a Teacher);
        impl ParamVisitor for Both<'_> {
            fn visit(&self, f: &mut dyn FnMut(&str, &[f32])) {
                self.0.phi.visit(f);
                self.0.head.visit(f);
            }
            fn param_count(&self) -> usize {
                self.0.phi.param_count() + self.0.head.param_count()
            }
        }
        checksum(&Both(self))
    }
}

/// Mean loss per epoch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StageLog {
    pub epoch_losses: Vec<f32>,
}

/// Output of gated concatenated inference.
#[derive(Debug, Clone)]
pub struct Inference {
    pub logits: Array2<f32>,
    /// `(N, T·d_feat)` concatenated per-task features, before gating.
    pub concat: Array2<f32>,
    pub omega: Option<Array2<f32>>,
}

struct Phase2Grads {
    adapters: Vec<Option<AdapterGrads>>,
    aggregate: HeadGrads,
    aux: HeadGrads,
    gate: Option<GateGrads>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Idle,
    Started,
    Phase1Done,
    Phase2Done,
}

#[derive(Debug, Clone)]
pub struct DlcState {
    config: TrainConfig,
    phi: FeatureExtractor,
    base_head: ClassifierHead,
    aggregate_head: Option<ClassifierHead>,
    aux_head: Option<ClassifierHead>,
    gate: Option<WeightingUnit>,
    plugins: Vec<PluginSet>,
    teacher: Option<Teacher>,
    task_ranges: Vec<Range<usize>>,
    completed: usize,
    buffer: ExemplarBuffer,
    phase: Phase,
}

impl DlcState {
    pub fn new(spec: &BackboneSpec, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let phi = FeatureExtractor::build(spec, rng::derive_seed(config.seed, "phi", &[]))?;
        let base_head = ClassifierHead::zeros(phi.feature_dim(), 0, true, HeadRole::Base);
        let buffer = ExemplarBuffer::new(if config.method.uses_buffer() { config.buffer_capacity } else { 0 });
        Ok(Self {
            config,
            phi,
            base_head,
            aggregate_head: None,
            aux_head: None,
            gate: None,
            plugins: Vec::new(),
            teacher: None,
            task_ranges: Vec::new(),
            completed: 0,
            buffer,
            phase: Phase::Idle,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }
    pub fn phi(&self) -> &FeatureExtractor {
        &self.phi
    }
    pub fn base_head(&self) -> &ClassifierHead {
        &self.base_head
    }
    pub fn aggregate_head(&self) -> Option<&ClassifierHead> {
        self.aggregate_head.as_ref()
    }
    pub fn aux_head(&self) -> Option<&ClassifierHead> {
        self.aux_head.as_ref()
    }
    pub fn gate(&self) -> Option<&WeightingUnit> {
        self.gate.as_ref()
    }
    pub fn plugins(&self) -> &[PluginSet] {
        &self.plugins
    }
    pub fn teacher(&self) -> Option<&Teacher> {
        self.teacher.as_ref()
    }
    pub fn buffer(&self) -> &ExemplarBuffer {
        &self.buffer
    }
    pub fn task_ranges(&self) -> &[Range<usize>] {
        &self.task_ranges
    }
    pub fn known_classes(&self) -> usize {
        self.task_ranges.last().map_or(0, |r| r.end)
    }
    pub fn task_count(&self) -> usize {
        self.task_ranges.len()
    }
    pub fn completed_stages(&self) -> usize {
        self.completed
    }
    pub fn phi_checksum(&self) -> Checksum {
        checksum(&self.phi)
    }
    pub fn plugin_checksums(&self) -> Vec<Checksum> {
        self.plugins.iter().map(|p| checksum(p)).collect()
    }

    /// Registers the next task's label range and widens the base head.
    pub fn begin_stage(&mut self, labels: Range<usize>) -> Result<()> {
        if self.phase != Phase::Idle {
            return Err(Error::Protocol("previous stage not finished".into()));
        }
        if labels.start != self.known_classes() || labels.is_empty() {
            return Err(Error::Protocol(format!(
                "task labels {labels:?} must start at {} and be non-empty",
                self.known_classes()
            )));
        }
        self.base_head = self.base_head.grow(self.phi.feature_dim(), labels.end)?;
        self.task_ranges.push(labels);
        self.phase = Phase::Started;
        Ok(())
    }

    /// Current task samples plus, for replay methods, every stored exemplar.
    pub fn training_pool(&self, task: &Task, train: &ImageSet) -> Vec<PoolItem> {
        let mut pool: Vec<PoolItem> =
            task.train.iter().map(|&i| PoolItem { index: i, label: train.labels[i], task_id: task.task_id }).collect();
        if self.config.method.uses_buffer() {
            pool.extend(self.buffer.entries().map(|e| PoolItem { index: e.index, label: e.label, task_id: e.task_id }));
        }
        pool
    }

    fn shuffled(&self, pool: &[PoolItem], tag: &str, epoch: usize) -> Vec<PoolItem> {
        let mut order = pool.to_vec();
        order.shuffle(&mut rng::stream(self.config.seed, tag, &[self.task_count() as u64, epoch as u64]));
        order
    }

    /// Phase 1: extractor and base head on `λ_ce·L_CE + λ_mem·L_KD`.
    pub fn phase1_train(&mut self, data: &ImageSet, pool: &[PoolItem]) -> Result<StageLog> {
        if self.phase != Phase::Started {
            return Err(Error::Protocol("phase 1 requires a freshly started stage".into()));
        }
        if pool.is_empty() {
            return Err(Error::Input("empty training pool".into()));
        }
        if self.teacher.is_some() != (self.task_count() > 1) {
            return Err(Error::Protocol("teacher must exist exactly from the second stage on".into()));
        }
        let cfg = self.config.clone();
        let known = self.known_classes();
        if let Some(bad) = pool.iter().find(|p| p.label >= known) {
            return Err(Error::Input(format!("pool label {} outside {known} known classes", bad.label)));
        }
        let schedule = MultiStepLr { base_lr: cfg.lr, milestones: cfg.milestones.clone(), gamma: cfg.lr_gamma };
        let mut sgd = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
        let head_slot = 4 * self.phi.layers().len();
        let mut log = StageLog::default();
        for epoch in 0..cfg.epochs {
            sgd.lr = schedule.lr_at(epoch);
            let order = self.shuffled(pool, "phase1", epoch);
            let mut total = 0.0f64;
            for chunk in order.chunks(cfg.batch_size) {
                let idx: Vec<usize> = chunk.iter().map(|p| p.index).collect();
                let labels: Vec<usize> = chunk.iter().map(|p| p.label).collect();
                let x = data.batch(&idx);
                let (feat, cache) = self.phi.forward_train(x.view())?;
                let logits = self.base_head.forward(&feat)?;
                let ce = loss_ce(logits.view(), &labels)?;
                let mut loss = cfg.lambda_ce * ce.value;
                let mut grad = ce.grad * cfg.lambda_ce;
                if cfg.method.uses_distillation() {
                    if let Some(teacher) = &self.teacher {
                        let old = teacher.head().num_classes();
                        let t_logits = teacher.logits(x.view())?;
                        let student = logits.slice(s![.., ..old]);
                        let kd = match cfg.kd {
                            KdVariant::Kl => loss_kd_kl(student, t_logits.view(), cfg.tau)?,
                            KdVariant::Ce => loss_kd_ce(student, t_logits.view())?,
                        };
                        loss += cfg.lambda_mem * kd.value;
                        grad.slice_mut(s![.., ..old]).scaled_add(cfg.lambda_mem, &kd.grad);
                    }
                }
                if !loss.is_finite() {
                    return Err(Error::Input(format!("non-finite phase-1 loss at epoch {epoch}")));
                }
                let hg = self.base_head.backward(&feat, &grad);
                let eg = self.phi.backward(&cache, &hg.input, &[], true);
                self.phi.apply_grads(&mut sgd, &eg);
                sgd.step_array(head_slot, &mut self.base_head.weight, &hg.weight);
                if let (Some(b), Some(gb)) = (self.base_head.bias.as_mut(), hg.bias.as_ref()) {
                    sgd.step_array(head_slot + 1, b, gb);
                }
                total += f64::from(loss) * chunk.len() as f64;
            }
            log.epoch_losses.push((total / pool.len() as f64) as f32);
        }
        self.phase = Phase::Phase1Done;
        Ok(log)
    }

    /// Prepares this stage's plugin set, aggregate head, gate and auxiliary head.
    fn expand_for_phase2(&mut self) -> Result<()> {
        let t = self.task_count();
        let d = self.phi.feature_dim();
        let known = self.known_classes();
        let cfg = &self.config;
        let set = PluginSet::new(t, &self.phi, cfg.k_plugins, cfg.rank, cfg.alpha, rng::derive_seed(cfg.seed, "plugins", &[t as u64]))?;
        self.plugins.push(set);
        self.aggregate_head = Some(match &self.aggregate_head {
            None => ClassifierHead::zeros(t * d, known, true, HeadRole::Aggregate),
            Some(h) => h.grow(t * d, known)?,
        });
        if cfg.gate_enabled() {
            let seed = rng::derive_seed(cfg.seed, "gate", &[t as u64]);
            self.gate = Some(match &self.gate {
                None => WeightingUnit::with_width(d, t * d, seed)?,
                Some(g) => g.grow(t * d, seed)?,
            });
        }
        let current = self.task_ranges[t - 1].len();
        self.aux_head = Some(ClassifierHead::zeros(d, current + 1, true, HeadRole::Auxiliary));
        Ok(())
    }

    fn first_adapted_layer(&self) -> Result<usize> {
        self.plugins
            .iter()
            .map(|p| p.first_layer(&self.phi))
            .try_fold(usize::MAX, |m, l| l.map(|l| m.min(l)))
    }

    /// Loss and gradients of the phase-2 objective on one batch, without
    /// touching any parameter.
    fn phase2_grads(&self, x: ArrayView4<f32>, chunk: &[PoolItem], first: usize) -> Result<(f32, Phase2Grads)> {
        let cfg = &self.config;
        let t = self.task_count();
        let d = self.phi.feature_dim();
        let current = self.task_ranges[t - 1].clone();
        let labels: Vec<usize> = chunk.iter().map(|p| p.label).collect();
        let prefix = self.phi.prefix(x, first)?;

        let mut blocks = Vec::with_capacity(t);
        let mut active_cache = None;
        for (s, set) in self.plugins.iter().enumerate() {
            let (f, cache) = self.phi.forward_from(&prefix, first, &set.slots(&self.phi)?)?;
            if s + 1 == t {
                active_cache = Some(cache);
            }
            blocks.push(f);
        }
        let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
        let h = concatenate(Axis(1), &views).expect("equal rows");
        let f_active = blocks.pop().expect("active block");

        let gate_cache = self.gate.as_ref().map(|g| g.forward_cached(&h)).transpose()?;
        let gated = match &gate_cache {
            Some(gc) => &gc.omega * &h,
            None => h.clone(),
        };
        let agg = self.aggregate_head.as_ref().ok_or_else(|| Error::Protocol("no aggregate head".into()))?;
        let aux = self.aux_head.as_ref().ok_or_else(|| Error::Protocol("no auxiliary head".into()))?;
        let ce = loss_ce(agg.forward(&gated)?.view(), &labels)?;
        let la = loss_aux(aux.forward(&f_active)?.view(), &labels, current)?;
        let mut loss = cfg.lambda_ce * ce.value + cfg.lambda_aux * la.value;

        let agg_grads = agg.backward(&gated, &(ce.grad * cfg.lambda_ce));
        let aux_grads = aux.backward(&f_active, &(la.grad * cfg.lambda_aux));
        let (grad_h, gate_grads) = match (&self.gate, &gate_cache) {
            (Some(g), Some(gc)) => {
                let ideal_rows = chunk.iter().map(|p| ideal_weights(p.task_id, t, d)).collect::<Result<Vec<_>>>()?;
                let ideal_views: Vec<_> = ideal_rows.iter().map(|r| r.view().insert_axis(Axis(0))).collect();
                let ideal = concatenate(Axis(0), &ideal_views).expect("equal widths");
                let (ia, ia_grad) = loss_ia_batch(&gc.omega, &ideal)?;
                loss += cfg.lambda_ia * ia;
                let grad_omega = &agg_grads.input * &h + &(ia_grad * cfg.lambda_ia);
                let gg = g.backward(&h, gc, &grad_omega);
                (&agg_grads.input * &gc.omega + &gg.input, Some(gg))
            }
            _ => (agg_grads.input.clone(), None),
        };
        let mut grad_active = grad_h.slice(s![.., (t - 1) * d..t * d]).to_owned();
        grad_active += &aux_grads.input;
        let cache = active_cache.expect("active forward cached");
        let adapters = self.phi.backward(&cache, &grad_active, &self.plugins[t - 1].slots(&self.phi)?, false).adapters;
        Ok((loss, Phase2Grads { adapters, aggregate: agg_grads, aux: aux_grads, gate: gate_grads }))
    }

    /// Phase 2: plugins of the current task, gate and aggregate head on
    /// `λ_ce·L_CE + λ_aux·L_aux (+ λ_ia·L_IA)`. The extractor is not touched.
    pub fn phase2_train(&mut self, data: &ImageSet, pool: &[PoolItem]) -> Result<StageLog> {
        if self.phase != Phase::Phase1Done {
            return Err(Error::Protocol("phase 2 must follow phase 1 of the same stage".into()));
        }
        if !self.config.dlc {
            return Err(Error::Protocol("phase 2 runs only with plugins enabled".into()));
        }
        if pool.is_empty() {
            return Err(Error::Input("empty training pool".into()));
        }
        self.expand_for_phase2()?;
        let cfg = self.config.clone();
        let t = self.task_count();
        let first = self.first_adapted_layer()?;
        let mut sgd = Sgd::new(cfg.phase2_lr, cfg.momentum, cfg.weight_decay);
        let (agg_slot, aux_slot, gate_slot) = (1000, 1002, 1004);
        let mut log = StageLog::default();
        for epoch in 0..cfg.phase2_epochs {
            let order = self.shuffled(pool, "phase2", epoch);
            let mut total = 0.0f64;
            for chunk in order.chunks(cfg.batch_size) {
                let idx: Vec<usize> = chunk.iter().map(|p| p.index).collect();
                let x = data.batch(&idx);
                let (loss, g) = self.phase2_grads(x.view(), chunk, first)?;
                if !loss.is_finite() {
                    return Err(Error::Input(format!("non-finite phase-2 loss at epoch {epoch}")));
                }
                self.plugins[t - 1].apply_grads(&self.phi, &mut sgd, &g.adapters, 0)?;
                let agg = self.aggregate_head.as_mut().expect("expanded");
                step_head(&mut sgd, agg_slot, agg, &g.aggregate.weight, g.aggregate.bias.as_ref());
                let aux = self.aux_head.as_mut().expect("expanded");
                step_head(&mut sgd, aux_slot, aux, &g.aux.weight, g.aux.bias.as_ref());
                if let (Some(gate), Some(gg)) = (self.gate.as_mut(), g.gate.as_ref()) {
                    gate.apply_grads(&mut sgd, gate_slot, gg);
                }
                total += f64::from(loss) * chunk.len() as f64;
            }
            log.epoch_losses.push((total / pool.len() as f64) as f32);
        }
        self.plugins[t - 1].freeze();
        self.phase = Phase::Phase2Done;
        Ok(log)
    }

    /// Stores an immutable copy of the extractor and base head for the next stage.
    pub fn snapshot_teacher(&mut self) -> Result<()> {
        let ready = match self.phase {
            Phase::Phase2Done => true,
            Phase::Phase1Done => !self.config.dlc,
            _ => false,
        };
        if !ready {
            return Err(Error::Protocol("stage training incomplete".into()));
        }
        self.teacher = Some(Teacher::new(self.phi.clone(), self.base_head.clone()));
        self.completed += 1;
        self.phase = Phase::Idle;
        Ok(())
    }

    /// Herding update for replay methods using plain extractor features.
    pub fn update_buffer(&mut self, data: &ImageSet, task: &Task) -> Result<()> {
        if !self.config.method.uses_buffer() {
            return Ok(());
        }
        let mut new_classes = Vec::with_capacity(task.labels.len());
        for label in task.labels.clone() {
            let candidates: Vec<usize> = task.train.iter().copied().filter(|&i| data.labels[i] == label).collect();
            let feats = if candidates.is_empty() {
                Array2::zeros((0, self.phi.feature_dim()))
            } else {
                self.plain_features(data, &candidates)?
            };
            new_classes.push((label, task.task_id, candidates, l2_normalize_rows(&feats)));
        }
        self.buffer.update(self.known_classes(), new_classes);
        Ok(())
    }

    pub fn plain_features(&self, data: &ImageSet, indices: &[usize]) -> Result<Array2<f32>> {
        let parts = indices
            .chunks(EVAL_BATCH)
            .map(|c| self.phi.forward_features(data.batch(c).view()))
            .collect::<Result<Vec<_>>>()?;
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        Ok(concatenate(Axis(0), &views).expect("equal widths"))
    }

    /// Per-task adapted features `φ^{L_s}(x)` for every plugin set, in task order.
    pub fn task_features(&self, batch: ArrayView4<f32>) -> Result<Vec<Array2<f32>>> {
        if self.plugins.is_empty() {
            return Err(Error::Protocol("no plugin sets trained yet".into()));
        }
        let first = self.first_adapted_layer()?;
        let prefix = self.phi.prefix(batch, first)?;
        self.plugins
            .iter()
            .map(|set| Ok(self.phi.forward_from(&prefix, first, &set.slots(&self.phi)?)?.0))
            .collect()
    }

    /// Concatenate every task representation, gate it and classify it.
    pub fn infer(&self, batch: ArrayView4<f32>) -> Result<Inference> {
        let head = match (&self.aggregate_head, self.plugins.iter().all(PluginSet::is_frozen)) {
            (Some(h), true) if !self.plugins.is_empty() => h,
            _ => return Err(Error::Protocol("inference needs at least one completed plugin stage".into())),
        };
        let blocks = self.task_features(batch)?;
        let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
        let concat = concatenate(Axis(1), &views).expect("equal rows");
        let omega = self.gate.as_ref().map(|g| g.forward(&concat)).transpose()?;
        let logits = match &omega {
            Some(w) => head.forward(&(w * &concat))?,
            None => head.forward(&concat)?,
        };
        Ok(Inference { logits, concat, omega })
    }

    pub fn base_logits(&self, batch: ArrayView4<f32>) -> Result<Array2<f32>> {
        self.base_head.forward(&self.phi.forward_features(batch)?)
    }

    /// Predicted labels: gated aggregate path with plugins, base head otherwise.
    pub fn predict(&self, data: &ImageSet, indices: &[usize]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(indices.len());
        for c in indices.chunks(EVAL_BATCH) {
            let x = data.batch(c);
            let logits = if self.config.dlc { self.infer(x.view())?.logits } else { self.base_logits(x.view())? };
            out.extend(argmax_rows(logits.view()));
        }
        Ok(out)
    }

    /// Mean gate value over pre blocks (tasks before `task_id`) and over the
    /// remaining blocks, on the given samples of task `task_id`.
    pub fn gate_block_means(&self, data: &ImageSet, indices: &[usize], task_id: usize) -> Result<Option<(f64, f64)>> {
        if self.gate.is_none() || task_id < 2 || indices.is_empty() {
            return Ok(None);
        }
        let d = self.phi.feature_dim();
        let split = (task_id - 1) * d;
        let (mut pre, mut pos, mut n_pre, mut n_pos) = (0.0f64, 0.0f64, 0usize, 0usize);
        for c in indices.chunks(EVAL_BATCH) {
            let inf = self.infer(data.batch(c).view())?;
            let w = inf.omega.expect("gate enabled");
            for row in w.rows() {
                for (j, &v) in row.iter().enumerate() {
                    if j < split {
                        pre += f64::from(v);
                        n_pre += 1;
                    } else {
                        pos += f64::from(v);
                        n_pos += 1;
                    }
                }
            }
        }
        Ok(Some((pre / n_pre as f64, pos / n_pos as f64)))
    }

    /// Replaces every trained component; used when restoring checkpoints.
    #[allow(clippy::too_many_arguments)]
    pub fn restore(
        config: TrainConfig,
        phi: FeatureExtractor,
        base_head: ClassifierHead,
        aggregate_head: Option<ClassifierHead>,
        gate: Option<WeightingUnit>,
        plugins: Vec<PluginSet>,
        teacher: Option<Teacher>,
        task_ranges: Vec<Range<usize>>,
        buffer: ExemplarBuffer,
    ) -> Self {
        let completed = task_ranges.len();
        Self {
            config,
            phi,
            base_head,
            aggregate_head,
            aux_head: None,
            gate,
            plugins,
            teacher,
            task_ranges,
            completed,
            buffer,
            phase: Phase::Idle,
        }
    }
}

fn step_head(sgd: &mut Sgd, slot: usize, head: &mut ClassifierHead, gw: &Array2<f32>, gb: Option<&ndarray::Array1<f32>>) {
    sgd.step_array(slot, &mut head.weight, gw);
    if let (Some(b), Some(gb)) = (head.bias.as_mut(), gb) {
        sgd.step_array(slot + 1, b, gb);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, Normal};

    fn images(n: usize, seed: u64) -> ImageSet {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let pixels = (0..n * 3 * 5 * 5).map(|_| r.random::<u8>()).collect();
        ImageSet::new(3, 5, pixels, (0..n).map(|i| i % 4).collect()).unwrap()
    }

    /// Stage-2 state right before phase 2, with every phase-2 tensor randomized.
    fn staged() -> (DlcState, ImageSet, Vec<PoolItem>) {
        let spec = BackboneSpec::from_channels(3, 5, &[4, 6], &[1, 1], 3);
        let cfg = TrainConfig { epochs: 1, phase2_epochs: 1, batch_size: 8, rank: Some(2), lambda_ia: 3.0, ..TrainConfig::default() };
        let mut st = DlcState::new(&spec, cfg).unwrap();
        let data = images(16, 4);
        let pool: Vec<PoolItem> =
            (0..16).map(|i| PoolItem { index: i, label: data.labels[i], task_id: 1 + data.labels[i] / 2 }).collect();
        st.begin_stage(0..2).unwrap();
        let first: Vec<PoolItem> = pool.iter().copied().filter(|p| p.task_id == 1).collect();
        st.phase1_train(&data, &first).unwrap();
        st.phase2_train(&data, &first).unwrap();
        st.snapshot_teacher().unwrap();
        st.begin_stage(2..4).unwrap();
        st.phase1_train(&data, &pool).unwrap();
        st.expand_for_phase2().unwrap();
        st.phase = Phase::Phase2Done;

        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let n = Normal::new(0.0f32, 0.4).unwrap();
        let mut fill = |a: &mut dyn Iterator<Item = &mut f32>| a.for_each(|v| *v = n.sample(&mut r));
        let agg = st.aggregate_head.as_mut().unwrap();
        fill(&mut agg.weight.iter_mut());
        let aux = st.aux_head.as_mut().unwrap();
        fill(&mut aux.weight.iter_mut());
        let gate = st.gate.as_mut().unwrap();
        fill(&mut gate.w1.iter_mut());
        fill(&mut gate.w2.iter_mut());
        for a in &mut st.plugins[1].adapters {
            fill(&mut a.a.iter_mut());
            fill(&mut a.b.iter_mut());
        }
        (st, data, pool)
    }

    fn check(analytic: f32, numeric: f32, what: &str) {
        let tol = 2e-3 + 3e-2 * analytic.abs().max(numeric.abs());
        assert!((analytic - numeric).abs() <= tol, "{what}: analytic {analytic} vs numeric {numeric}");
    }

    #[test]
    fn phase_two_gradients_match_finite_differences() {
        let (st, data, pool) = staged();
        let idx: Vec<usize> = pool.iter().map(|p| p.index).collect();
        let x: Array4<f32> = data.batch(&idx);
        let first = st.first_adapted_layer().unwrap();
        let (_, g) = st.phase2_grads(x.view(), &pool, first).unwrap();
        let eps = 1e-2f32;
        let loss_with = |edit: &dyn Fn(&mut DlcState, f32)| {
            let f = |e: f32| {
                let mut s = st.clone();
                edit(&mut s, e);
                s.phase2_grads(x.view(), &pool, first).unwrap().0
            };
            (f(eps) - f(-eps)) / (2.0 * eps)
        };
        for &(i, j) in &[(0usize, 0usize), (3, 1), (7, 2), (10, 3)] {
            let num = loss_with(&|s, e| s.aggregate_head.as_mut().unwrap().weight[[i, j]] += e);
            check(g.aggregate.weight[[i, j]], num, "aggregate weight");
        }
        for &(i, j) in &[(0usize, 0usize), (2, 5), (3, 11)] {
            let num = loss_with(&|s, e| s.gate.as_mut().unwrap().w1[[i, j]] += e);
            check(g.gate.as_ref().unwrap().w1[[i, j]], num, "gate w1");
        }
        for &(i, j) in &[(0usize, 0usize), (5, 2), (11, 3)] {
            let num = loss_with(&|s, e| s.gate.as_mut().unwrap().w2[[i, j]] += e);
            check(g.gate.as_ref().unwrap().w2[[i, j]], num, "gate w2");
        }
        for &(i, j) in &[(0usize, 0usize), (4, 2)] {
            let num = loss_with(&|s, e| s.aux_head.as_mut().unwrap().weight[[i, j]] += e);
            check(g.aux.weight[[i, j]], num, "aux weight");
        }
        let ga = g.adapters.iter().flatten().next().expect("active adapter grads");
        for idx in [[0usize, 0, 0, 0], [1, 2, 1, 2], [0, 3, 2, 1]] {
            let num = loss_with(&|s, e| s.plugins[1].adapters[0].a[idx] += e);
            check(ga.a[idx], num, "adapter A");
        }
        for idx in [[0usize, 0, 0, 0], [5, 1, 0, 0]] {
            let num = loss_with(&|s, e| s.plugins[1].adapters[0].b[idx] += e);
            check(ga.b[idx], num, "adapter B");
        }
    }

    #[test]
    fn gate_growth_keeps_old_block_across_stages() {
        let (st, _, _) = staged();
        let g = st.gate.as_ref().unwrap();
        assert_eq!(g.k_gate(), 2 * st.phi.feature_dim());
        assert_eq!(st.aggregate_head.as_ref().unwrap().weight.dim(), (12, 4));
        assert_eq!(st.aux_head.as_ref().unwrap().num_classes(), 3);
    }
}
