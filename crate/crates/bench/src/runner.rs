//! Runs the incremental protocol for each configured seed.

use std::path::{Path, PathBuf};

use dlc_core::engine::{split_stream, DlcState, ImageSet, Task, TaskStream};
use dlc_core::metrics::{
    average_accuracy, confusion_matrix, measure_drift, memory_ledger, parameter_report, stage_accuracy, DriftReport,
    MetricsReport, StageRecord,
};
use dlc_core::nn::params::{checksum, Checksum};
use dlc_core::rng;
use rand::seq::SliceRandom;

use crate::checkpoint::{save_stage, stage_dir, StagePredictions};
use crate::config::ExperimentConfig;
use crate::data::load_dataset;
use crate::error::BenchError;
use crate::report::{emit_report, emit_trace, RunInfo};

/// Everything observed during one stage that the report itself does not carry.
#[derive(Debug, Clone, PartialEq)]
pub struct StageTrace {
    pub stage: usize,
    pub phi_after_phase1: Checksum,
    pub phi_after_phase2: Option<Checksum>,
    /// Checksums of the plugin sets that existed before this stage's phase 2.
    pub plugins_before_phase2: Vec<Checksum>,
    /// Checksums of every plugin set at the end of the stage, in task order.
    pub plugins_at_end: Vec<Checksum>,
    /// φ drift across phase 2, one entry per layer.
    pub drift_phase2: Vec<DriftReport>,
    /// φ drift across phase 1 on the old-task probe, one entry per layer.
    pub drift_phase1: Vec<DriftReport>,
    /// Mean gate weight on pre and pos blocks over current-task test samples.
    pub gate_means: Option<(f64, f64)>,
    pub phase1_losses: Vec<f32>,
    pub phase2_losses: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub report: MetricsReport,
    pub trace: Vec<StageTrace>,
    pub predictions: Vec<StagePredictions>,
}

/// Fixed seeded subset of old-task test samples (current task at stage 1).
fn drift_probe(cfg: &ExperimentConfig, seed: u64, stream: &TaskStream, stage: usize) -> Vec<usize> {
    let tasks = if stage == 1 { &stream.tasks[..1] } else { &stream.tasks[..stage - 1] };
    let mut pool: Vec<usize> = tasks.iter().flat_map(|t| t.test.iter().copied()).collect();
    pool.shuffle(&mut rng::stream(seed, "drift-probe", &[stage as u64]));
    pool.truncate(cfg.probe_size);
    pool.sort_unstable();
    pool
}

fn drift_all_layers(
    before: &dlc_core::nn::backbone::FeatureExtractor,
    after: &dlc_core::nn::backbone::FeatureExtractor,
    probe: &ndarray::Array4<f32>,
) -> Result<Vec<DriftReport>, BenchError> {
    (0..before.layers().len())
        .map(|l| Ok(measure_drift(before, after, l, probe.view())?))
        .collect()
}

fn evaluate(state: &DlcState, test: &ImageSet, tasks: &[Task]) -> Result<StagePredictions, BenchError> {
    let indices: Vec<usize> = tasks.iter().flat_map(|t| t.test.iter().copied()).collect();
    let predictions = state.predict(test, &indices)?;
    let labels = indices.iter().map(|&i| test.labels[i]).collect();
    Ok(StagePredictions { indices, labels, predictions })
}

/// Builds the stage record from predictions and the learner's ledgers.
pub fn stage_record(
    cfg: &ExperimentConfig,
    state: &DlcState,
    stage: usize,
    preds: &StagePredictions,
    previous: &[f64],
) -> Result<StageRecord, BenchError> {
    let known = state.known_classes();
    let accuracy = stage_accuracy(&preds.predictions, &preds.labels)?;
    let mut accs = previous.to_vec();
    accs.push(accuracy);
    let params = parameter_report(state);
    let memory = memory_ledger(params.model_total() as u64, cfg.bytes_per_param, state.buffer().len() as u64, cfg.exemplar_bytes());
    Ok(StageRecord {
        stage,
        known_classes: known,
        accuracy,
        average_so_far: average_accuracy(&accs)?,
        lora_params: params.lora_total,
        extractor_params: params.extractor_total,
        buffer_count: state.buffer().len(),
        memory_mb: memory.total_mb,
        confusion: confusion_matrix(&preds.predictions, &preds.labels, known)?,
    })
}

/// Runs every stage for one seed on already loaded data. With `out` set,
/// checkpoints are written under `out/stage_XX`.
pub fn run_seed(
    cfg: &ExperimentConfig,
    seed: u64,
    train: &ImageSet,
    test: &ImageSet,
    out: Option<&Path>,
) -> Result<SeedRun, BenchError> {
    let (stream, train, test) = split_stream(cfg.class_count, cfg.base_m, cfg.inc_n, train, test, cfg.order_seed)?;
    let mut state = DlcState::new(&cfg.backbone(), cfg.train_config(seed))?;
    let mut report = MetricsReport::default();
    let mut trace = Vec::new();
    let mut all_preds = Vec::new();
    for (i, task) in stream.tasks.iter().enumerate() {
        let stage = i + 1;
        let probe = test.batch(&drift_probe(cfg, seed, &stream, stage));
        let phi_start = state.phi().clone();
        state.begin_stage(task.labels.clone())?;
        let pool = state.training_pool(task, &train);
        let log1 = state.phase1_train(&train, &pool)?;
        let phi_after_phase1 = state.phi_checksum();
        let drift_phase1 = drift_all_layers(&phi_start, state.phi(), &probe)?;
        let plugins_before_phase2 = state.plugin_checksums();
        let (mut phi_after_phase2, mut drift_phase2, mut phase2_losses) = (None, Vec::new(), Vec::new());
        if cfg.train.dlc {
            let phi_before = state.phi().clone();
            phase2_losses = state.phase2_train(&train, &pool)?.epoch_losses;
            phi_after_phase2 = Some(checksum(state.phi()));
            drift_phase2 = drift_all_layers(&phi_before, state.phi(), &probe)?;
        }
        state.snapshot_teacher()?;
        state.update_buffer(&train, task)?;
        let preds = evaluate(&state, &test, &stream.tasks[..stage])?;
        let record = stage_record(cfg, &state, stage, &preds, &report.stage_accuracies())?;
        report.push(record);
        let gate_means = state.gate_block_means(&test, &task.test, task.task_id)?;
        trace.push(StageTrace {
            stage,
            phi_after_phase1,
            phi_after_phase2,
            plugins_before_phase2,
            plugins_at_end: state.plugin_checksums(),
            drift_phase2,
            drift_phase1,
            gate_means,
            phase1_losses: log1.epoch_losses,
            phase2_losses,
        });
        if let Some(dir) = out {
            save_stage(&stage_dir(dir, stage), seed, &state, &preds)?;
        }
        all_preds.push(preds);
    }
    let params = parameter_report(&state);
    report.parameters = params;
    report.memory = Some(memory_ledger(
        params.model_total() as u64,
        cfg.bytes_per_param,
        state.buffer().len() as u64,
        cfg.exemplar_bytes(),
    ));
    Ok(SeedRun { seed, report, trace, predictions: all_preds })
}

pub fn seed_dir(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    cfg.output_dir.join(format!("seed_{seed}"))
}

/// Loads the data, runs every seed and writes reports, traces and checkpoints.
/// Returns the per-seed runs and the list of files written.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<(Vec<SeedRun>, Vec<PathBuf>), BenchError> {
    cfg.validate()?;
    let (train, test) = load_dataset(cfg)?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    let cfg_path = cfg.output_dir.join("config.txt");
    std::fs::write(&cfg_path, cfg.to_text())?;
    let mut written = vec![cfg_path];
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let dir = seed_dir(cfg, seed);
        std::fs::create_dir_all(&dir)?;
        let run = run_seed(cfg, seed, &train, &test, Some(&dir))?;
        let info = RunInfo::new(cfg, seed);
        written.extend(emit_report(&run.report, &info, &dir)?);
        written.extend(emit_trace(&run.trace, &dir)?);
        runs.push(run);
    }
    written.push(crate::report::emit_aggregate(&runs, &cfg.output_dir)?);
    Ok((runs, written))
}

fn stage_dirs(dir: &Path) -> Result<Vec<PathBuf>, BenchError> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| BenchError::Data(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("stage_")))
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(BenchError::Data(format!("no stage_XX checkpoints under {}", dir.display())));
    }
    Ok(dirs)
}

/// Rebuilds the report of one seed directory from its checkpoints alone.
pub fn report_from_checkpoints(cfg: &ExperimentConfig, dir: &Path) -> Result<(MetricsReport, u64), BenchError> {
    let mut report = MetricsReport::default();
    let mut last = None;
    for (i, d) in stage_dirs(dir)?.iter().enumerate() {
        let (state, preds) = crate::checkpoint::load_stage(d, cfg)?;
        let record = stage_record(cfg, &state, i + 1, &preds, &report.stage_accuracies())?;
        report.push(record);
        last = Some(state);
    }
    let state = last.expect("at least one stage");
    let params = parameter_report(&state);
    report.parameters = params;
    report.memory = Some(memory_ledger(
        params.model_total() as u64,
        cfg.bytes_per_param,
        state.buffer().len() as u64,
        cfg.exemplar_bytes(),
    ));
    Ok((report, state.config().seed))
}

/// φ drift at every layer between two stage checkpoints, probed on a seeded
/// subset of test samples from the classes the first checkpoint knows.
pub fn drift_between(cfg: &ExperimentConfig, a: &Path, b: &Path) -> Result<Vec<DriftReport>, BenchError> {
    let (sa, _) = crate::checkpoint::load_stage(a, cfg)?;
    let (sb, _) = crate::checkpoint::load_stage(b, cfg)?;
    let (train, test) = load_dataset(cfg)?;
    let (_, _, test) = split_stream(cfg.class_count, cfg.base_m, cfg.inc_n, &train, &test, cfg.order_seed)?;
    let known = sa.known_classes();
    let mut pool: Vec<usize> = (0..test.len()).filter(|&i| test.labels[i] < known).collect();
    pool.shuffle(&mut rng::stream(sa.config().seed, "drift-probe", &[0]));
    pool.truncate(cfg.probe_size);
    pool.sort_unstable();
    drift_all_layers(sa.phi(), sb.phi(), &test.batch(&pool))
}
