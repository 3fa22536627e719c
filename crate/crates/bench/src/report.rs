//! Report files.
//!
//! Per seed directory: `stages.csv`, `summary.txt` and one
//! `confusion_stage_XX.csv` per stage. The runner adds trace files
//! (`drift.csv`, `gate.csv`, `losses.csv`, `checksums.csv`) and an
//! `aggregate.txt` across seeds at the output root.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use dlc_core::metrics::MetricsReport;

use crate::config::ExperimentConfig;
use crate::error::BenchError;
use crate::runner::{SeedRun, StageTrace};

pub const STAGES_HEADER: &str =
    "stage,known_classes,accuracy,average_so_far,lora_params,extractor_params,buffer_count,memory_mb";

#[derive(Debug, Clone, PartialEq)]
pub struct RunInfo {
    pub method: String,
    pub dlc: bool,
    pub gate: bool,
    pub seed: u64,
}

impl RunInfo {
    pub fn new(cfg: &ExperimentConfig, seed: u64) -> Self {
        Self { method: cfg.train.method.to_string(), dlc: cfg.train.dlc, gate: cfg.train.gate_enabled(), seed }
    }
}

fn put(dir: &Path, name: &str, body: &str, out: &mut Vec<PathBuf>) -> Result<(), BenchError> {
    let path = dir.join(name);
    fs::write(&path, body).map_err(|e| BenchError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    out.push(path);
    Ok(())
}

pub fn stages_csv(report: &MetricsReport) -> String {
    let mut s = format!("{STAGES_HEADER}\n");
    for r in &report.stages {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.stage, r.known_classes, r.accuracy, r.average_so_far, r.lora_params, r.extractor_params, r.buffer_count, r.memory_mb
        )
        .expect("write to string");
    }
    s
}

/// One parsed `stages.csv` row.
#[derive(Debug, Clone, PartialEq)]
pub struct StageRow {
    pub stage: usize,
    pub known_classes: usize,
    pub accuracy: f64,
    pub average_so_far: f64,
    pub lora_params: usize,
    pub extractor_params: usize,
    pub buffer_count: usize,
    pub memory_mb: f64,
}

pub fn parse_stages_csv(text: &str) -> Result<Vec<StageRow>, BenchError> {
    let mut lines = text.lines();
    if lines.next() != Some(STAGES_HEADER) {
        return Err(BenchError::Data("stages.csv header mismatch".into()));
    }
    lines
        .enumerate()
        .map(|(n, line)| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = |e: &dyn std::fmt::Display| BenchError::Data(format!("stages.csv row {}: {e}", n + 1));
            if f.len() != 8 {
                return Err(bad(&"expected 8 fields"));
            }
            let u = |i: usize| f[i].parse::<usize>().map_err(|e| bad(&e));
            let x = |i: usize| f[i].parse::<f64>().map_err(|e| bad(&e));
            Ok(StageRow {
                stage: u(0)?,
                known_classes: u(1)?,
                accuracy: x(2)?,
                average_so_far: x(3)?,
                lora_params: u(4)?,
                extractor_params: u(5)?,
                buffer_count: u(6)?,
                memory_mb: x(7)?,
            })
        })
        .collect()
}

pub fn summary_text(report: &MetricsReport, info: &RunInfo) -> Result<String, BenchError> {
    let mut s = String::new();
    let w = &mut s;
    let p = &report.parameters;
    writeln!(w, "run").ok();
    writeln!(w, "  method = {}", info.method).ok();
    writeln!(w, "  dlc = {}", info.dlc).ok();
    writeln!(w, "  gate = {}", info.gate).ok();
    writeln!(w, "  seed = {}", info.seed).ok();
    writeln!(w, "  stages = {}", report.stages.len()).ok();
    writeln!(w, "accuracy").ok();
    writeln!(w, "  average = {}", report.average()?).ok();
    writeln!(w, "  last = {}", report.last()?).ok();
    writeln!(w, "parameters").ok();
    writeln!(w, "  lora_total = {}", p.lora_total).ok();
    writeln!(w, "  extractor_total = {}", p.extractor_total).ok();
    writeln!(w, "  heads_total = {}", p.heads_total).ok();
    writeln!(w, "  gate_total = {}", p.gate_total).ok();
    writeln!(w, "  model_total = {}", p.model_total()).ok();
    if let Some(m) = &report.memory {
        writeln!(w, "memory").ok();
        writeln!(w, "  param_count = {}", m.param_count).ok();
        writeln!(w, "  bytes_per_param = {}", m.bytes_per_param).ok();
        writeln!(w, "  exemplar_count = {}", m.exemplar_count).ok();
        writeln!(w, "  bytes_per_exemplar = {}", m.bytes_per_exemplar).ok();
        writeln!(w, "  total_mb = {}", m.total_mb).ok();
    }
    for r in &report.stages {
        writeln!(w, "stage_{:02}", r.stage).ok();
        writeln!(w, "  known_classes = {}", r.known_classes).ok();
        writeln!(w, "  accuracy = {}", r.accuracy).ok();
        writeln!(w, "  average_so_far = {}", r.average_so_far).ok();
        writeln!(w, "  lora_params = {}", r.lora_params).ok();
        writeln!(w, "  extractor_params = {}", r.extractor_params).ok();
        writeln!(w, "  buffer_count = {}", r.buffer_count).ok();
        writeln!(w, "  memory_mb = {}", r.memory_mb).ok();
    }
    Ok(s)
}

pub fn confusion_csv(m: &ndarray::Array2<u64>) -> String {
    let mut s = String::new();
    for row in m.rows() {
        let cells: Vec<String> = row.iter().map(u64::to_string).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

/// Writes `stages.csv`, `summary.txt` and the confusion grids into `dir`.
pub fn emit_report(report: &MetricsReport, info: &RunInfo, dir: &Path) -> Result<Vec<PathBuf>, BenchError> {
    fs::create_dir_all(dir)?;
    let mut out = Vec::new();
    put(dir, "stages.csv", &stages_csv(report), &mut out)?;
    put(dir, "summary.txt", &summary_text(report, info)?, &mut out)?;
    for r in &report.stages {
        put(dir, &format!("confusion_stage_{:02}.csv", r.stage), &confusion_csv(&r.confusion), &mut out)?;
    }
    Ok(out)
}

pub fn emit_trace(trace: &[StageTrace], dir: &Path) -> Result<Vec<PathBuf>, BenchError> {
    let mut drift = String::from("stage,phase,layer,probe_size,mean,max\n");
    let mut gate = String::from("stage,pre_mean,pos_mean\n");
    let mut losses = String::from("stage,phase,epoch,loss\n");
    let mut sums = String::from("stage,item,checksum\n");
    for t in trace {
        for (phase, reports) in [(1, &t.drift_phase1), (2, &t.drift_phase2)] {
            for d in reports {
                writeln!(drift, "{},{phase},{},{},{},{}", t.stage, d.layer, d.probe_size, d.mean, d.max).ok();
            }
        }
        if let Some((pre, pos)) = t.gate_means {
            writeln!(gate, "{},{pre},{pos}", t.stage).ok();
        }
        for (phase, l) in [(1, &t.phase1_losses), (2, &t.phase2_losses)] {
            for (e, v) in l.iter().enumerate() {
                writeln!(losses, "{},{phase},{},{v}", t.stage, e + 1).ok();
            }
        }
        writeln!(sums, "{},phi_phase1,{}", t.stage, t.phi_after_phase1).ok();
        if let Some(c) = t.phi_after_phase2 {
            writeln!(sums, "{},phi_phase2,{c}", t.stage).ok();
        }
        for (i, c) in t.plugins_at_end.iter().enumerate() {
            writeln!(sums, "{},plugins_task_{:02},{c}", t.stage, i + 1).ok();
        }
    }
    let mut out = Vec::new();
    put(dir, "drift.csv", &drift, &mut out)?;
    put(dir, "gate.csv", &gate, &mut out)?;
    put(dir, "losses.csv", &losses, &mut out)?;
    put(dir, "checksums.csv", &sums, &mut out)?;
    Ok(out)
}

/// Per-seed Ā and A_T with their means.
pub fn emit_aggregate(runs: &[SeedRun], dir: &Path) -> Result<PathBuf, BenchError> {
    let mut s = String::from("seeds\n");
    let (mut avg, mut last) = (Vec::new(), Vec::new());
    for r in runs {
        let (a, l) = (r.report.average()?, r.report.last()?);
        writeln!(s, "  seed_{} = average {a}, last {l}", r.seed).ok();
        avg.push(a);
        last.push(l);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    writeln!(s, "mean\n  average = {}\n  last = {}", mean(&avg), mean(&last)).ok();
    let path = dir.join("aggregate.txt");
    fs::write(&path, s)?;
    Ok(path)
}
