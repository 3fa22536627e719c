//! Per-stage checkpoint directories.
//!
//! ```text
//! stage_XX/
//!   meta.txt               seed and task label ranges
//!   extractor.bin          φ weights and batch-norm buffers
//!   base_head.bin
//!   aggregate_head.bin     only with plugins
//!   gate.bin               only with the gate
//!   plugins/task_XX.bin    one file per frozen plugin set
//!   buffer.txt             exemplar manifest
//!   teacher_extractor.bin
//!   teacher_head.bin
//!   eval.csv               test index, label, prediction
//! ```

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use dlc_core::convlora::PluginSet;
use dlc_core::engine::{DlcState, ExemplarBuffer, Teacher};
use dlc_core::gating::WeightingUnit;
use dlc_core::nn::backbone::FeatureExtractor;
use dlc_core::nn::head::{ClassifierHead, HeadRole};
use dlc_core::serialize::ArrayFile;

use crate::config::ExperimentConfig;
use crate::error::BenchError;

/// Test-set predictions of one stage.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct StagePredictions {
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
    pub predictions: Vec<usize>,
}

impl StagePredictions {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("index,label,prediction\n");
        for ((i, l), p) in self.indices.iter().zip(&self.labels).zip(&self.predictions) {
            s.push_str(&format!("{i},{l},{p}\n"));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self, BenchError> {
        let mut lines = text.lines();
        if lines.next() != Some("index,label,prediction") {
            return Err(BenchError::Data("eval.csv lacks its header row".into()));
        }
        let mut out = Self::default();
        for (n, line) in lines.enumerate() {
            let v: Vec<usize> = line
                .split(',')
                .map(str::parse)
                .collect::<Result<_, _>>()
                .map_err(|e| BenchError::Data(format!("eval.csv row {}: {e}", n + 1)))?;
            let [i, l, p] = v[..] else {
                return Err(BenchError::Data(format!("eval.csv row {} needs 3 fields", n + 1)));
            };
            out.indices.push(i);
            out.labels.push(l);
            out.predictions.push(p);
        }
        Ok(out)
    }
}

pub fn stage_dir(root: &Path, stage: usize) -> PathBuf {
    root.join(format!("stage_{stage:02}"))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), BenchError> {
    fs::write(path, bytes).map_err(|e| BenchError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

pub fn save_stage(dir: &Path, seed: u64, state: &DlcState, preds: &StagePredictions) -> Result<(), BenchError> {
    fs::create_dir_all(dir.join("plugins"))?;
    let ranges: Vec<String> = state.task_ranges().iter().map(|r| format!("{}..{}", r.start, r.end)).collect();
    write(&dir.join("meta.txt"), format!("seed = {seed}\ntasks = {}\n", ranges.join(",")))?;
    write(&dir.join("extractor.bin"), state.phi().to_array_file().to_bytes())?;
    write(&dir.join("base_head.bin"), state.base_head().to_array_file().to_bytes())?;
    if let Some(h) = state.aggregate_head() {
        write(&dir.join("aggregate_head.bin"), h.to_array_file().to_bytes())?;
    }
    if let Some(g) = state.gate() {
        write(&dir.join("gate.bin"), g.to_bytes())?;
    }
    for p in state.plugins() {
        write(&dir.join("plugins").join(format!("task_{:02}.bin", p.task_id)), p.to_bytes())?;
    }
    write(&dir.join("buffer.txt"), state.buffer().manifest())?;
    if let Some(t) = state.teacher() {
        write(&dir.join("teacher_extractor.bin"), t.phi().to_array_file().to_bytes())?;
        write(&dir.join("teacher_head.bin"), t.head().to_array_file().to_bytes())?;
    }
    write(&dir.join("eval.csv"), preds.to_csv())
}

fn read(path: &Path) -> Result<Vec<u8>, BenchError> {
    fs::read(path).map_err(|e| BenchError::Data(format!("{}: {e}", path.display())))
}

fn arrays(path: &Path) -> Result<ArrayFile, BenchError> {
    Ok(ArrayFile::from_bytes(&read(path)?)?)
}

fn parse_meta(text: &str) -> Result<(u64, Vec<Range<usize>>), BenchError> {
    let bad = || BenchError::Data("malformed checkpoint meta.txt".into());
    let mut seed = None;
    let mut tasks = None;
    for line in text.lines() {
        let (k, v) = line.split_once('=').ok_or_else(bad)?;
        match k.trim() {
            "seed" => seed = Some(v.trim().parse().map_err(|_| bad())?),
            "tasks" => {
                let ranges = v
                    .trim()
                    .split(',')
                    .map(|r| {
                        let (a, b) = r.split_once("..")?;
                        Some(a.parse().ok()?..b.parse().ok()?)
                    })
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(bad)?;
                tasks = Some(ranges);
            }
            _ => return Err(bad()),
        }
    }
    Ok((seed.ok_or_else(bad)?, tasks.ok_or_else(bad)?))
}

/// Restores a learner from a stage directory written by [`save_stage`].
pub fn load_stage(dir: &Path, cfg: &ExperimentConfig) -> Result<(DlcState, StagePredictions), BenchError> {
    let (seed, ranges) = parse_meta(&String::from_utf8_lossy(&read(&dir.join("meta.txt"))?))?;
    let spec = cfg.backbone();
    let phi = FeatureExtractor::from_array_file(&spec, &arrays(&dir.join("extractor.bin"))?)?;
    let base = ClassifierHead::from_array_file(&arrays(&dir.join("base_head.bin"))?, HeadRole::Base)?;
    let opt = |name: &str| dir.join(name).exists().then(|| dir.join(name));
    let aggregate = opt("aggregate_head.bin")
        .map(|p| Ok::<_, BenchError>(ClassifierHead::from_array_file(&arrays(&p)?, HeadRole::Aggregate)?))
        .transpose()?;
    let gate = opt("gate.bin").map(|p| Ok::<_, BenchError>(WeightingUnit::from_bytes(&read(&p)?)?)).transpose()?;
    let mut plugins = Vec::new();
    for t in 1..=ranges.len() {
        let p = dir.join("plugins").join(format!("task_{t:02}.bin"));
        if p.exists() {
            plugins.push(PluginSet::from_bytes(&read(&p)?)?);
        }
    }
    let buffer = ExemplarBuffer::from_manifest(&String::from_utf8_lossy(&read(&dir.join("buffer.txt"))?))?;
    let teacher = match opt("teacher_extractor.bin") {
        Some(p) => Some(Teacher::new(
            FeatureExtractor::from_array_file(&spec, &arrays(&p)?)?,
            ClassifierHead::from_array_file(&arrays(&dir.join("teacher_head.bin"))?, HeadRole::Base)?,
        )),
        None => None,
    };
    let preds = StagePredictions::from_csv(&String::from_utf8_lossy(&read(&dir.join("eval.csv"))?))?;
    let state = DlcState::restore(cfg.train_config(seed), phi, base, aggregate, gate, plugins, teacher, ranges, buffer);
    Ok((state, preds))
}
