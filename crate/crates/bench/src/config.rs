//! Experiment configuration: `key = value` lines, `#` comments, dotted keys.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use dlc_core::engine::stream::validate_split;
use dlc_core::engine::config::phase2_epochs_for;
use dlc_core::engine::TrainConfig;
use dlc_core::nn::backbone::BackboneSpec;

use crate::error::BenchError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    CifarBinary,
    Idx,
    Synthetic,
}

impl DatasetFormat {
    fn as_str(self) -> &'static str {
        match self {
            Self::CifarBinary => "cifar-binary",
            Self::Idx => "idx",
            Self::Synthetic => "synthetic",
        }
    }
}

impl std::str::FromStr for DatasetFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "cifar-binary" => Ok(Self::CifarBinary),
            "idx" => Ok(Self::Idx),
            "synthetic" => Ok(Self::Synthetic),
            _ => Err(format!("unknown dataset format '{s}' (cifar-binary, idx, synthetic)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub class_count: usize,
    pub samples_per_class: usize,
    pub test_per_class: usize,
    pub side: usize,
    pub channels: usize,
    /// Per-pixel noise standard deviation on the [0, 1] intensity scale.
    pub noise: f32,
    /// Max per-sample shift of the blob pattern, in pixels.
    pub jitter: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub format: DatasetFormat,
    pub path: Option<PathBuf>,
    pub image_side: usize,
    pub channels: usize,
    /// Label bytes per cifar record; the last one is the class.
    pub label_bytes: usize,
    pub synthetic: SyntheticSpec,
    pub class_count: usize,
    pub base_m: usize,
    pub inc_n: usize,
    pub order_seed: u64,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub train: TrainConfig,
    pub backbone_channels: Vec<usize>,
    pub backbone_strides: Vec<usize>,
    pub backbone_kernel: usize,
    pub bytes_per_param: u64,
    /// `None` means raw image bytes, `H·W·C`.
    pub bytes_per_exemplar: Option<u64>,
    pub probe_size: usize,
}

const KEYS: &[&str] = &[
    "dataset.format",
    "dataset.path",
    "dataset.image_side",
    "dataset.channels",
    "dataset.label_bytes",
    "synthetic.samples_per_class",
    "synthetic.test_per_class",
    "synthetic.noise",
    "synthetic.jitter",
    "synthetic.seed",
    "protocol.class_count",
    "protocol.base_m",
    "protocol.inc_n",
    "protocol.order_seed",
    "protocol.seeds",
    "run.method",
    "run.dlc",
    "run.gate",
    "run.output_dir",
    "train.epochs",
    "train.lr",
    "train.momentum",
    "train.weight_decay",
    "train.batch_size",
    "train.milestones",
    "train.lr_gamma",
    "phase2.epochs",
    "phase2.lr",
    "kd.variant",
    "kd.tau",
    "loss.lambda_ce",
    "loss.lambda_mem",
    "loss.lambda_aux",
    "loss.lambda_ia",
    "buffer.capacity",
    "lora.rank",
    "lora.alpha",
    "lora.plugins",
    "backbone.channels",
    "backbone.strides",
    "backbone.kernel",
    "memory.bytes_per_param",
    "memory.bytes_per_exemplar",
    "eval.probe_size",
];

fn cfg_err(msg: impl Into<String>) -> BenchError {
    BenchError::Config(msg.into())
}

/// Splits the text into a key map. Later duplicates are an error.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>, BenchError> {
    let mut map = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| cfg_err(format!("line {}: expected 'key = value'", n + 1)))?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if !KEYS.contains(&k.as_str()) {
            return Err(cfg_err(format!("line {}: unknown key '{k}'", n + 1)));
        }
        if map.insert(k.clone(), v).is_some() {
            return Err(cfg_err(format!("line {}: duplicate key '{k}'", n + 1)));
        }
    }
    Ok(map)
}

struct Fields(BTreeMap<String, String>);

impl Fields {
    fn get<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T, BenchError>
    where
        T::Err: std::fmt::Display,
    {
        match self.0.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|e| cfg_err(format!("{key} = '{v}': {e}"))),
        }
    }

    fn required<T: std::str::FromStr>(&self, key: &str) -> Result<T, BenchError>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.0.get(key).ok_or_else(|| cfg_err(format!("missing required key '{key}'")))?;
        v.parse().map_err(|e| cfg_err(format!("{key} = '{v}': {e}")))
    }

    fn list<T: std::str::FromStr>(&self, key: &str, default: Vec<T>) -> Result<Vec<T>, BenchError>
    where
        T::Err: std::fmt::Display,
    {
        match self.0.get(key) {
            None => Ok(default),
            Some(v) if v.is_empty() => Ok(Vec::new()),
            Some(v) => v
                .split(',')
                .map(|x| x.trim().parse().map_err(|e| cfg_err(format!("{key} item '{}': {e}", x.trim()))))
                .collect(),
        }
    }

    /// `auto` or absent gives `None`.
    fn auto<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, BenchError>
    where
        T::Err: std::fmt::Display,
    {
        match self.0.get(key).map(String::as_str) {
            None | Some("auto") => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|e| cfg_err(format!("{key} = '{v}': {e}"))),
        }
    }
}

/// Parses and validates a configuration, filling in every default.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, BenchError> {
    let f = Fields(parse_pairs(text)?);
    let d = TrainConfig::default();
    let format: DatasetFormat = f.required("dataset.format")?;
    let class_count: usize = f.required("protocol.class_count")?;
    let image_side = f.get("dataset.image_side", if format == DatasetFormat::Synthetic { 8 } else { 32 })?;
    let channels = f.get("dataset.channels", 3)?;
    let epochs = f.get("train.epochs", d.epochs)?;
    let train = TrainConfig {
        method: f.get("run.method", d.method)?,
        dlc: f.get("run.dlc", d.dlc)?,
        gate: f.get("run.gate", d.gate)?,
        seed: 0,
        epochs,
        lr: f.get("train.lr", d.lr)?,
        momentum: f.get("train.momentum", d.momentum)?,
        weight_decay: f.get("train.weight_decay", d.weight_decay)?,
        batch_size: f.get("train.batch_size", d.batch_size)?,
        milestones: f.list("train.milestones", d.milestones.clone())?,
        lr_gamma: f.get("train.lr_gamma", d.lr_gamma)?,
        phase2_epochs: f.auto("phase2.epochs")?.unwrap_or_else(|| phase2_epochs_for(epochs)),
        phase2_lr: f.get("phase2.lr", d.phase2_lr)?,
        kd: f.get("kd.variant", d.kd)?,
        tau: f.get("kd.tau", d.tau)?,
        lambda_ce: f.get("loss.lambda_ce", d.lambda_ce)?,
        lambda_mem: f.get("loss.lambda_mem", d.lambda_mem)?,
        lambda_aux: f.get("loss.lambda_aux", d.lambda_aux)?,
        lambda_ia: f.get("loss.lambda_ia", d.lambda_ia)?,
        buffer_capacity: f.get("buffer.capacity", d.buffer_capacity)?,
        rank: f.auto("lora.rank")?,
        alpha: f.auto("lora.alpha")?,
        k_plugins: f.get("lora.plugins", d.k_plugins)?,
    };
    let cfg = ExperimentConfig {
        format,
        path: f.0.get("dataset.path").map(PathBuf::from),
        image_side,
        channels,
        label_bytes: f.get("dataset.label_bytes", 1)?,
        synthetic: SyntheticSpec {
            class_count,
            samples_per_class: f.get("synthetic.samples_per_class", 100)?,
            test_per_class: f.get("synthetic.test_per_class", 50)?,
            side: image_side,
            channels,
            noise: f.get("synthetic.noise", 0.1)?,
            jitter: f.get("synthetic.jitter", 0)?,
            seed: f.get("synthetic.seed", 0)?,
        },
        class_count,
        base_m: f.required("protocol.base_m")?,
        inc_n: f.required("protocol.inc_n")?,
        order_seed: f.get("protocol.order_seed", 1993)?,
        seeds: f.list("protocol.seeds", vec![1])?,
        output_dir: PathBuf::from(f.get("run.output_dir", "runs/out".to_string())?),
        train,
        backbone_channels: f.list("backbone.channels", vec![16, 32, 64, 64])?,
        backbone_strides: f.list("backbone.strides", vec![1, 1, 2, 1])?,
        backbone_kernel: f.get("backbone.kernel", 3)?,
        bytes_per_param: f.get("memory.bytes_per_param", 4)?,
        bytes_per_exemplar: f.auto("memory.bytes_per_exemplar")?,
        probe_size: f.get("eval.probe_size", 256)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        validate_split(self.class_count, self.base_m, self.inc_n).map_err(|e| cfg_err(e.to_string()))?;
        self.train.validate().map_err(|e| cfg_err(e.to_string()))?;
        if self.format != DatasetFormat::Synthetic && self.path.is_none() {
            return Err(cfg_err(format!("dataset.format = {} needs dataset.path", self.format.as_str())));
        }
        if self.seeds.is_empty() {
            return Err(cfg_err("protocol.seeds must list at least one seed"));
        }
        if self.image_side == 0 || self.channels == 0 {
            return Err(cfg_err("image side and channel count must be positive"));
        }
        if !(1..=2).contains(&self.label_bytes) {
            return Err(cfg_err("dataset.label_bytes must be 1 or 2"));
        }
        if self.format == DatasetFormat::Synthetic {
            let s = &self.synthetic;
            if s.samples_per_class == 0 || s.test_per_class == 0 {
                return Err(cfg_err("synthetic sample counts must be positive"));
            }
            if !(s.noise >= 0.0 && s.noise.is_finite()) {
                return Err(cfg_err("synthetic.noise must be finite and non-negative"));
            }
        }
        if self.backbone_channels.len() != self.backbone_strides.len() {
            return Err(cfg_err(format!(
                "backbone.channels has {} entries but backbone.strides has {}",
                self.backbone_channels.len(),
                self.backbone_strides.len()
            )));
        }
        if self.probe_size == 0 {
            return Err(cfg_err("eval.probe_size must be positive"));
        }
        self.backbone().validate().map_err(|e| cfg_err(e.to_string()))
    }

    pub fn backbone(&self) -> BackboneSpec {
        BackboneSpec::from_channels(
            self.channels,
            self.image_side,
            &self.backbone_channels,
            &self.backbone_strides,
            self.backbone_kernel,
        )
    }

    pub fn exemplar_bytes(&self) -> u64 {
        self.bytes_per_exemplar.unwrap_or((self.image_side * self.image_side * self.channels) as u64)
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig { seed, ..self.train.clone() }
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        fn list<T: ToString>(v: &[T]) -> String {
            v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
        }
        fn opt<T: ToString>(v: &Option<T>) -> String {
            v.as_ref().map_or("auto".to_string(), T::to_string)
        }
        let t = &self.train;
        let s = &self.synthetic;
        let mut o = String::new();
        let mut kv = |k: &str, v: String| writeln!(o, "{k} = {v}").expect("write to string");
        kv("dataset.format", self.format.as_str().into());
        if let Some(p) = &self.path {
            kv("dataset.path", p.display().to_string());
        }
        kv("dataset.image_side", self.image_side.to_string());
        kv("dataset.channels", self.channels.to_string());
        kv("dataset.label_bytes", self.label_bytes.to_string());
        kv("synthetic.samples_per_class", s.samples_per_class.to_string());
        kv("synthetic.test_per_class", s.test_per_class.to_string());
        kv("synthetic.noise", s.noise.to_string());
        kv("synthetic.jitter", s.jitter.to_string());
        kv("synthetic.seed", s.seed.to_string());
        kv("protocol.class_count", self.class_count.to_string());
        kv("protocol.base_m", self.base_m.to_string());
        kv("protocol.inc_n", self.inc_n.to_string());
        kv("protocol.order_seed", self.order_seed.to_string());
        kv("protocol.seeds", list(&self.seeds));
        kv("run.method", t.method.to_string());
        kv("run.dlc", t.dlc.to_string());
        kv("run.gate", t.gate.to_string());
        kv("run.output_dir", self.output_dir.display().to_string());
        kv("train.epochs", t.epochs.to_string());
        kv("train.lr", t.lr.to_string());
        kv("train.momentum", t.momentum.to_string());
        kv("train.weight_decay", t.weight_decay.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.milestones", list(&t.milestones));
        kv("train.lr_gamma", t.lr_gamma.to_string());
        kv("phase2.epochs", t.phase2_epochs.to_string());
        kv("phase2.lr", t.phase2_lr.to_string());
        kv("kd.variant", t.kd.to_string());
        kv("kd.tau", t.tau.to_string());
        kv("loss.lambda_ce", t.lambda_ce.to_string());
        kv("loss.lambda_mem", t.lambda_mem.to_string());
        kv("loss.lambda_aux", t.lambda_aux.to_string());
        kv("loss.lambda_ia", t.lambda_ia.to_string());
        kv("buffer.capacity", t.buffer_capacity.to_string());
        kv("lora.rank", opt(&t.rank));
        kv("lora.alpha", opt(&t.alpha));
        kv("lora.plugins", t.k_plugins.to_string());
        kv("backbone.channels", list(&self.backbone_channels));
        kv("backbone.strides", list(&self.backbone_strides));
        kv("backbone.kernel", self.backbone_kernel.to_string());
        kv("memory.bytes_per_param", self.bytes_per_param.to_string());
        kv("memory.bytes_per_exemplar", opt(&self.bytes_per_exemplar));
        kv("eval.probe_size", self.probe_size.to_string());
        o
    }
}

/// Parses `text` with `key=value` overrides applied on top.
pub fn parse_with_overrides(text: &str, overrides: &[String]) -> Result<ExperimentConfig, BenchError> {
    let mut map = parse_pairs(text)?;
    for o in overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| cfg_err(format!("override '{o}' is not key=value")))?;
        let k = k.trim();
        if !KEYS.contains(&k) {
            return Err(cfg_err(format!("unknown key '{k}'")));
        }
        map.insert(k.to_string(), v.trim().to_string());
    }
    let merged: String = map.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
    parse_config(&merged)
}

impl std::fmt::Display for DatasetFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}
