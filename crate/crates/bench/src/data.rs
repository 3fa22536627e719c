//! Dataset ingestion: cifar binary records, idx files and the synthetic generator.

use std::path::{Path, PathBuf};

use dlc_core::engine::ImageSet;
use dlc_core::rng;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{DatasetFormat, ExperimentConfig, SyntheticSpec};
use crate::error::BenchError;

fn data_err(msg: impl Into<String>) -> BenchError {
    BenchError::Data(msg.into())
}

fn read(path: &Path) -> Result<Vec<u8>, BenchError> {
    std::fs::read(path).map_err(|e| data_err(format!("{}: {e}", path.display())))
}

/// Train and test sets for the configured source, labels checked against the class count.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<(ImageSet, ImageSet), BenchError> {
    let (train, test) = match cfg.format {
        DatasetFormat::Synthetic => synth_dataset(&cfg.synthetic)?,
        DatasetFormat::CifarBinary => {
            let dir = cfg.path.as_deref().ok_or_else(|| data_err("cifar-binary needs dataset.path"))?;
            load_cifar_dir(dir, cfg.channels, cfg.image_side, cfg.label_bytes)?
        }
        DatasetFormat::Idx => {
            let dir = cfg.path.as_deref().ok_or_else(|| data_err("idx needs dataset.path"))?;
            load_idx_dir(dir)?
        }
    };
    for set in [&train, &test] {
        if set.channels != cfg.channels || set.side != cfg.image_side {
            return Err(data_err(format!(
                "dataset images are {}×{}×{}, config expects {}×{}×{}",
                set.channels, set.side, set.side, cfg.channels, cfg.image_side, cfg.image_side
            )));
        }
        if let Some(&l) = set.labels.iter().find(|&&l| l >= cfg.class_count) {
            return Err(data_err(format!("label {l} overflows class count {}", cfg.class_count)));
        }
    }
    Ok((train, test))
}

/// Parses concatenated records of `label_bytes` label bytes followed by a
/// channel-major `C·H·W` image. The last label byte is the class.
pub fn parse_cifar_records(bytes: &[u8], channels: usize, side: usize, label_bytes: usize) -> Result<ImageSet, BenchError> {
    let image = channels * side * side;
    let record = label_bytes + image;
    if bytes.len() % record != 0 {
        return Err(data_err(format!(
            "truncated cifar file: {} bytes is not a multiple of the {record}-byte record",
            bytes.len()
        )));
    }
    let n = bytes.len() / record;
    let mut pixels = Vec::with_capacity(n * image);
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(record) {
        labels.push(usize::from(rec[label_bytes - 1]));
        pixels.extend_from_slice(&rec[label_bytes..]);
    }
    ImageSet::new(channels, side, pixels, labels).map_err(|e| data_err(e.to_string()))
}

fn concat_sets(sets: Vec<ImageSet>) -> Result<ImageSet, BenchError> {
    let first = sets.first().ok_or_else(|| data_err("no cifar files found"))?;
    let (c, side) = (first.channels, first.side);
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for s in sets {
        pixels.extend(s.pixels);
        labels.extend(s.labels);
    }
    ImageSet::new(c, side, pixels, labels).map_err(|e| data_err(e.to_string()))
}

/// Reads `train.bin`/`test.bin` (CIFAR-100 naming) or
/// `data_batch_*.bin`/`test_batch.bin` (CIFAR-10 naming).
pub fn load_cifar_dir(dir: &Path, channels: usize, side: usize, label_bytes: usize) -> Result<(ImageSet, ImageSet), BenchError> {
    let parse = |p: &Path| parse_cifar_records(&read(p)?, channels, side, label_bytes);
    if dir.join("train.bin").exists() {
        return Ok((parse(&dir.join("train.bin"))?, parse(&dir.join("test.bin"))?));
    }
    let mut batches: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| data_err(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("data_batch_") && n.ends_with(".bin")))
        .collect();
    batches.sort();
    let train = concat_sets(batches.iter().map(|p| parse(p)).collect::<Result<_, _>>()?)?;
    Ok((train, parse(&dir.join("test_batch.bin"))?))
}

/// Big-endian idx: `0 0 0x08 ndim`, `ndim` u32 dims, raw bytes.
pub fn parse_idx(bytes: &[u8]) -> Result<(Vec<usize>, &[u8]), BenchError> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 || bytes[2] != 0x08 {
        return Err(data_err("idx magic mismatch (expected unsigned-byte data)"));
    }
    let ndim = usize::from(bytes[3]);
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(data_err("truncated idx header"));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let len: usize = dims.iter().product();
    if bytes.len() - header != len {
        return Err(data_err(format!("idx payload is {} bytes, dims {dims:?} need {len}", bytes.len() - header)));
    }
    Ok((dims, &bytes[header..]))
}

/// Pairs an idx image file (`N×H×W` or `N×C×H×W`) with an idx label file.
pub fn idx_image_set(images: &[u8], labels: &[u8]) -> Result<ImageSet, BenchError> {
    let (dims, pixels) = parse_idx(images)?;
    let (n, c, h, w) = match dims[..] {
        [n, h, w] => (n, 1, h, w),
        [n, c, h, w] => (n, c, h, w),
        _ => return Err(data_err(format!("idx images must have 3 or 4 dims, got {dims:?}"))),
    };
    if h != w {
        return Err(data_err(format!("idx images must be square, got {h}×{w}")));
    }
    let (ldims, lbytes) = parse_idx(labels)?;
    if ldims != [n] {
        return Err(data_err(format!("idx labels have dims {ldims:?}, expected [{n}]")));
    }
    ImageSet::new(c, h, pixels.to_vec(), lbytes.iter().map(|&b| usize::from(b)).collect())
        .map_err(|e| data_err(e.to_string()))
}

pub fn load_idx_dir(dir: &Path) -> Result<(ImageSet, ImageSet), BenchError> {
    let load = |img: &str, lab: &str| idx_image_set(&read(&dir.join(img))?, &read(&dir.join(lab))?);
    Ok((
        load("train-images-idx3-ubyte", "train-labels-idx1-ubyte")?,
        load("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")?,
    ))
}

const BLOBS_PER_CLASS: usize = 3;

/// Mean image of one class on the [0, 1] scale, channel-major.
fn class_pattern(spec: &SyntheticSpec, class: usize) -> Vec<f32> {
    let mut r = rng::stream(spec.seed, "synthetic-class", &[class as u64]);
    let side = spec.side as f32;
    let blobs: Vec<(f32, f32, f32, Vec<f32>)> = (0..BLOBS_PER_CLASS)
        .map(|_| {
            let cx = r.random_range(0.0..side);
            let cy = r.random_range(0.0..side);
            let sigma = r.random_range(side / 8.0..side / 3.0).max(0.5);
            let amp = (0..spec.channels).map(|_| r.random_range(-1.0f32..1.0)).collect();
            (cx, cy, sigma, amp)
        })
        .collect();
    let mut out = vec![0.5f32; spec.channels * spec.side * spec.side];
    for c in 0..spec.channels {
        for y in 0..spec.side {
            for x in 0..spec.side {
                let v: f32 = blobs
                    .iter()
                    .map(|(cx, cy, s, amp)| {
                        let d2 = (x as f32 - cx).powi(2) + (y as f32 - cy).powi(2);
                        amp[c] * (-d2 / (2.0 * s * s)).exp()
                    })
                    .sum();
                out[(c * spec.side + y) * spec.side + x] = (0.5 + 0.35 * v).clamp(0.0, 1.0);
            }
        }
    }
    out
}

fn render(spec: &SyntheticSpec, pattern: &[f32], r: &mut impl Rng, noise: &Normal<f32>, out: &mut Vec<u8>) {
    let j = spec.jitter as i64;
    let (dx, dy) = if j > 0 { (r.random_range(-j..=j), r.random_range(-j..=j)) } else { (0, 0) };
    let s = spec.side as i64;
    for c in 0..spec.channels {
        for y in 0..s {
            for x in 0..s {
                let sx = (x - dx).clamp(0, s - 1) as usize;
                let sy = (y - dy).clamp(0, s - 1) as usize;
                let m = pattern[(c * spec.side + sy) * spec.side + sx];
                let v = (m + noise.sample(r)).clamp(0.0, 1.0);
                out.push((v * 255.0).round() as u8);
            }
        }
    }
}

/// Gaussian-blob class patterns plus shared pixel noise. Samples are
/// interleaved by class. Byte-identical for equal specs.
pub fn synth_dataset(spec: &SyntheticSpec) -> Result<(ImageSet, ImageSet), BenchError> {
    if spec.class_count == 0 || spec.side == 0 || spec.channels == 0 {
        return Err(data_err("synthetic dimensions must be positive"));
    }
    let noise = Normal::new(0.0, spec.noise).map_err(|e| data_err(format!("synthetic noise: {e}")))?;
    let patterns: Vec<Vec<f32>> = (0..spec.class_count).map(|k| class_pattern(spec, k)).collect();
    let make = |tag: &str, per_class: usize| {
        let mut rngs: Vec<_> = (0..spec.class_count).map(|k| rng::stream(spec.seed, tag, &[k as u64])).collect();
        let mut pixels = Vec::with_capacity(per_class * spec.class_count * spec.channels * spec.side * spec.side);
        let mut labels = Vec::with_capacity(per_class * spec.class_count);
        for _ in 0..per_class {
            for (k, r) in rngs.iter_mut().enumerate() {
                render(spec, &patterns[k], r, &noise, &mut pixels);
                labels.push(k);
            }
        }
        ImageSet::new(spec.channels, spec.side, pixels, labels).map_err(|e| data_err(e.to_string()))
    };
    Ok((make("synthetic-train", spec.samples_per_class)?, make("synthetic-test", spec.test_per_class)?))
}
