//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any of them failed.
//!
//! `cargo test -p dlc-bench --test acceptance`

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use dlc_bench::config::ExperimentConfig;
use dlc_bench::data::load_dataset;
use dlc_bench::{parse_with_overrides, run_experiment, run_seed, SeedRun};
use dlc_core::convlora::{adapted_forward, ConvLoraAdapter};
use dlc_core::engine::{herding_select, loss_ce, loss_kd_ce, loss_kd_kl, split_stream, ImageSet};
use dlc_core::gating::{loss_ia, WeightingUnit};
use dlc_core::nn::ops::conv2d;
use ndarray::{array, Array1, Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn desk(overrides: &[&str]) -> ExperimentConfig {
    let text = std::fs::read_to_string(workspace_root().join("configs/desk.cfg")).expect("configs/desk.cfg");
    let sets: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    parse_with_overrides(&text, &sets).expect("desk config")
}

fn c1_parameter_ledger() -> Outcome {
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_dlc-bench")).arg("count-params").output().map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    if !out.status.success() {
        return Err(format!("count-params exited with {}", out.status));
    }
    let text = String::from_utf8_lossy(&out.stdout);
    let got: Vec<(usize, u64)> = text
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[4].parse().unwrap_or(0), f[9].parse().unwrap_or(0))
        })
        .collect();
    let want = vec![(20, 102_400), (10, 51_200), (6, 30_720), (5, 409_600), (6, 491_520)];
    check(got == want && elapsed < Duration::from_secs(1), format!("rows {got:?}, {:.3}s", elapsed.as_secs_f64()))
}

fn uniform4(rng: &mut ChaCha8Rng, dim: (usize, usize, usize, usize)) -> Array4<f32> {
    Array4::from_shape_simple_fn(dim, || rng.random_range(-1.0f32..=1.0))
}

/// Direct-loop zero-padded convolution, accumulated in f64.
fn naive_conv(x: &Array4<f32>, w: &Array4<f64>, stride: usize, pad: usize) -> Array4<f64> {
    let (n, ci, h, wd) = x.dim();
    let (co, _, k, _) = w.dim();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    Array4::from_shape_fn((n, co, oh, ow), |(b, o, y, xx)| {
        let mut s = 0.0f64;
        for c in 0..ci {
            for ky in 0..k {
                for kx in 0..k {
                    let iy = (y * stride + ky) as isize - pad as isize;
                    let ix = (xx * stride + kx) as isize - pad as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                        s += f64::from(x[[b, c, iy as usize, ix as usize]]) * w[[o, c, ky, kx]];
                    }
                }
            }
        }
        s
    })
}

fn max_abs(a: &Array4<f32>, b: &Array4<f32>) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

fn c2_convlora_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut worst_merged, mut worst_zero) = (0.0f32, 0.0f32);
    let cases = 120;
    for case in 0..cases {
        let ci = rng.random_range(1..=6);
        let co = rng.random_range(1..=6);
        let k = [1, 3, 5][rng.random_range(0..3)];
        let rank = rng.random_range(1..=4);
        let side = rng.random_range(k..=9);
        let n = rng.random_range(1..=2);
        let mut a = ConvLoraAdapter::init(ci, co, k, rank, rank as f32, case).map_err(|e| e.to_string())?;
        let x = uniform4(&mut rng, (n, ci, side, side));
        let w = uniform4(&mut rng, (co, ci, k, k));
        let (stride, pad) = (a.stride, a.padding);

        let zero = adapted_forward(w.view(), stride, pad, &a, x.view()).map_err(|e| e.to_string())?;
        worst_zero = worst_zero.max(max_abs(&zero, &conv2d(x.view(), w.view(), stride, pad)));

        a.a = uniform4(&mut rng, (rank, ci, k, k));
        a.b = uniform4(&mut rng, (co, rank, 1, 1));
        let merged = Array4::from_shape_fn((co, ci, k, k), |(o, i, y, xx)| {
            (0..rank).map(|p| f64::from(a.b[[o, p, 0, 0]]) * f64::from(a.a[[p, i, y, xx]])).sum::<f64>()
        });
        let oracle = (naive_conv(&x, &merged, stride, pad) * f64::from(a.scale())).mapv(|v| v as f32);
        worst_merged = worst_merged.max(max_abs(&a.forward(x.view()).map_err(|e| e.to_string())?, &oracle));
    }
    let elapsed = start.elapsed();
    check(
        worst_merged <= 1e-5 && worst_zero <= 1e-7 && elapsed < Duration::from_secs(30),
        format!("{cases} cases, merged max-abs {worst_merged:.2e}, zero-init max-abs {worst_zero:.2e}, {:.2}s", elapsed.as_secs_f64()),
    )
}

/// Runs of one arm of the desk matrix, each seed timed separately.
struct Arm {
    runs: Vec<SeedRun>,
    times: Vec<Duration>,
}

fn run_arm(cfg: &ExperimentConfig, train: &ImageSet, test: &ImageSet) -> Result<Arm, String> {
    let mut arm = Arm { runs: Vec::new(), times: Vec::new() };
    for &seed in &cfg.seeds {
        let start = Instant::now();
        arm.runs.push(run_seed(cfg, seed, train, test, None).map_err(|e| e.to_string())?);
        arm.times.push(start.elapsed());
    }
    Ok(arm)
}

struct Matrix {
    base: Arm,
    gated: Arm,
    ungated: Arm,
}

fn c3_non_interference(m: &Matrix) -> Outcome {
    let mut compared = 0;
    for (d, b) in m.gated.runs.iter().zip(&m.base.runs).chain(m.ungated.runs.iter().zip(&m.base.runs)) {
        for (td, tb) in d.trace.iter().zip(&b.trace) {
            if td.phi_after_phase1 != tb.phi_after_phase1 {
                return Err(format!("seed {} stage {}: {} vs {}", d.seed, td.stage, td.phi_after_phase1, tb.phi_after_phase1));
            }
            compared += 1;
        }
    }
    check(compared == 30, format!("{compared} (seed, stage, arm) phase-1 checksums equal"))
}

fn c4_freeze_discipline(m: &Matrix) -> Outcome {
    let mut frozen_checks = 0;
    for run in m.gated.runs.iter().chain(&m.ungated.runs) {
        let mut previous: Vec<_> = Vec::new();
        for t in &run.trace {
            let tag = format!("seed {} stage {}", run.seed, t.stage);
            if t.plugins_before_phase2 != previous || t.plugins_at_end[..previous.len()] != previous[..] {
                return Err(format!("{tag}: a frozen plugin set changed"));
            }
            frozen_checks += previous.len();
            if t.phi_after_phase2 != Some(t.phi_after_phase1) {
                return Err(format!("{tag}: φ moved during phase 2"));
            }
            if t.drift_phase2.is_empty() || t.drift_phase2.iter().any(|d| d.max != 0.0) {
                return Err(format!("{tag}: phase-2 drift {:?}", t.drift_phase2.iter().map(|d| d.max).collect::<Vec<_>>()));
            }
            previous = t.plugins_at_end.clone();
        }
        if previous.len() != run.trace.len() {
            return Err(format!("seed {}: {} plugin sets after {} stages", run.seed, previous.len(), run.trace.len()));
        }
    }
    check(true, format!("{frozen_checks} frozen-set checks, φ fixed and drift 0 in every phase 2"))
}

/// Greedy herding recomputed from scratch: every candidate's subset mean is
/// summed anew from the original rows.
fn oracle_herding(rows: &[Vec<f32>], quota: usize) -> Vec<usize> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    let mean = |set: &[usize]| -> Vec<f64> {
        (0..d).map(|j| set.iter().map(|&i| f64::from(rows[i][j])).sum::<f64>() / set.len() as f64).collect()
    };
    let all: Vec<usize> = (0..n).collect();
    let mu = mean(&all);
    let mut chosen: Vec<usize> = Vec::new();
    while chosen.len() < quota.min(n) {
        let best = (0..n)
            .filter(|i| !chosen.contains(i))
            .map(|i| {
                let mut s = chosen.clone();
                s.push(i);
                let m = mean(&s);
                (i, mu.iter().zip(&m).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            })
            .fold(None::<(usize, f64)>, |acc, (i, v)| match acc {
                Some((_, b)) if b <= v => acc,
                _ => Some((i, v)),
            });
        chosen.push(best.expect("candidate").0);
    }
    chosen
}

fn c5_herding_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut instances = 0;
    for n in 1..=8usize {
        for d in 1..=4usize {
            for rep in 0..25 {
                let rows: Vec<Vec<f32>> = if rep == 0 {
                    // duplicated rows exercise the lowest-index tie rule
                    (0..n).map(|i| vec![(i / 2) as f32; d]).collect()
                } else {
                    (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect()).collect()
                };
                let m = Array2::from_shape_fn((n, d), |(i, j)| rows[i][j]);
                for quota in 0..=n {
                    let got = herding_select(m.view(), quota);
                    let want = oracle_herding(&rows, quota);
                    if got != want {
                        return Err(format!("n={n} d={d} quota={quota}: {got:?} vs {want:?}"));
                    }
                    instances += 1;
                }
            }
        }
    }
    check(true, format!("{instances} instances match"))
}

fn c6_loss_values() -> Outcome {
    let e = |r: dlc_core::Result<dlc_core::engine::LossOutput>| r.map(|o| o.value).map_err(|e| e.to_string());
    let x = array![[0.3f32, -1.2, 2.0], [1.0, 1.0, -4.0]];
    let mut self_kl = Vec::new();
    for tau in [1.0, 2.0, 4.0] {
        self_kl.push(e(loss_kd_kl(x.view(), x.view(), tau))?);
    }
    let teacher = array![[0.0f32, 0.0]];
    let student = array![[0.0f32, 3f32.ln()]];
    let kl = e(loss_kd_kl(student.view(), teacher.view(), 1.0))?;
    let kd_ce = e(loss_kd_ce(student.view(), teacher.view()))?;
    let ce = e(loss_ce(array![[1.0f32, 0.0]].view(), &[0]))?;
    let ia = loss_ia(Array1::from_elem(4, 0.5f32).view(), Array1::ones(4).view()).map_err(|e| e.to_string())?;
    let close = |v: f32, w: f32| (v - w).abs() <= 1e-3;
    check(
        self_kl.iter().all(|&v| v.abs() <= 1e-6)
            && close(kl, 0.1438)
            && close(kd_ce, 0.8370)
            && close(ce, 0.3133)
            && close(ia, 0.25),
        format!("self-KL {self_kl:?}, KL {kl:.4}, KD-CE {kd_ce:.4}, CE {ce:.4}, IA {ia:.4}"),
    )
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn last_accs(arm: &Arm) -> Vec<f64> {
    arm.runs.iter().map(|r| r.report.last().expect("stages")).collect()
}

fn c7_desk_improvement(m: &Matrix) -> Outcome {
    let (base, gated, ungated) = (last_accs(&m.base), last_accs(&m.gated), last_accs(&m.ungated));
    let slowest = [&m.base, &m.gated, &m.ungated]
        .iter()
        .flat_map(|a| a.times.iter())
        .max()
        .copied()
        .unwrap_or_default();
    let gain = mean(&gated) - mean(&base);
    let ablation = mean(&gated) - mean(&ungated);
    let improves = gain > 0.0;
    let gate_helps = ablation >= 0.0;
    let fast = slowest < Duration::from_secs(300);
    check(
        improves && gate_helps && fast,
        format!(
            "A_T base {:.2} {base:?}, DLC {:.2} {gated:?} (gain {gain:+.2}: {}), DLC w/o gate {:.2} {ungated:?} (gate {ablation:+.2}: {}), slowest seed {:.1}s",
            mean(&base),
            mean(&gated),
            if improves { "ok" } else { "not met" },
            mean(&ungated),
            if gate_helps { "ok" } else { "not met" },
            slowest.as_secs_f64()
        ),
    )
}

fn c8_gate_properties(m: &Matrix) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (d, blocks) = (16, 5);
    let gate = WeightingUnit::new(d, 3).and_then(|g| g.grow(d * blocks, 4)).map_err(|e| e.to_string())?;
    let scales = [1.0f32, 10.0, 1e4];
    let x = Array2::from_shape_fn((1000, d * blocks), |(i, _)| rng.random_range(-1.0f32..1.0) * scales[i % 3]);
    let omega = gate.forward(&x).map_err(|e| e.to_string())?;
    let (lo, hi) = omega.iter().fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    if !(lo > 0.0 && hi < 1.0) {
        return Err(format!("gate outputs span [{lo}, {hi}]"));
    }

    let mut per_seed = Vec::new();
    for run in &m.gated.runs {
        let means: Vec<(f64, f64)> = run.trace.iter().filter_map(|t| t.gate_means).collect();
        if means.is_empty() {
            return Err(format!("seed {}: no gate measurements", run.seed));
        }
        let pre = mean(&means.iter().map(|p| p.0).collect::<Vec<_>>());
        let pos = mean(&means.iter().map(|p| p.1).collect::<Vec<_>>());
        let stages_ok = means.iter().filter(|(a, b)| a < b).count();
        per_seed.push((run.seed, pre, pos, stages_ok, means.len()));
    }
    let ok = per_seed.iter().all(|&(_, pre, pos, _, _)| pre < pos);
    let detail = per_seed
        .iter()
        .map(|(s, pre, pos, k, n)| format!("seed {s} pre {pre:.3} < pos {pos:.3} ({k}/{n} stages)"))
        .collect::<Vec<_>>()
        .join("; ");
    check(ok, format!("1000 outputs in [{lo:.3e}, {hi:.8}]; {detail}"))
}

fn c9_protocol_arithmetic() -> Outcome {
    let mut got = Vec::new();
    for (cc, m, n) in [(100, 10, 10), (100, 50, 10), (100, 5, 5), (200, 40, 40)] {
        let labels: Vec<usize> = (0..cc).collect();
        let set = ImageSet::new(1, 1, vec![0; cc], labels).map_err(|e| e.to_string())?;
        let (stream, train, _) = split_stream(cc, m, n, &set, &set, 1993).map_err(|e| e.to_string())?;
        let mut seen = BTreeSet::new();
        let mut total = 0;
        for (t, task) in stream.tasks.iter().enumerate() {
            let expected = if t == 0 { m } else { n };
            if task.classes.len() != expected || task.train.iter().any(|&i| !task.labels.contains(&train.labels[i])) {
                return Err(format!("B{m} Inc{n}: task {} malformed", task.task_id));
            }
            total += task.classes.len();
            seen.extend(task.classes.iter().copied());
        }
        if total != cc || seen != (0..cc).collect() {
            return Err(format!("B{m} Inc{n}: coverage {} of {cc}, {} assignments", seen.len(), total));
        }
        got.push(stream.tasks.len());
    }
    check(got == [10, 6, 20, 5], format!("tasks {got:?}, classes disjoint and exhaustive"))
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).expect("readable output") {
            let p = entry.expect("entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).expect("prefix").to_path_buf(), std::fs::read(&p).expect("file")));
            }
        }
    }
    out.sort();
    out
}

fn c10_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = tmp.path().join("out");
    let out_s = format!("run.output_dir={}", out.display());
    let cfg = desk(&[&out_s]);
    run_experiment(&cfg).map_err(|e| e.to_string())?;
    let first = tmp.path().join("first");
    std::fs::rename(&out, &first).map_err(|e| e.to_string())?;
    run_experiment(&cfg).map_err(|e| e.to_string())?;
    let (a, b) = (tree(&first), tree(&out));
    let names = |t: &[(PathBuf, Vec<u8>)]| t.iter().map(|(p, _)| p.clone()).collect::<Vec<_>>();
    if names(&a) != names(&b) {
        return Err("file sets differ".into());
    }
    let differing: Vec<_> = a.iter().zip(&b).filter(|(x, y)| x.1 != y.1).map(|(x, _)| x.0.display().to_string()).collect();
    let bytes: usize = a.iter().map(|(_, d)| d.len()).sum();
    check(differing.is_empty(), format!("{} files, {bytes} bytes compared; differing: {differing:?}", a.len()))
}

fn report(n: usize, name: &str, outcome: &Outcome) -> bool {
    match outcome {
        Ok(d) => println!("criterion {n:>2} {name}: PASS ({d})"),
        Err(d) => println!("criterion {n:>2} {name}: FAIL ({d})"),
    }
    outcome.is_ok()
}

fn main() -> ExitCode {
    let mut all = true;
    all &= report(1, "parameter ledger", &c1_parameter_ledger());
    all &= report(2, "ConvLoRA oracle", &c2_convlora_oracle());

    let matrix = (|| -> Result<Matrix, String> {
        let gated = desk(&[]);
        let (train, test) = load_dataset(&gated).map_err(|e| e.to_string())?;
        Ok(Matrix {
            base: run_arm(&desk(&["run.dlc=false"]), &train, &test)?,
            ungated: run_arm(&desk(&["run.gate=false"]), &train, &test)?,
            gated: run_arm(&gated, &train, &test)?,
        })
    })();
    let with = |f: fn(&Matrix) -> Outcome| matrix.as_ref().map_err(Clone::clone).and_then(f);
    all &= report(3, "non-interference", &with(c3_non_interference));
    all &= report(4, "freeze discipline", &with(c4_freeze_discipline));
    all &= report(5, "herding oracle", &c5_herding_oracle());
    all &= report(6, "loss unit values", &c6_loss_values());
    all &= report(7, "desk-scale improvement", &with(c7_desk_improvement));
    all &= report(8, "gate properties", &with(c8_gate_properties));
    all &= report(9, "protocol arithmetic", &c9_protocol_arithmetic());
    all &= report(10, "determinism", &c10_determinism());
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
