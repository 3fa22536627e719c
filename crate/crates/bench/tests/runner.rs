use std::collections::BTreeSet;
use std::path::Path;

use dlc_bench::report::{parse_stages_csv, stages_csv};
use dlc_bench::runner::{drift_between, report_from_checkpoints, seed_dir};
use dlc_bench::{parse_config, run_experiment, ExperimentConfig};

fn tiny(out: &Path, extra: &str) -> ExperimentConfig {
    let text = format!(
        "dataset.format = synthetic
dataset.image_side = 6
synthetic.samples_per_class = 12
synthetic.test_per_class = 6
protocol.class_count = 10
protocol.base_m = 2
protocol.inc_n = 2
protocol.seeds = 5
run.output_dir = {}
train.epochs = 2
train.batch_size = 16
phase2.epochs = 1
buffer.capacity = 10
lora.rank = 2
backbone.channels = 4,8
backbone.strides = 1,2
eval.probe_size = 16
{extra}",
        out.display()
    );
    parse_config(&text).unwrap()
}

fn names(dir: &Path) -> BTreeSet<String> {
    std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect()
}

#[test]
fn five_task_run_emits_documented_files() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path(), "");
    let (runs, written) = run_experiment(&cfg).unwrap();
    assert_eq!(runs.len(), 1);
    assert_eq!(runs[0].report.stages.len(), 5);
    assert!(written.iter().all(|p| p.exists()));

    assert_eq!(names(tmp.path()), ["aggregate.txt", "config.txt", "seed_5"].map(String::from).into());
    let dir = seed_dir(&cfg, 5);
    let mut expected: BTreeSet<String> =
        ["stages.csv", "summary.txt", "drift.csv", "gate.csv", "losses.csv", "checksums.csv"].map(String::from).into();
    for s in 1..=5 {
        expected.insert(format!("confusion_stage_{s:02}.csv"));
        expected.insert(format!("stage_{s:02}"));
    }
    assert_eq!(names(&dir), expected);

    let rows = parse_stages_csv(&std::fs::read_to_string(dir.join("stages.csv")).unwrap()).unwrap();
    let accs: Vec<f64> = rows.iter().map(|r| r.accuracy).collect();
    assert_eq!(accs, runs[0].report.stage_accuracies());
    assert_eq!(rows.iter().map(|r| r.known_classes).collect::<Vec<_>>(), vec![2, 4, 6, 8, 10]);
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!((rows[4].average_so_far - mean).abs() < 1e-9);
    let summary = std::fs::read_to_string(dir.join("summary.txt")).unwrap();
    assert!(summary.contains(&format!("  average = {}", rows[4].average_so_far)), "{summary}");
    assert!(summary.contains(&format!("  last = {}", rows[4].accuracy)));
}

#[test]
fn checkpoints_reproduce_the_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path(), "");
    run_experiment(&cfg).unwrap();
    let dir = seed_dir(&cfg, 5);
    let (report, seed) = report_from_checkpoints(&cfg, &dir).unwrap();
    assert_eq!(seed, 5);
    assert_eq!(stages_csv(&report), std::fs::read_to_string(dir.join("stages.csv")).unwrap());

    let same = drift_between(&cfg, &dir.join("stage_02"), &dir.join("stage_02")).unwrap();
    assert!(same.iter().all(|d| d.max == 0.0));
    let moved = drift_between(&cfg, &dir.join("stage_01"), &dir.join("stage_03")).unwrap();
    assert_eq!(moved.len(), 2);
    assert!(moved.iter().any(|d| d.mean > 0.0));
}

#[test]
fn baseline_arm_has_no_plugins() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path(), "run.dlc = false\n");
    let (runs, _) = run_experiment(&cfg).unwrap();
    let r = &runs[0];
    assert!(r.report.stages.iter().all(|s| s.lora_params == 0));
    assert_eq!(r.report.parameters.gate_total, 0);
    assert!(r.trace.iter().all(|t| t.phi_after_phase2.is_none() && t.gate_means.is_none()));
    let dir = seed_dir(&cfg, 5);
    assert!(!dir.join("stage_01").join("plugins").exists() || names(&dir.join("stage_01").join("plugins")).is_empty());
    let (report, _) = report_from_checkpoints(&cfg, &dir).unwrap();
    assert_eq!(report.stage_accuracies(), r.report.stage_accuracies());
}
