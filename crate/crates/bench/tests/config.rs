use dlc_bench::config::{parse_config, parse_with_overrides, DatasetFormat};
use dlc_bench::BenchError;
use dlc_core::engine::{KdVariant, Method};
use proptest::prelude::*;

const MINIMAL: &str = "dataset.format = synthetic\nprotocol.class_count = 10\nprotocol.base_m = 2\nprotocol.inc_n = 2\n";

#[test]
fn minimal_config_gets_defaults() {
    let c = parse_config(MINIMAL).unwrap();
    assert_eq!(c.format, DatasetFormat::Synthetic);
    assert_eq!(c.train.method, Method::ReplayDistill);
    assert_eq!(c.train.kd, KdVariant::Kl);
    assert_eq!(c.train.tau, 2.0);
    assert_eq!(c.train.buffer_capacity, 2000);
    assert_eq!(c.train.rank, None);
    assert_eq!(c.train.phase2_epochs, 2);
    assert_eq!(c.train.phase2_lr, 0.01);
    assert_eq!(c.seeds, vec![1]);
    assert_eq!(c.exemplar_bytes(), 8 * 8 * 3);
    assert!(c.train.dlc && c.train.gate);
}

#[test]
fn indivisible_split_names_both_values() {
    let text = MINIMAL.replace("protocol.inc_n = 2", "protocol.inc_n = 3");
    let err = parse_config(&text).unwrap_err().to_string();
    assert!(err.contains('3') && err.contains('8'), "{err}");
    assert!(matches!(parse_config(&text), Err(BenchError::Config(_))));
}

#[test]
fn rejects_bad_documents() {
    assert!(parse_config(&format!("{MINIMAL}train.epochz = 3\n")).is_err());
    assert!(parse_config("dataset.format = synthetic\nprotocol.base_m = 2\nprotocol.inc_n = 2\n")
        .unwrap_err()
        .to_string()
        .contains("protocol.class_count"));
    assert!(parse_config(&format!("{MINIMAL}run.method = icarl\n")).is_err());
    assert!(parse_config(&MINIMAL.replace("synthetic", "png")).is_err());
    assert!(parse_config(&format!("{MINIMAL}protocol.base_m = 4\n")).is_err());
    assert!(parse_config(&format!("{MINIMAL}just words\n")).is_err());
    assert!(parse_config(&MINIMAL.replace("synthetic", "idx")).is_err());
    assert!(parse_config(&format!("{MINIMAL}kd.tau = 0\n")).is_err());
}

#[test]
fn comments_and_overrides() {
    let text = format!("# header\n{MINIMAL}train.epochs = 10 # trailing\n");
    let c = parse_with_overrides(&text, &["run.dlc=false".into(), "train.epochs = 25".into()]).unwrap();
    assert!(!c.train.dlc);
    assert_eq!(c.train.epochs, 25);
    assert_eq!(c.train.phase2_epochs, 5);
    assert!(parse_with_overrides(&text, &["nope=1".into()]).is_err());
    assert!(parse_with_overrides(&text, &["run.dlc".into()]).is_err());
}

proptest! {
    #[test]
    fn canonical_text_round_trips(
        epochs in 1usize..40,
        lr in 0.001f32..1.0,
        tau in 0.5f32..8.0,
        cap in 0usize..5000,
        rank in proptest::option::of(1usize..32),
        alpha in proptest::option::of(0.5f32..32.0),
        seeds in prop::collection::vec(0u64..1000, 1..4),
        dlc in any::<bool>(),
        gate in any::<bool>(),
        method in prop::sample::select(vec!["replay", "distill", "replay+distill"]),
        noise in 0.0f32..0.5,
    ) {
        let mut text = MINIMAL.to_string();
        text += &format!("train.epochs = {epochs}\ntrain.lr = {lr}\nkd.tau = {tau}\nbuffer.capacity = {cap}\n");
        if let Some(r) = rank { text += &format!("lora.rank = {r}\n"); }
        if let Some(a) = alpha { text += &format!("lora.alpha = {a}\n"); }
        let seeds_s: Vec<String> = seeds.iter().map(u64::to_string).collect();
        text += &format!("protocol.seeds = {}\nrun.dlc = {dlc}\nrun.gate = {gate}\nrun.method = {method}\nsynthetic.noise = {noise}\n", seeds_s.join(","));
        let a = parse_config(&text).unwrap();
        let b = parse_config(&a.to_text()).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.to_text(), b.to_text());
    }
}
