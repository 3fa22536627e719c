//! Closed-form LoRA parameter ledger, no training involved.

use dlc_core::convlora::{default_rank, plugin_param_count};
use dlc_core::engine::stream::validate_split;

use crate::error::BenchError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerRow {
    pub name: String,
    pub class_count: usize,
    pub base_m: usize,
    pub inc_n: usize,
    pub tasks: usize,
    pub channels: usize,
    pub kernel: usize,
    pub rank: usize,
    pub plugins: usize,
    pub lora_total: usize,
}

/// One plugin set per task, `plugins` square `channels→channels` adapters each.
pub fn ledger_row(
    name: &str,
    class_count: usize,
    base_m: usize,
    inc_n: usize,
    channels: usize,
    kernel: usize,
    rank: Option<usize>,
    plugins: usize,
) -> Result<LedgerRow, BenchError> {
    let tasks = validate_split(class_count, base_m, inc_n).map_err(|e| BenchError::Config(e.to_string()))?;
    let rank = rank.unwrap_or_else(|| default_rank(channels));
    let per = plugin_param_count(channels, channels, kernel, rank).map_err(|e| BenchError::Config(e.to_string()))?;
    Ok(LedgerRow {
        name: name.to_string(),
        class_count,
        base_m,
        inc_n,
        tasks,
        channels,
        kernel,
        rank,
        plugins,
        lora_total: tasks * plugins * per,
    })
}

/// The five benchmark splits: 64-channel last stage for the CIFAR-100
/// backbone, 512 for the larger-image backbone.
pub fn benchmark_rows() -> Vec<LedgerRow> {
    [
        ("CIFAR-100 B5 Inc5", 100, 5, 5, 64),
        ("CIFAR-100 B10 Inc10", 100, 10, 10, 64),
        ("CIFAR-100 B50 Inc10", 100, 50, 10, 64),
        ("Tiny-ImageNet B40 Inc40", 200, 40, 40, 512),
        ("ImageNet-100 B50 Inc10", 100, 50, 10, 512),
    ]
    .into_iter()
    .map(|(name, c, m, n, ch)| ledger_row(name, c, m, n, ch, 3, None, 1).expect("valid benchmark split"))
    .collect()
}

pub fn render(rows: &[LedgerRow]) -> String {
    let mut s = String::from("split,class_count,base_m,inc_n,tasks,channels,kernel,rank,plugins,lora_params\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.name, r.class_count, r.base_m, r.inc_n, r.tasks, r.channels, r.kernel, r.rank, r.plugins, r.lora_total
        ));
    }
    s
}
