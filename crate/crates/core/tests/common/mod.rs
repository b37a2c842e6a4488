#![allow(dead_code)]

use unifuse::synthcorpus::SplitSizes;
use unifuse::trainer::{RunConfig, StageConfig, TriStage};

/// A configuration small enough for end-to-end runs inside unit-test time.
pub fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.corpus.signed = SplitSizes { train: 24, val: 6, test: 6 };
    cfg.corpus.spoken = SplitSizes { train: 24, val: 6, test: 6 };
    cfg.corpus.text_only = 40;
    cfg.pretrain.schedule = TriStage { warmup: 2, hold: 0, decay: 4, peak: 2e-3, floor_ratio: 0.01 };
    cfg.pretrain.batch_size = 4;
    let short = TriStage { warmup: 2, hold: 1, decay: 3, peak: 3e-3, floor_ratio: 0.01 };
    let names = ["stage1", "stage2", "joint", "slt-sign-only", "slt-sign-lip", "slt-sign-lip-vsr"];
    cfg.stages = names
        .iter()
        .map(|n| StageConfig { schedule: short, batch_size: 2, eval_every: 3, ..StageConfig::preset(n).unwrap() })
        .collect();
    cfg.eval.test_limit = Some(3);
    cfg.eval.val_limit = Some(2);
    cfg.eval.max_len = 4;
    cfg
}

pub fn write_config(dir: &std::path::Path, cfg: &RunConfig) -> std::path::PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_json()).unwrap();
    path
}
