#![allow(dead_code)]

use std::path::PathBuf;

use sdoh::experiment::{ExperimentConfig, StageConfig};
use sdoh::model::{Optimizer, Variant};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

/// Small enough to train in well under a second per epoch.
pub fn tiny_stage(variant: Variant, epochs: usize) -> StageConfig {
    let mut s = StageConfig::new(variant);
    s.model.encoder.buckets = 512;
    s.model.encoder.dim = 16;
    s.model.features.cui_dim = 8;
    s.model.conv_channels = [16, 16];
    s.train.epochs = epochs;
    s.train.learning_rate = 0.01;
    s.train.batch_size = 8;
    s.train.optimizer = Optimizer::Adam;
    s
}

pub fn tiny_experiment(out: PathBuf) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new("tiny", fixture("tiny.jsonl"), out);
    cfg.multilabel = tiny_stage(Variant::Multilabel, 4);
    cfg
}
