#![allow(dead_code)]

use pathvid::config::RunConfig;
use pathvid::data::Dataset;
use pathvid::discriminator::DiscriminatorConfig;
use pathvid::generator::GeneratorConfig;

/// 16×16 output with very narrow networks, for fast tests.
pub fn micro_config() -> RunConfig {
    let mut c = RunConfig {
        seed: 7,
        ..RunConfig::default()
    };
    c.data.num_classes = 2;
    c.data.clips_per_class = 4;
    c.data.frames = 8;
    c.data.resolution = 16;
    c.data.step_size = 0.5;
    c.model.d_raw = 64;
    c.model.text_hidden = 32;
    c.model.generator = GeneratorConfig {
        seed_channels: 16,
        block_count: 2,
        channel_schedule: vec![8, 8],
        hidden: 32,
        ..GeneratorConfig::tiny()
    };
    c.model.discriminator = DiscriminatorConfig {
        resolution: 16,
        base_channels: 4,
        base_channels_3d: 4,
        feature_dim: 8,
        ..DiscriminatorConfig::default()
    };
    c.train.batch_size = 4;
    c.train.frame_min = 3;
    c.train.frame_max = 4;
    c.train.total_steps = 10;
    c.train.checkpoint_interval = 5;
    c.eval.frames = 4;
    c.eval.classifier.base_channels = 4;
    c.eval.classifier.feature_dim = 16;
    c.eval.retrieval.base_channels = 4;
    c.eval.retrieval.embed_dim = 16;
    c
}

pub fn micro_dataset(cfg: &RunConfig) -> Dataset {
    Dataset::generate(&cfg.data, cfg.seed).expect("dataset")
}

/// Every file under `dir` with its bytes, sorted by relative path.
pub fn dir_bytes(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).expect("readable dir") {
            let p = e.expect("entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).expect("prefix").display().to_string();
                out.push((rel, std::fs::read(&p).expect("readable file")));
            }
        }
    }
    out.sort();
    out
}
