//! Trains briefly, then renders clips for two sentences and a smooth
//! transition between them.
//!
//! `cargo run --example generate -- [steps] [out_dir]`

use std::path::PathBuf;

use pathvid::data::{export_png, Dataset};
use pathvid::metrics::{generate_clips, mean_abs_diff, smooth_transition};
use pathvid::pathvid_nn::NormMode;
use pathvid::{RunConfig, Trainer};

fn main() -> pathvid::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let steps: u64 = args.first().map_or(20, |s| s.parse().expect("steps must be an integer"));
    let out = args.get(1).map_or_else(|| std::env::temp_dir().join("pathvid_generate"), PathBuf::from);
    let mut cfg = RunConfig::preset("smoke")?;
    cfg.train.total_steps = steps;
    let ds = Dataset::generate(&cfg.data, cfg.seed)?;
    let mut trainer = Trainer::new(&cfg)?;
    while trainer.step < steps {
        trainer.train_step(&ds)?;
    }
    let model = &trainer.model;
    let (a, b) = (ds.manifest.clips[0].caption.clone(), ds.manifest.clips.last().expect("clips").caption.clone());
    let clips = generate_clips(model, &[a.clone(), b.clone()], 8, 1, NormMode::Running)?;
    for (i, clip) in clips.iter().enumerate() {
        export_png(&clip.frames, &out.join(format!("clip_{i}")))?;
        println!("{:?}: {} frames", clip.caption, clip.frame_count());
    }
    let path = smooth_transition(model, &a, &b, 5, 8, 1, NormMode::Running)?;
    for (i, clip) in path.iter().enumerate() {
        export_png(&clip.frames, &out.join(format!("transition_{i}")))?;
    }
    let gaps: Vec<String> = path.windows(2).map(|w| format!("{:.4}", mean_abs_diff(&w[0].frames, &w[1].frames))).collect();
    println!("transition {a:?} → {b:?}, adjacent mean |Δ| {}", gaps.join(" "));
    println!("frames written under {}", out.display());
    Ok(())
}
