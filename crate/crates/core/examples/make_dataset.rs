//! Writes the 3-class toy set to a directory and exports the first clip as
//! PNG frames.
//!
//! `cargo run --example make_dataset -- [dir]`

use std::path::PathBuf;

use pathvid::data::{build_dataset, export_png, Dataset};
use pathvid::experiment::toy_config;

fn main() -> pathvid::Result<()> {
    let dir = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("pathvid_toy_data"), PathBuf::from);
    let cfg = toy_config(0);
    let manifest = build_dataset(&cfg.data, cfg.seed, &dir)?;
    println!("{} clips, classes {:?}", manifest.clips.len(), manifest.class_counts());
    let ds = Dataset::load(&dir)?;
    let frames = export_png(&ds.clips[0], &dir.join("preview"))?;
    println!("\"{}\" exported as {} frames under {}", ds.manifest.clips[0].caption, frames.len(), dir.join("preview").display());
    Ok(())
}
