//! Trains on an in-memory toy dataset and prints per-step losses.
//!
//! `cargo run --example train_toy -- [preset] [steps]`

use pathvid::data::Dataset;
use pathvid::{RunConfig, Trainer};

fn main() -> pathvid::Result<()> {
    env_logger::init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut cfg = RunConfig::preset(args.first().map_or("tiny", String::as_str))?;
    if let Some(steps) = args.get(1) {
        cfg.train.total_steps = steps.parse().expect("steps must be an integer");
    }
    let ds = Dataset::generate(&cfg.data, cfg.seed)?;
    let mut trainer = Trainer::new(&cfg)?;
    let start = std::time::Instant::now();
    while trainer.step < cfg.train.total_steps {
        let r = trainer.train_step(&ds)?;
        println!(
            "step {:5}  T={}  L_D {:7.4}  L_G {:8.4}  {:5} ms",
            r.step, r.frames, r.loss_d, r.loss_g, r.wall_ms
        );
    }
    println!("{:.1} s total", start.elapsed().as_secs_f64());
    Ok(())
}
