//! Runs the end-to-end toy experiment for one seed and prints the result.
//!
//! `cargo run --example toy_experiment -- [seed] [steps]`

use pathvid::data::Dataset;
use pathvid::experiment::{real_features, run, toy_config};
use pathvid::metrics::Evaluator;

fn main() -> pathvid::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seed: u64 = args.first().map_or(0, |s| s.parse().expect("seed must be an integer"));
    let data_cfg = toy_config(0);
    let mut cfg = toy_config(seed);
    if let Some(steps) = args.get(1) {
        cfg.train.total_steps = steps.parse().expect("steps must be an integer");
    }
    let ds = Dataset::generate(&data_cfg.data, data_cfg.seed)?;
    let evaluator = Evaluator::load_or_train(&std::env::temp_dir().join("pathvid_toy_evaluator"), &ds, &data_cfg)?;
    println!(
        "evaluator: classifier {:.3} after {} epochs, retrieval top-1 {:.3}",
        evaluator.classifier_fit.accuracy, evaluator.classifier_fit.epochs, evaluator.retrieval_fit.accuracy
    );
    let real = real_features(&evaluator, &ds, &data_cfg)?;
    let (outcome, _) = run(&cfg, &ds, &evaluator, &real, |r| {
        if r.step % 100 == 0 {
            println!("step {:5}  L_D {:.4}  L_G {:.4}", r.step, r.loss_d, r.loss_g);
        }
    })?;
    println!("{}", serde_json::to_string_pretty(&outcome)?);
    println!("checks (fid, accuracy, r-precision): {:?}", outcome.checks());
    Ok(())
}
