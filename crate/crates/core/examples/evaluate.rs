//! Fits the evaluation networks on a small set and scores an untrained
//! generator with every metric.
//!
//! `cargo run --example evaluate`

use pathvid::data::Dataset;
use pathvid::metrics::Evaluator;
use pathvid::{Model, RunConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> pathvid::Result<()> {
    let cfg = RunConfig::preset("smoke")?;
    let ds = Dataset::generate(&cfg.data, cfg.seed)?;
    let evaluator = Evaluator::train(&ds, &cfg)?;
    println!(
        "classifier accuracy {:.3}, retrieval top-1 {:.3}",
        evaluator.classifier_fit.accuracy, evaluator.retrieval_fit.accuracy
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let real = evaluator.real_set(&ds, cfg.eval.num_real, &mut rng)?;
    let model = Model::new(&cfg.model, cfg.seed)?;
    let outcome = evaluator.evaluate(&model, &real, &cfg, cfg.seed)?;
    println!("{}", serde_json::to_string_pretty(&outcome.report)?);
    println!("random R-precision baseline {:.3} ± {:.3}", outcome.baseline_mean, outcome.baseline_std);
    if let Err(e) = evaluator.reliable() {
        println!("warning: {e}");
    }
    Ok(())
}
