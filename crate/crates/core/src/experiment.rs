//! The scaled-down end-to-end experiment: train on the 3-class toy set and
//! compare the evaluation of the trained model with the untrained one.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::Result;
use crate::metrics::{EvalOutcome, Evaluator, RealSet};
use crate::training::{StepRecord, Trainer};

/// Required relative FID improvement over the untrained model.
pub const FID_IMPROVEMENT: f64 = 0.5;
/// Required command accuracy of generated clips.
pub const ACCURACY_FLOOR: f64 = 0.5;
/// Required margin of R-precision over the random baseline, in baseline
/// standard deviations.
pub const BASELINE_SIGMAS: f64 = 3.0;

/// `tiny` networks on 3 classes × 100 clips at 32×32, 2000 steps of batch 8.
pub fn toy_config(seed: u64) -> RunConfig {
    let mut c = RunConfig::preset("tiny").expect("tiny preset");
    c.seed = seed;
    c.data.num_classes = 3;
    c.data.clips_per_class = 100;
    c.train.batch_size = 8;
    c.train.total_steps = 2000;
    c
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub seed: u64,
    pub steps: u64,
    pub fid_before: f64,
    pub fid_after: f64,
    pub accuracy: f64,
    pub r_precision: f64,
    pub baseline_mean: f64,
    pub baseline_std: f64,
    pub train_seconds: f64,
}

impl ExperimentOutcome {
    pub fn fid_improvement(&self) -> f64 {
        1.0 - self.fid_after / self.fid_before
    }

    /// `(FID, accuracy, R-precision)` checks.
    pub fn checks(&self) -> [bool; 3] {
        [
            self.fid_improvement() >= FID_IMPROVEMENT,
            self.accuracy > ACCURACY_FLOOR,
            self.r_precision > self.baseline_mean + BASELINE_SIGMAS * self.baseline_std,
        ]
    }

    pub fn passed(&self) -> bool {
        self.checks().iter().all(|&c| c)
    }
}

/// Real features shared by every evaluation of one dataset.
pub fn real_features(evaluator: &Evaluator, ds: &Dataset, cfg: &RunConfig) -> Result<RealSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(10);
    evaluator.real_set(ds, cfg.eval.num_real, &mut rng)
}

/// Evaluates the untrained model, trains for `cfg.train.total_steps` and
/// evaluates again with the same generation seed.
pub fn run(
    cfg: &RunConfig,
    ds: &Dataset,
    evaluator: &Evaluator,
    real: &RealSet,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<(ExperimentOutcome, EvalOutcome)> {
    let mut trainer = Trainer::new(cfg)?;
    let before = evaluator.evaluate(&trainer.model, real, cfg, cfg.seed)?;
    let start = Instant::now();
    while trainer.step < cfg.train.total_steps {
        let r = trainer.train_step(ds)?;
        on_step(&r);
    }
    let train_seconds = start.elapsed().as_secs_f64();
    let after = evaluator.evaluate(&trainer.model, real, cfg, cfg.seed)?;
    let outcome = ExperimentOutcome {
        seed: cfg.seed,
        steps: trainer.step,
        fid_before: before.report.fid_all,
        fid_after: after.report.fid_all,
        accuracy: after.report.accuracy,
        r_precision: after.report.r_precision,
        baseline_mean: after.baseline_mean,
        baseline_std: after.baseline_std,
        train_seconds,
    };
    Ok((outcome, after))
}
