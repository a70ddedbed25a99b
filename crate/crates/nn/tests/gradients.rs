//! Analytic gradients of every primitive against central finite differences
//! (h = 1e-3), 20 seeds each, inputs of at most 64 elements.

use pathvid_nn::suite::{cases, TOLERANCE};

const SEEDS: u64 = 20;

#[test]
fn every_primitive_matches_finite_differences() {
    let mut failed = Vec::new();
    for case in cases() {
        let worst = case.worst_error(SEEDS).unwrap();
        eprintln!("{:<24} worst relative error {worst:.2e}", case.name);
        if !(worst < TOLERANCE) {
            failed.push((case.name, worst));
        }
    }
    assert!(failed.is_empty(), "{failed:?}");
}

#[test]
fn the_catalogue_covers_the_tape_primitives() {
    let names: Vec<&str> = cases().iter().map(|c| c.name).collect();
    for needed in [
        "dense",
        "conv2d",
        "conv3d",
        "batch_norm",
        "cond_batch_norm",
        "leaky_relu",
        "tanh",
        "sigmoid",
        "nn_upsample2x",
        "avg_pool2x",
        "sobel_edges",
        "spectral_norm",
        "softmax_cross_entropy",
    ] {
        assert!(names.contains(&needed), "{needed} is not checked");
    }
}
