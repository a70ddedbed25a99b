mod common;

use std::fs;

use common::{dir_bytes, micro_config, micro_dataset};
use pathvid::config::{DataConfig, RunConfig};
use pathvid::data::{
    build_dataset, export_png, import_png, motion_matches, sample_batch, synthesize_clip, vocabulary, Background,
    Dataset, Motion, SceneSpec, CANONICAL_CLASSES,
};
use pathvid::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn class_captions_are_unique_and_in_the_vocabulary() {
    let captions: Vec<String> = CANONICAL_CLASSES.iter().map(|c| c.caption()).collect();
    let mut sorted = captions.clone();
    sorted.sort();
    sorted.dedup();
    assert_eq!(sorted.len(), captions.len());
    let vocab = vocabulary();
    for c in &captions {
        assert!(c.split(' ').all(|w| vocab.iter().any(|v| v == w)), "{c}");
        assert!(!c.contains("background"));
    }
}

#[test]
fn every_class_renders_its_motion() {
    let cfg = RunConfig::preset("robot").unwrap().data;
    let cfg = DataConfig { clips_per_class: 3, ..cfg };
    let ds = Dataset::generate(&cfg, 5).unwrap();
    assert_eq!(ds.len(), 33);
    for (clip, entry) in ds.clips.iter().zip(&ds.manifest.clips) {
        assert_eq!(clip.shape(), &[16, 3, 32, 32]);
        assert!(clip.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let spec = CANONICAL_CLASSES[entry.class];
        assert!(motion_matches(clip, Background::Black, spec.color, spec.motion), "{} does not match", entry.caption);
    }
}

#[test]
fn a_clip_does_not_match_the_opposite_motion() {
    let cfg = DataConfig { jitter: false, ..DataConfig::default() };
    let spec = SceneSpec::random(&CANONICAL_CLASSES[0], 16, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let clip = synthesize_clip(&spec, 16, 32).unwrap();
    assert!(motion_matches(&clip, Background::Black, spec.color, Motion::MovingLeft));
    assert!(!motion_matches(&clip, Background::Black, spec.color, Motion::MovingRight));
}

#[test]
fn scenes_that_leave_the_frame_are_rejected() {
    let cfg = DataConfig { step_size: 10.0, ..DataConfig::default() };
    let err = SceneSpec::random(&CANONICAL_CLASSES[0], 16, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
    assert!(matches!(err, Error::Data(_)));
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn generation_is_deterministic_per_seed() {
    let cfg = micro_config();
    let a = micro_dataset(&cfg);
    let b = micro_dataset(&cfg);
    assert_eq!(a.clips, b.clips);
    let c = Dataset::generate(&cfg.data, cfg.seed + 1).unwrap();
    assert_ne!(a.clips, c.clips);

    let dir = tempfile::tempdir().unwrap();
    build_dataset(&cfg.data, cfg.seed, &dir.path().join("x")).unwrap();
    build_dataset(&cfg.data, cfg.seed, &dir.path().join("y")).unwrap();
    assert_eq!(dir_bytes(&dir.path().join("x")), dir_bytes(&dir.path().join("y")));
    let loaded = Dataset::load(&dir.path().join("x")).unwrap();
    assert_eq!(loaded.clips, a.clips);
    assert_eq!(loaded.manifest, a.manifest);
}

#[test]
fn broken_datasets_are_data_errors() {
    let cfg = micro_config();
    let ds = micro_dataset(&cfg);
    let dir = tempfile::tempdir().unwrap();
    ds.save(dir.path()).unwrap();

    let mut m = ds.manifest.clone();
    m.clips[1].id = m.clips[0].id.clone();
    fs::write(dir.path().join("manifest.json"), serde_json::to_string(&m).unwrap()).unwrap();
    assert!(matches!(Dataset::load(dir.path()), Err(Error::Data(_))));

    let mut m = ds.manifest.clone();
    m.clips[0].class = 9;
    fs::write(dir.path().join("manifest.json"), serde_json::to_string(&m).unwrap()).unwrap();
    assert!(matches!(Dataset::load(dir.path()), Err(Error::Data(_))));

    let mut m = ds.manifest.clone();
    m.clips[0].frame_count = 3;
    fs::write(dir.path().join("manifest.json"), serde_json::to_string(&m).unwrap()).unwrap();
    assert!(matches!(Dataset::load(dir.path()), Err(Error::Data(_))));

    assert!(matches!(Dataset::load(&dir.path().join("missing")), Err(Error::Data(_))));
}

#[test]
fn png_round_trip_is_within_one_level() {
    let cfg = micro_config();
    let ds = micro_dataset(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let paths = export_png(&ds.clips[0], dir.path()).unwrap();
    assert_eq!(paths.len(), 8);
    assert!(paths[0].ends_with("frame_0000.png"));
    let back = import_png(&paths).unwrap();
    assert_eq!(back.shape(), ds.clips[0].shape());
    for (a, b) in back.data().iter().zip(ds.clips[0].data()) {
        assert!((a - b).abs() <= 1.0 / 255.0 + 1e-6);
    }
}

#[test]
fn batches_are_contiguous_windows_of_one_length() {
    let cfg = micro_config();
    let ds = micro_dataset(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let b = sample_batch(&ds, 4, (3, 6), &mut rng).unwrap();
        assert!((3..=6).contains(&b.frames));
        assert_eq!(b.videos.shape(), &[4, 3, b.frames, 16, 16]);
        let per = 3 * 16 * 16;
        for (k, &(clip, start)) in b.windows.iter().enumerate() {
            assert!(start + b.frames <= 8);
            assert_eq!(b.captions[k], ds.manifest.clips[clip].caption);
            let frames = b.videos.permute(&[0, 2, 1, 3, 4]).unwrap();
            let got = &frames.data()[k * b.frames * per..(k + 1) * b.frames * per];
            assert_eq!(got, &ds.clips[clip].data()[start * per..(start + b.frames) * per]);
        }
    }
    assert!(sample_batch(&ds, 4, (9, 9), &mut rng).is_err());
}
