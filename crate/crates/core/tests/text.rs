use pathvid::pathvid_nn::{Builder, NormMode, ParamStore, Session, Tensor};
use pathvid::text::{
    tokenize, write_embedding_table, EmbeddingConfig, EmbeddingProvider, HashedBow, Sentence, TableProvider, TextHead,
    TEXT_DIM,
};
use pathvid::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent 64-bit FNV-1a followed by the splitmix64 finalizer.
fn fnv(token: &str) -> u64 {
    let h = token.bytes().fold(14695981039346656037u64, |h, b| (h ^ b as u64).wrapping_mul(1099511628211));
    let h = (h ^ (h >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    let h = (h ^ (h >> 27)).wrapping_mul(0x94d049bb133111eb);
    h ^ (h >> 31)
}

#[test]
fn hashed_embedding_is_deterministic_and_unit_norm() {
    let h = HashedBow::new(1024);
    let s = Sentence::new("the red circle is moving left");
    let a = h.embed(&s);
    assert_eq!(a, h.embed(&s));
    let norm: f32 = a.iter().map(|x| x * x).sum::<f32>().sqrt();
    assert!((norm - 1.0).abs() < 1e-6);
}

#[test]
fn adding_a_token_touches_only_its_bucket() {
    let h = HashedBow::new(1024);
    let base = h.counts(&tokenize("red circle"));
    let more = h.counts(&tokenize("red circle moving"));
    let hash = fnv("moving");
    let bucket = (hash % 1024) as usize;
    let sign = if hash >> 63 == 1 { -1.0 } else { 1.0 };
    for i in 0..1024 {
        let expected = if i == bucket { sign } else { 0.0 };
        assert_eq!(more[i] - base[i], expected, "bucket {i}");
    }
    assert_eq!(h.token_bucket("moving"), (bucket, sign));
}

#[test]
fn cancelling_signs_fall_back_to_unsigned_counts() {
    let h = HashedBow::new(4);
    // find two tokens sharing a bucket with opposite signs
    let words: Vec<String> = (0..200).map(|i| format!("w{i}")).collect();
    let pair = words
        .iter()
        .flat_map(|a| words.iter().map(move |b| (a, b)))
        .find(|(a, b)| {
            let (ba, sa) = h.token_bucket(a);
            let (bb, sb) = h.token_bucket(b);
            ba == bb && sa != sb
        })
        .expect("a colliding pair exists among 200 tokens");
    let s = Sentence::new(&format!("{} {}", pair.0, pair.1));
    let v = h.embed(&s);
    let norm: f32 = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    assert!((norm - 1.0).abs() < 1e-6);
}

proptest! {
    #[test]
    fn hashed_embeddings_have_unit_norm(words in proptest::collection::vec("[a-z]{1,8}", 1..12)) {
        let h = HashedBow::new(256);
        let v = h.embed(&Sentence::new(&words.join(" ")));
        let norm: f32 = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        prop_assert!((norm - 1.0).abs() < 1e-5);
    }
}

#[test]
fn table_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("table.tsv");
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rows: Vec<(String, Vec<f32>)> = ["the red circle is moving left", "a b", "x"]
        .iter()
        .map(|s| (s.to_string(), Tensor::randn(vec![16], &mut rng).into_data()))
        .collect();
    write_embedding_table(&path, rows.iter().map(|(s, v)| (s.as_str(), v.as_slice()))).unwrap();
    let t = TableProvider::load(&path, false).unwrap();
    assert_eq!(t.dim, 16);
    for (s, v) in &rows {
        let got = t.table.get(s).unwrap();
        assert_eq!(got.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), v.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }
}

#[test]
fn missing_sentence_without_fallback_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("table.tsv");
    write_embedding_table(&path, [("known", &[1.0f32, 0.0][..])]).unwrap();
    let cfg = EmbeddingConfig {
        provider: "table".into(),
        table_path: Some(path.display().to_string()),
        fallback_to_hashed: false,
    };
    let p = EmbeddingProvider::from_config(&cfg, 2).unwrap();
    assert_eq!(p.embed(&Sentence::new("known")).unwrap(), vec![1.0, 0.0]);
    assert!(matches!(p.embed(&Sentence::new("unknown")), Err(Error::MissingEmbedding(_))));
    let p = EmbeddingProvider::from_config(&EmbeddingConfig { fallback_to_hashed: true, ..cfg.clone() }, 2).unwrap();
    assert_eq!(p.embed(&Sentence::new("unknown")).unwrap().len(), 2);
    assert!(matches!(EmbeddingProvider::from_config(&cfg, 3), Err(Error::Config(_))));
}

fn head(d_raw: usize) -> (ParamStore, TextHead) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let head = TextHead::new(&mut Builder::new(&mut store, &mut rng, "text"), d_raw, 32).unwrap();
    (store, head)
}

#[test]
fn projection_is_256_wide_for_any_batch() {
    let (store, head) = head(64);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for b in [2, 3, 7] {
        let mut s = Session::eval(&store);
        let raw = s.constant(Tensor::randn(vec![b, 64], &mut rng));
        let e = head.forward(&mut s, raw).unwrap();
        assert_eq!(s.value(e).shape(), &[b, TEXT_DIM]);
    }
}

#[test]
fn identical_rows_project_identically() {
    let (store, head) = head(64);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut raw = Tensor::randn(vec![4, 64], &mut rng);
    let first = raw.row(0).to_vec();
    raw.data_mut()[64 * 2..64 * 3].copy_from_slice(&first);
    let mut s = Session::eval(&store);
    let r = s.constant(raw);
    let e = head.forward(&mut s, r).unwrap();
    let v = s.value(e);
    assert_eq!(v.row(0), v.row(2));
}

#[test]
fn frozen_statistics_replay_bit_exactly() {
    let (store, head) = head(64);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let raw = Tensor::randn(vec![3, 64], &mut rng);
    let run = || {
        let mut s = Session::eval(&store).with_mode(NormMode::Running);
        let r = s.constant(raw.clone());
        let e = head.forward(&mut s, r).unwrap();
        s.value(e).clone()
    };
    assert_eq!(run(), run());
}
