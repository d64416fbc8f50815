mod common;

use common::benchmark_config;
use proptest::prelude::*;
use selhn::data::{decode_features, encode_features, gen_synthetic, parse_features_text, PairedDataset, SynthConfig, HEADER_LEN};
use selhn::encoders::FeatureSet;
use selhn::harness::{run_training_on, Model};
use selhn::numerics::Matrix;
use selhn::Error;

fn dataset() -> impl Strategy<Value = PairedDataset> {
    (1usize..6, 1usize..5, 1usize..5).prop_flat_map(|(n, dv, dt)| {
        let set = move |d: usize| {
            (1usize..4).prop_flat_map(move |m| {
                prop::collection::vec(-1e3f64..1e3, m * d).prop_map(move |v| FeatureSet::new(Matrix::from_vec(m, d, v).unwrap()).unwrap())
            })
        };
        (prop::collection::vec(set(dv), n), prop::collection::vec(set(dt), n))
            .prop_map(move |(img, txt)| PairedDataset::new(dv, dt, img, txt).unwrap())
    })
}

proptest! {
    #[test]
    fn hnsf_round_trip_is_f32_exact(ds in dataset()) {
        let bytes = encode_features(&ds).unwrap();
        let back = decode_features(&bytes).unwrap();
        for (a, b) in ds.images.iter().chain(&ds.texts).zip(back.images.iter().chain(&back.texts)) {
            prop_assert_eq!(a.vectors.shape(), b.vectors.shape());
            for (&x, &y) in a.vectors.as_slice().iter().zip(b.vectors.as_slice()) {
                prop_assert_eq!((x as f32) as f64, y);
            }
        }
        prop_assert_eq!(encode_features(&back).unwrap(), bytes);
    }

    #[test]
    fn truncation_is_a_format_error(ds in dataset(), cut in 1usize..64) {
        let bytes = encode_features(&ds).unwrap();
        let keep = bytes.len().saturating_sub(cut);
        let err = decode_features(&bytes[..keep]).unwrap_err();
        prop_assert!(matches!(err, Error::Format { .. }), "{}", err);
    }
}

#[test]
fn bad_magic_is_rejected() {
    let ds = gen_synthetic(&SynthConfig {
        n_items: 3,
        ..SynthConfig::default()
    })
    .unwrap();
    let mut bytes = encode_features(&ds).unwrap();
    assert!(bytes.len() > HEADER_LEN);
    bytes[0] = b'X';
    assert!(matches!(decode_features(&bytes), Err(Error::Format { offset: 0, .. })));
}

#[test]
fn text_format_reads_sets() {
    let ds = parse_features_text("# two items\n1; 1,2; 1; 3\n2; 4,5,6,7; 2; 8,9\n").unwrap();
    assert_eq!(ds.len(), 2);
    assert_eq!(ds.images[1].len(), 2);
    assert_eq!(ds.texts[1].vectors.as_slice(), &[8.0, 9.0]);
    assert_eq!((ds.image_dim, ds.text_dim), (2, 1));
}

#[test]
fn training_is_deterministic_and_checkpoints_reload() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = |name: &str| {
        benchmark_config(&[
            ("synth_items", "300".into()),
            ("val_items", "50".into()),
            ("test_items", "50".into()),
            ("epochs", "2".into()),
            ("arch", "rmlp".into()),
            ("out", tmp.path().join(name).display().to_string()),
        ])
    };
    let ds = cfg("a").load_dataset().unwrap();
    let a = run_training_on(&cfg("a"), &ds).unwrap();
    run_training_on(&cfg("b"), &ds).unwrap();
    let read = |n: &str, f: &str| std::fs::read(tmp.path().join(n).join(f)).unwrap();
    assert_eq!(read("a", "metrics.csv"), read("b", "metrics.csv"));
    assert_eq!(read("a", "ckpt_final"), read("b", "ckpt_final"));

    let loaded = Model::load(&tmp.path().join("a/ckpt_final")).unwrap();
    let idx: Vec<usize> = (0..50).collect();
    assert_eq!(loaded.score_table(&ds, &idx).unwrap(), a.model.score_table(&ds, &idx).unwrap());
}
