use proptest::prelude::*;
use rand::Rng as _;

use miaug::augment::{augment_multimodal, augment_ser, balance_classes, AugmentedSet, Origin, TextPrior};
use miaug::baseline::{BaselineConfig, BaselineModel};
use miaug::checkpoint::Checkpoint;
use miaug::corpus::{
    corpus_from_bytes, corpus_to_bytes, loso_splits, read_corpus_csv, write_corpus_csv, Corpus,
    FeatureRecord,
};
use miaug::eval::{aggregate_folds, uar_from_predictions, FoldResult};
use miaug::infogan::{generate, GanBundle, GanConfig};
use miaug::numkit::{LinearLayer, Matrix};
use miaug::rng;

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![
        -1e3..1e3f64,
        Just(0.0),
        Just(-0.0),
        Just(f64::MIN_POSITIVE),
        Just(1e300),
        Just(0.1 + 0.2),
    ]
}

prop_compose! {
    fn corpus()(audio_dim in 1..4usize, text_dim in 0..3usize, classes in 1..4usize, n in 1..12usize)
        (records in prop::collection::vec(
            (
                prop::collection::vec(finite(), audio_dim),
                prop::collection::vec(finite(), text_dim),
                0..classes,
                "[a-z0-9 ,_-]{1,5}",
            ),
            n,
        ), audio_dim in Just(audio_dim), text_dim in Just(text_dim), classes in Just(classes))
        -> Corpus
    {
        let records = records
            .into_iter()
            .map(|(audio, text, label, speaker)| FeatureRecord { audio, text, label, speaker })
            .collect();
        Corpus::new(audio_dim, text_dim, classes, records, "generated by proptest").unwrap()
    }
}

/// Small corpus with every class present and non-degenerate features.
fn labelled(classes: usize, counts: &[usize], seed: u64) -> Corpus {
    let mut r = rng::from_seed(seed);
    let mut records = Vec::new();
    for (k, &n) in counts.iter().enumerate() {
        for i in 0..n {
            let row: Vec<f64> = (0..5).map(|_| r.random_range(-1.0..1.0)).collect();
            records.push(FeatureRecord {
                audio: vec![row[0] + k as f64, row[1], row[2]],
                text: vec![row[3] + 1.0, row[4] - k as f64],
                label: k,
                speaker: format!("s{}", i % 3),
            });
        }
    }
    Corpus::new(3, 2, classes, records, "labelled").unwrap()
}

fn bundle(classes: usize, seed: u64) -> GanBundle {
    let baseline = BaselineModel::init(3, 2, classes, BaselineConfig { seed, ..BaselineConfig::default() });
    GanBundle::init(&baseline, &GanConfig { noise_dim: 2, seed, ..GanConfig::default() })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn corpus_binary_round_trip_is_bit_exact(c in corpus()) {
        let bytes = corpus_to_bytes(&c);
        let back = corpus_from_bytes(&bytes).unwrap();
        prop_assert_eq!(corpus_to_bytes(&back), bytes);
        prop_assert_eq!(back, c);
    }

    #[test]
    fn corpus_csv_round_trip_is_exact(c in corpus()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        write_corpus_csv(&c, &path).unwrap();
        let back = read_corpus_csv(&path, Some(c.num_classes())).unwrap();
        prop_assert_eq!(back.records(), c.records());
    }

    #[test]
    fn loso_folds_partition_the_corpus(c in corpus()) {
        let speakers = c.speakers();
        match loso_splits(&c) {
            Err(_) => prop_assert!(speakers.len() < 2),
            Ok(folds) => {
                prop_assert_eq!(folds.len(), speakers.len());
                for (fold, speaker) in folds.iter().zip(&speakers) {
                    prop_assert_eq!(&fold.held_out, speaker);
                    prop_assert_eq!(fold.train.len() + fold.test.len(), c.len());
                    prop_assert!(fold.test.records().iter().all(|r| &r.speaker == speaker));
                    prop_assert!(fold.train.records().iter().all(|r| &r.speaker != speaker));
                }
            }
        }
    }

    #[test]
    fn uar_is_order_free_and_bounded(
        pairs in prop::collection::vec((0..4usize, 0..4usize), 1..40),
        rot in 0..40usize,
    ) {
        let (truth, pred): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let a = uar_from_predictions(&truth, &pred, 4).unwrap();
        let mut rotated = pairs.clone();
        rotated.rotate_left(rot % pairs.len());
        let (t2, p2): (Vec<usize>, Vec<usize>) = rotated.into_iter().unzip();
        let b = uar_from_predictions(&t2, &p2, 4).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!((0.0..=1.0).contains(&a.uar));
        prop_assert_eq!(uar_from_predictions(&truth, &truth, 4).unwrap().uar, 1.0);
    }

    #[test]
    fn aggregate_mean_lies_within_fold_range(uars in prop::collection::vec(0.0..=1.0f64, 1..8)) {
        let folds: Vec<FoldResult> = uars
            .iter()
            .enumerate()
            .map(|(i, &u)| {
                let report = uar_from_predictions(&[0], &[0], 1).unwrap();
                FoldResult { uar: u, ..FoldResult::new(format!("f{i}"), report) }
            })
            .collect();
        let agg = aggregate_folds(&folds).unwrap();
        let lo = uars.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = uars.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(agg.mean_uar >= lo - 1e-12 && agg.mean_uar <= hi + 1e-12);
        prop_assert!(agg.std_uar >= 0.0);
    }

    #[test]
    fn augmentation_counts_follow_the_input(
        counts in prop::collection::vec(1..6usize, 2..4),
        seed in 0..1000u64,
    ) {
        let k = counts.len();
        let c = labelled(k, &counts, seed);
        let b = bundle(k, seed);
        let mut r = rng::from_seed(seed);
        let ser = augment_ser(&c, &b, &mut r).unwrap();
        prop_assert_eq!(ser.len(), 2 * c.len());
        prop_assert_eq!(ser.histogram(), c.histogram().iter().map(|n| 2 * n).collect::<Vec<_>>());
        prop_assert_eq!(ser.generated_count(), c.len());

        let mm = augment_multimodal(&c, &b, &mut r).unwrap();
        prop_assert_eq!(mm.len(), 4 * c.len());
        let real_real = mm.items.iter()
            .filter(|it| it.origin_audio == Origin::Real && it.origin_text == Some(Origin::Real))
            .count();
        prop_assert_eq!(real_real, c.len());

        let balanced = balance_classes(&c, &b, &TextPrior::fit(&c), &mut r).unwrap();
        let max = *counts.iter().max().unwrap();
        prop_assert_eq!(balanced.histogram(), vec![max; k]);
        prop_assert_eq!(balanced.real_slice().len(), c.len());
    }

    #[test]
    fn augmented_set_round_trip_is_exact(counts in prop::collection::vec(1..4usize, 2..4), seed in 0..1000u64) {
        let k = counts.len();
        let c = labelled(k, &counts, seed);
        let set = augment_multimodal(&c, &bundle(k, seed), &mut rng::from_seed(seed)).unwrap();
        let bytes = set.to_bytes().unwrap();
        prop_assert_eq!(AugmentedSet::from_bytes(&bytes).unwrap(), set);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(
        in_dim in 1..5usize,
        out_dim in 1..5usize,
        seed in 0..1000u64,
        meta in "[ -~]{0,20}",
    ) {
        let layer = LinearLayer::gaussian(in_dim, out_dim, &mut rng::from_seed(seed));
        let mut ck = Checkpoint::new();
        ck.push_layer(b"LAYR", &layer);
        ck.push_json(b"META", &meta).unwrap();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back.layer(b"LAYR").unwrap(), layer);
        prop_assert_eq!(back.json::<String>(b"META").unwrap(), meta);
    }

    #[test]
    fn generator_is_affine_in_noise(seed in 0..1000u64, a in -2.0..2.0f64) {
        let b = bundle(3, seed);
        let mut r = rng::from_seed(seed);
        let z1 = Matrix::new(1, 2, vec![r.random_range(-1.0..1.0), 0.5]).unwrap();
        let z2 = Matrix::new(1, 2, vec![-0.25, r.random_range(-1.0..1.0)]).unwrap();
        let zm = Matrix::new(1, 2, z1.row(0).iter().zip(z2.row(0)).map(|(x, y)| a * x + (1.0 - a) * y).collect()).unwrap();
        let t = Matrix::new(1, 2, vec![0.3, -0.7]).unwrap();
        let g = |z: &Matrix| generate(&b, z, &[1], &t).unwrap();
        let (g1, g2, gm) = (g(&z1), g(&z2), g(&zm));
        for j in 0..3 {
            let expected = a * g1.get(0, j) + (1.0 - a) * g2.get(0, j);
            prop_assert!((gm.get(0, j) - expected).abs() < 1e-9);
        }
    }
}
