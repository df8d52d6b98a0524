//! Property-based invariants for windowing, metrics and splitting.

use proptest::prelude::*;

use ipfusion::data::{apply_window, Dataset, EpisodeRecord, Note, NotePrecision, ChannelSeries};
use ipfusion::eval::{auc, paired_t_test, split_by_id};
use ipfusion::Real;

fn record_strategy() -> impl Strategy<Value = EpisodeRecord> {
    (
        "[a-z]{4}",
        proptest::collection::vec(
            proptest::collection::vec((0.0..48.0f64, -5.0..5.0f64), 0..6),
            1..4,
        ),
        proptest::collection::vec((0.0..48.0f64, proptest::bool::ANY), 0..3),
        0u8..2,
    )
        .prop_map(|(id, channels, notes, label)| EpisodeRecord {
            id,
            channels: channels.into_iter().map(ChannelSeries::from_events).collect(),
            notes: notes
                .into_iter()
                .map(|(t, exact)| Note {
                    timestamp: t,
                    precision: if exact {
                        NotePrecision::ExactTime
                    } else {
                        NotePrecision::DateOnly
                    },
                    text: "note text".into(),
                })
                .collect(),
            admission_text: "admitted".into(),
            label,
        })
}

fn dataset_strategy() -> impl Strategy<Value = Dataset> {
    proptest::collection::vec(record_strategy(), 1..8).prop_map(|mut records| {
        let d = records.iter().map(|r| r.channels.len()).max().unwrap();
        for (i, r) in records.iter_mut().enumerate() {
            r.id = format!("r{i}");
            while r.channels.len() < d {
                r.channels.push(ChannelSeries::empty());
            }
        }
        Dataset { channel_names: (0..d).map(|i| format!("ch{i}")).collect(), records }
    })
}

proptest! {
    #[test]
    fn windowing_is_idempotent(ds in dataset_strategy(), hours in 0.0..48.0f64) {
        let once = apply_window(&ds, hours).unwrap();
        let twice = apply_window(&once, hours).unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn windowing_composes_as_minimum(
        ds in dataset_strategy(),
        h1 in 0.0..48.0f64,
        h2 in 0.0..48.0f64,
    ) {
        let nested = apply_window(&apply_window(&ds, h1).unwrap(), h2).unwrap();
        let direct = apply_window(&ds, h1.min(h2)).unwrap();
        prop_assert_eq!(nested, direct);
    }

    #[test]
    fn windowing_never_grows_observations(ds in dataset_strategy(), hours in 0.0..48.0f64) {
        let windowed = apply_window(&ds, hours).unwrap();
        for (a, b) in windowed.records.iter().zip(&ds.records) {
            prop_assert!(a.observation_count() <= b.observation_count());
            prop_assert!(a.notes.len() <= b.notes.len());
            prop_assert_eq!(a.label, b.label);
        }
    }

    #[test]
    fn auc_invariant_under_increasing_transform(
        scores in proptest::collection::vec(-10.0..10.0f64, 4..30),
        flips in proptest::collection::vec(proptest::bool::ANY, 4..30),
    ) {
        let n = scores.len().min(flips.len());
        let scores = &scores[..n];
        let mut labels: Vec<u8> = flips[..n].iter().map(|&b| b as u8).collect();
        labels[0] = 0;
        labels[n - 1] = 1;
        let base = auc(scores, &labels).unwrap();
        let transformed: Vec<Real> = scores.iter().map(|s| (0.3 * s).exp()).collect();
        let after = auc(&transformed, &labels).unwrap();
        prop_assert!((base - after).abs() < 1e-12);
    }

    #[test]
    fn auc_negation_symmetry(
        scores in proptest::collection::vec(-1.0..1.0f64, 4..30),
        flips in proptest::collection::vec(proptest::bool::ANY, 4..30),
    ) {
        let n = scores.len().min(flips.len());
        let scores = &scores[..n];
        let mut labels: Vec<u8> = flips[..n].iter().map(|&b| b as u8).collect();
        labels[0] = 0;
        labels[n - 1] = 1;
        let pos = auc(scores, &labels).unwrap();
        let negated: Vec<Real> = scores.iter().map(|s| -s).collect();
        let neg = auc(&negated, &labels).unwrap();
        prop_assert_eq!(pos + neg, 1.0);
    }

    #[test]
    fn split_invariants(n in 5usize..300, seed in 0u64..1000) {
        let ids: Vec<String> = (0..n).map(|i| format!("id{i}")).collect();
        let s = split_by_id(&ids, seed).unwrap();
        prop_assert_eq!(s.test.len(), ((0.2 * n as Real) + 0.5).floor() as usize);
        let rem = n - s.test.len();
        prop_assert_eq!(s.validation.len(), ((0.2 * rem as Real) + 0.5).floor() as usize);
        prop_assert_eq!(s.train.len() + s.validation.len() + s.test.len(), n);
        let mut all: Vec<&String> = s.train.iter().chain(&s.validation).chain(&s.test).collect();
        all.sort();
        all.dedup();
        prop_assert_eq!(all.len(), n);
        prop_assert_eq!(&split_by_id(&ids, seed).unwrap(), &s);
    }

    #[test]
    fn t_test_antisymmetry(
        a in proptest::collection::vec(0.0..1.0f64, 3..10),
        b in proptest::collection::vec(0.0..1.0f64, 3..10),
    ) {
        let n = a.len().min(b.len());
        let (a, b) = (&a[..n], &b[..n]);
        let ab = paired_t_test(a, b).unwrap();
        let ba = paired_t_test(b, a).unwrap();
        if !ab.degenerate_variance {
            prop_assert!((ab.t + ba.t).abs() < 1e-9);
            prop_assert!((ab.p - ba.p).abs() < 1e-9);
        }
    }
}
