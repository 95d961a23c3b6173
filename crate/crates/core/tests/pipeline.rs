use std::path::Path;

use noiselens_core::data::{ingest_scores, Dataset, LabelSpace, Sample, ScoreMatrix};
use noiselens_core::experiment::{run_experiment, ExperimentConfig};
use noiselens_core::io::{self, Encoding};
use noiselens_core::noise::make_blobs;
use noiselens_core::Error;
use proptest::prelude::*;

fn arb_dataset() -> impl Strategy<Value = Dataset> {
    (2usize..6, 1usize..5, 1usize..20, any::<bool>()).prop_flat_map(|(c, d, n, gt)| {
        prop::collection::vec((prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), d), 0..c, 0..c), n)
            .prop_map(move |rows| {
                let samples = rows
                    .into_iter()
                    .enumerate()
                    .map(|(i, (features, y, t))| Sample {
                        id: 1000 - i as u64,
                        features,
                        noisy_label: y,
                        true_label: gt.then_some(t),
                    })
                    .collect();
                Dataset::new(LabelSpace::with_classes(c).unwrap(), samples).unwrap()
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dataset_files_round_trip(ds in arb_dataset(), binary in any::<bool>()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds");
        let enc = if binary { Encoding::Binary } else { Encoding::Text };
        io::save_dataset(&path, &ds, enc).unwrap();
        let back = io::load_dataset(&path).unwrap();
        prop_assert_eq!(back, ds);
    }

    #[test]
    fn score_files_round_trip(rows in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 3), 1..30)) {
        let ids: Vec<u64> = (0..rows.len() as u64).collect();
        let s = ScoreMatrix::new(ids, rows).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for enc in [Encoding::Text, Encoding::Binary] {
            let path = dir.path().join("s");
            io::save_scores(&path, &s, enc).unwrap();
            prop_assert_eq!(io::load_scores(&path).unwrap(), s.clone());
        }
    }
}

#[test]
fn malformed_records_report_their_index() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.txt");
    std::fs::write(&path, "#noiselens-dataset v1 N=3 C=3 D=2 GT=0\n0,1,0.5,0.5\n1,2,0.1\n2,0,1,1\n").unwrap();
    let err = io::load_dataset(&path).unwrap_err();
    assert!(matches!(err, Error::DimensionMismatch { record: 1, expected: 2, got: 1 }), "{err}");
    assert_eq!(err.record_index(), Some(1));

    std::fs::write(&path, "#noiselens-dataset v1 N=2 C=3 D=1 GT=1\n0,1,1,0.5\n1,2,3,0.1\n").unwrap();
    let err = io::load_dataset(&path).unwrap_err();
    assert!(matches!(err, Error::LabelOutOfRange { record: 1, label: 3, .. }), "{err}");

    let missing = io::load_dataset(dir.path().join("nope.txt")).unwrap_err();
    assert!(matches!(missing, Error::Io { .. }));
}

#[test]
fn ingested_scores_must_align_with_dataset() {
    let ds = make_blobs(2, 3, 2, 1.0, 1).unwrap();
    let ids: Vec<u64> = ds.ids().collect();
    let rows = vec![vec![0.5, 0.5]; ds.len()];

    let mut shuffled = ids.clone();
    shuffled.swap(0, 1);
    let err = ingest_scores(ScoreMatrix::new(shuffled, rows.clone()).unwrap(), &ds).unwrap_err();
    assert!(matches!(err, Error::IdMismatch { row: 0, .. }), "{err}");

    let err = ingest_scores(ScoreMatrix::new(ids[..4].to_vec(), rows[..4].to_vec()).unwrap(), &ds).unwrap_err();
    assert!(matches!(err, Error::RowCount { scores: 4, dataset: 6 }), "{err}");

    let mut off = rows.clone();
    off[2] = vec![0.5, 0.6];
    let err = ingest_scores(ScoreMatrix::new(ids.clone(), off).unwrap(), &ds).unwrap_err();
    assert!(matches!(err, Error::RowSum { row: 2, .. }), "{err}");

    let mut slightly = rows;
    slightly[3] = vec![0.5, 0.5 + 5e-7];
    let ok = ingest_scores(ScoreMatrix::new(ids, slightly).unwrap(), &ds).unwrap();
    assert!((ok.row(3).iter().sum::<f64>() - 1.0).abs() < 1e-15);
    assert_eq!(ok.row(0), &[0.5, 0.5]);
}

const CONFIG: &str = "\
synth.classes = 3
synth.per_class = 60
synth.dim = 4
synth.seed = 21
noise.kind = idn
noise.rate = 0.3
noise.seed = 22
scorer.kind = oracle
scorer.confidence = 0.9
scorer.confidence2 = 0.8
selection.criterion = combined
selection.rho = 0.5
selection.mu = 0.05
train.epochs = 3
train.batch_size = 16
train.seed = 23
";

#[test]
fn repeated_runs_are_identical() {
    let cfg = ExperimentConfig::parse(CONFIG, Path::new("")).unwrap();
    let a = run_experiment(&cfg).unwrap();
    let b = run_experiment(&cfg).unwrap();
    assert_eq!(a.manifest, b.manifest);
    assert!(a.training.same_result(&b.training));
    assert_eq!(a.mask, b.mask);
    assert!(a.scores2.is_some());
}

#[test]
fn config_from_file_resolves_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let ds = make_blobs(2, 10, 2, 2.0, 4).unwrap();
    io::save_dataset(dir.path().join("train.txt"), &ds, Encoding::Text).unwrap();
    io::save_dataset(dir.path().join("test.txt"), &make_blobs(2, 5, 2, 2.0, 5).unwrap(), Encoding::Text).unwrap();
    let s = noiselens_core::noise::oracle_scores(&ds, 0.9).unwrap();
    io::save_scores(dir.path().join("scores.bin"), &s, Encoding::Binary).unwrap();
    std::fs::write(
        dir.path().join("exp.cfg"),
        "dataset.path = train.txt\ntest.path = test.txt\nscorer.scores = scores.bin\ntrain.epochs = 2\n",
    )
    .unwrap();
    let cfg = ExperimentConfig::from_file(dir.path().join("exp.cfg")).unwrap();
    let out = run_experiment(&cfg).unwrap();
    assert_eq!(out.scores, s);
    assert_eq!(out.eval.test_size, 10);
}
