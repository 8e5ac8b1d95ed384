use super::*;
use crate::augment::PositivePolicy;
use crate::data::FewShotSplit;
use crate::density::fit_density;
use crate::encoder::{EncoderConfig, OnlineNetwork};
use proptest::prelude::*;
use rand::Rng as _;

fn pairwise(abnormal: &[f64], normal: &[f64]) -> f64 {
    let mut s = 0.0;
    for a in abnormal {
        for n in normal {
            s += if a > n {
                1.0
            } else if a == n {
                0.5
            } else {
                0.0
            };
        }
    }
    s / (abnormal.len() * normal.len()) as f64
}

#[test]
fn auroc_examples() {
    assert_eq!(auroc(&[0.9, 0.8], &[0.1, 0.2]).unwrap(), 1.0);
    assert_eq!(auroc(&[0.4; 3], &[0.4; 5]).unwrap(), 0.5);
    assert!((auroc(&[2.5, 4.0], &[1.0, 2.0, 3.0]).unwrap() - 5.0 / 6.0).abs() < 1e-12);
    assert!(matches!(auroc(&[], &[1.0]), Err(Error::Data(_))));
    assert!(matches!(auroc(&[1.0], &[]), Err(Error::Data(_))));
    assert!(matches!(auroc(&[f64::NAN], &[1.0]), Err(Error::Numerical(_))));
}

#[test]
fn midranks_share_tied_ranks() {
    assert_eq!(midranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
}

#[test]
fn auroc_matches_pairwise_oracle_on_fixture_sweep() {
    let mut rng = crate::rng::from_seed(17);
    for na in 1..=10 {
        for nn in 1..=10 {
            // coarse grid forces ties
            let a: Vec<f64> = (0..na).map(|_| f64::from(rng.random_range(0..6u8))).collect();
            let n: Vec<f64> = (0..nn).map(|_| f64::from(rng.random_range(0..6u8))).collect();
            assert!((auroc(&a, &n).unwrap() - pairwise(&a, &n)).abs() <= 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn auroc_equals_pairwise_oracle(
        a in prop::collection::vec(prop_oneof![-5i32..5, -5i32..5].prop_map(f64::from), 1..100),
        n in prop::collection::vec(-1e3f64..1e3, 1..100),
    ) {
        prop_assert!((auroc(&a, &n).unwrap() - pairwise(&a, &n)).abs() <= 1e-12);
    }

    #[test]
    fn auroc_is_invariant_under_increasing_maps(
        a in prop::collection::vec(-3.0f64..3.0, 1..50),
        n in prop::collection::vec(-3.0f64..3.0, 1..50),
    ) {
        let f = |v: &Vec<f64>| -> Vec<f64> { v.iter().map(|x| x.exp() * 2.0 + 1.0).collect() };
        prop_assert_eq!(auroc(&a, &n).unwrap(), auroc(&f(&a), &f(&n)).unwrap());
    }

    #[test]
    fn swapping_classes_complements(
        a in prop::collection::vec(-3i32..3, 1..60),
        n in prop::collection::vec(-3i32..3, 1..60),
    ) {
        let (a, n): (Vec<f64>, Vec<f64>) = (a.into_iter().map(f64::from).collect(), n.into_iter().map(f64::from).collect());
        prop_assert_eq!(auroc(&a, &n).unwrap() + auroc(&n, &a).unwrap(), 1.0);
    }
}

#[test]
fn separated_masses_have_disjoint_histogram_support() {
    let scores = [1.0, 1.0, 1.0, 9.0, 9.0];
    let labels = [Label::Normal, Label::Normal, Label::Normal, Label::Abnormal, Label::Abnormal];
    let h = Histogram::new(&scores, &labels, 10).unwrap();
    assert!(h.normal.iter().zip(&h.abnormal).all(|(a, b)| *a == 0 || *b == 0));
    assert_eq!(h.edges.len(), 11);
    assert_eq!((h.edges[0], h.edges[10]), (1.0, 9.0));
}

#[test]
fn one_record_per_class_fills_one_bin_each() {
    let h = Histogram::new(&[0.2, 0.7], &[Label::Normal, Label::Abnormal], 30).unwrap();
    assert_eq!(h.normal.iter().filter(|c| **c > 0).count(), 1);
    assert_eq!(h.abnormal.iter().filter(|c| **c > 0).count(), 1);
    let flat = Histogram::new(&[0.5, 0.5], &[Label::Normal, Label::Abnormal], 30).unwrap();
    assert_eq!((flat.normal.clone(), flat.abnormal.clone()), (vec![1], vec![1]));
    assert!(matches!(Histogram::new(&[0.5], &[Label::Normal], 5), Err(Error::Data(_))));
}

#[test]
fn histogram_files_count_every_record() {
    let mut rng = crate::rng::from_seed(3);
    let records: Vec<ScoreRecord> = (0..57)
        .map(|i| ScoreRecord {
            sample_id: i.to_string(),
            raw_score: rng.random_range(0.0..5.0),
            percentile: None,
        })
        .collect();
    let labels: Vec<Label> = (0..57).map(|i| if i % 3 == 0 { Label::Abnormal } else { Label::Normal }).collect();
    let dir = tempfile::tempdir().unwrap();
    let h = export_score_distribution(&records, &labels, 8, dir.path()).unwrap();
    let csv = std::fs::read_to_string(dir.path().join(HIST_CSV_FILE)).unwrap();
    let (mut n, mut a) = (0, 0);
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        n += f[2].parse::<usize>().unwrap();
        a += f[3].parse::<usize>().unwrap();
    }
    assert_eq!((n, a), (38, 19));
    assert_eq!(h.normal.iter().sum::<usize>(), 38);
    assert!(::image::open(dir.path().join(HIST_PNG_FILE)).is_ok());
}

fn encoder() -> OnlineNetwork {
    let mut cfg = EncoderConfig::tiny(vec![4, 8], 12);
    cfg.init_seed = 2;
    OnlineNetwork::random(&cfg).unwrap()
}

fn blob(shift: f32, seed: u64) -> Image {
    let mut rng = crate::rng::from_seed(seed);
    Image::from_fn(3, 12, 12, |c, y, x| {
        let r = ((y as f32 - 6.0).powi(2) + (x as f32 - 6.0).powi(2)).sqrt();
        let base = if r < 4.0 { 0.7 } else { 0.3 };
        (base + 0.02 * rng.random::<f32>() + shift * (c as f32 + 1.0) * 0.1).clamp(0.0, 1.0)
    })
}

#[test]
fn embeddings_file_has_one_row_per_image() {
    let net = encoder();
    let imgs = vec![blob(0.0, 1), blob(0.0, 1), blob(1.0, 2)];
    let labels = [Label::Normal, Label::Normal, Label::Abnormal];
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join(EMBEDDINGS_FILE);
    assert_eq!(export_embeddings(&net, &imgs, &labels, &p).unwrap(), 3);
    let text = std::fs::read_to_string(&p).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 4);
    let d = net.config().feature_dim;
    assert!(rows.iter().all(|r| r.split(',').count() == d + 1));
    assert_eq!(rows[1], rows[2]);
    assert!(rows[3].starts_with("1,"));
    let p2 = dir.path().join("again.csv");
    export_embeddings(&net, &imgs, &labels, &p2).unwrap();
    assert_eq!(text, std::fs::read_to_string(&p2).unwrap());
}

/// Writes normals near one cluster and abnormals far away, then a split over
/// them.
fn fixture(dir: &Path, same_files: bool) -> FewShotSplit {
    let mut train = Vec::new();
    let mut normal = Vec::new();
    let mut abnormal = Vec::new();
    for sub in ["normal", "abnormal"] {
        std::fs::create_dir_all(dir.join(sub)).unwrap();
    }
    for i in 0..4 {
        let id = format!("normal/train_{i}.png");
        blob(0.0, i).save_png(&dir.join(&id)).unwrap();
        train.push(id);
    }
    for i in 0..6 {
        let id = format!("normal/test_{i}.png");
        blob(0.0, 10 + i).save_png(&dir.join(&id)).unwrap();
        normal.push(id);
        let id = format!("abnormal/test_{i}.png");
        let mut far = blob(0.0, 20 + i);
        for v in far.data_mut() {
            *v = 1.0 - *v;
        }
        far.save_png(&dir.join(&id)).unwrap();
        abnormal.push(id);
    }
    if same_files {
        abnormal = normal.clone();
    }
    FewShotSplit {
        protocol: "4-shot".into(),
        seed: 0,
        root: dir.to_path_buf(),
        train_ids: train,
        test_normal_ids: normal,
        test_abnormal_ids: abnormal,
    }
}

#[test]
fn evaluate_separable_fixture_scores_perfectly_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let split = fixture(dir.path(), false);
    let net = encoder();
    let model = fit_density(&net, &split.load_train().unwrap(), &PositivePolicy::identity(), 2, 1e-4, &mut crate::rng::from_seed(0)).unwrap();
    let out = dir.path().join("eval");
    let report = evaluate(&net, &model, &split, &EvalOptions::default(), &out).unwrap();
    assert_eq!(report.auroc, 1.0);
    assert_eq!((report.n_normal, report.n_abnormal), (6, 6));
    for f in [REPORT_FILE, SCORES_FILE, HIST_CSV_FILE, HIST_PNG_FILE, EMBEDDINGS_FILE] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let scores = std::fs::read_to_string(out.join(SCORES_FILE)).unwrap();
    assert_eq!(scores.lines().next(), Some("id,raw_score,percentile,label"));
    assert_eq!(scores.lines().count(), 13);
    assert_eq!(EvalReport::load(&out.join(REPORT_FILE)).unwrap(), report);
}

#[test]
fn identical_classes_give_chance_level() {
    let dir = tempfile::tempdir().unwrap();
    let split = fixture(dir.path(), true);
    let net = encoder();
    let model = fit_density(&net, &split.load_train().unwrap(), &PositivePolicy::identity(), 2, 1e-4, &mut crate::rng::from_seed(0)).unwrap();
    let opts = EvalOptions {
        export_embeddings: false,
        ..EvalOptions::default()
    };
    let report = evaluate(&net, &model, &split, &opts, &dir.path().join("eval")).unwrap();
    assert_eq!(report.auroc, 0.5);
}

#[test]
fn incompatible_density_is_rejected() {
    let net = encoder();
    let rows: Vec<Vec<f64>> = (0..3).map(|i| vec![1.0 + i as f64, 2.0, 0.5]).collect();
    let wrong_dim = DensityModel::fit(&rows, 1e-3).unwrap();
    assert!(matches!(check_compatible(&net, &wrong_dim), Err(Error::Data(_))));
    let d = net.config().feature_dim;
    let rows: Vec<Vec<f64>> = (0..3).map(|i| (0..d).map(|j| (i * d + j) as f64 + 1.0).collect()).collect();
    let mut other = DensityModel::fit(&rows, 1e-3).unwrap();
    check_compatible(&net, &other).unwrap();
    other.encoder_config_hash = Some("deadbeef".into());
    assert!(matches!(check_compatible(&net, &other), Err(Error::Data(_))));
}

#[test]
fn report_round_trips_through_json() {
    let r = EvalReport {
        auroc: 0.8125,
        n_normal: 3,
        n_abnormal: 2,
        normal_scores: ScoreStats::of(&[1.0, 2.0, 4.0]),
        abnormal_scores: ScoreStats::of(&[3.0, 5.5]),
        scorer: ScorerKind::Knn,
        split_hash: "abc".into(),
        encoder_config_hash: "def".into(),
        config: serde_json::json!({"k_nn": 5}),
    };
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join(REPORT_FILE);
    r.save(&p).unwrap();
    assert_eq!(EvalReport::load(&p).unwrap(), r);
    assert_eq!(r.normal_scores.median, 2.0);
}
