use super::*;

fn diags(text: &str) -> Vec<Diagnostic> {
    validate_toml(text, Path::new("/")).unwrap()
}

const SYNTH_MIN: &str = "[dataset.synth]\n";

#[test]
fn defaults_round_trip_through_toml() {
    let mut cfg = RunConfig::default();
    cfg.dataset.synth = Some(SynthSpec::default());
    cfg.dataset.reserve = Some((10, 20));
    let text = cfg.to_toml().unwrap();
    assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
}

#[test]
fn minimal_synthetic_config_is_clean() {
    assert_eq!(diags(SYNTH_MIN), vec![]);
}

#[test]
fn misspelled_key_gets_a_suggestion() {
    let d = diags("[dataset.synth]\n[train.weights]\nlamda_pp = 0.5\n");
    assert_eq!(
        d,
        vec![Diagnostic::UnknownKey {
            key: "train.weights.lamda_pp".into(),
            suggestion: Some("train.weights.lambda_pp".into()),
        }]
    );
    assert!(d[0].to_string().contains("did you mean `train.weights.lambda_pp`"));
}

#[test]
fn unrelated_unknown_key_has_no_suggestion() {
    let d = diags("[dataset.synth]\n[density]\nzzzz = 1\n");
    assert_eq!(
        d,
        vec![Diagnostic::UnknownKey {
            key: "density.zzzz".into(),
            suggestion: None,
        }]
    );
}

#[test]
fn unknown_top_level_section() {
    let d = diags("[dataset.synth]\n[trian]\nlr = 0.1\n");
    assert_eq!(
        d,
        vec![Diagnostic::UnknownKey {
            key: "trian".into(),
            suggestion: Some("train".into()),
        }]
    );
}

#[test]
fn optional_keys_are_known() {
    let text = "[dataset]\nroot = \"/nonexistent-dir-x\"\nreserve = [1, 2]\nsubsample_anomalies = 3\n\
                [encoder]\npretrained_checkpoint = \"/nonexistent-ckpt\"\n";
    let d = diags(text);
    assert!(d.iter().all(|d| !matches!(d, Diagnostic::UnknownKey { .. })), "{d:?}");
    assert!(d.contains(&Diagnostic::MissingPath {
        field: "dataset.root".into(),
        path: "/nonexistent-dir-x".into(),
    }));
    assert!(d.iter().any(|d| matches!(d, Diagnostic::MissingPath { field, .. } if field == "encoder.pretrained_checkpoint")));
}

#[test]
fn negative_weight_is_a_named_range_violation() {
    let d = diags("[dataset.synth]\n[train.weights]\nlambda_pp = -1.0\n");
    assert_eq!(d.len(), 1, "{d:?}");
    match &d[0] {
        Diagnostic::Range { field, .. } => assert_eq!(field, "train.weights.lambda_pp"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn every_range_problem_is_reported() {
    let text = "[dataset]\nk = 0\n[dataset.synth]\n[train]\nbatch_size = 0\nema_beta = 1.5\n\
                [density]\nn_a = 0\nepsilon = 0.0\nk_nn = 0\n[eval]\nhistogram_bins = 0\n";
    let fields: Vec<String> = diags(text)
        .into_iter()
        .map(|d| match d {
            Diagnostic::Range { field, .. } => field,
            other => panic!("{other:?}"),
        })
        .collect();
    for want in [
        "dataset.k",
        "train.batch_size",
        "train.ema_beta",
        "density.n_a",
        "density.epsilon",
        "density.k_nn",
        "eval.histogram_bins",
    ] {
        assert!(fields.iter().any(|f| f == want), "missing {want} in {fields:?}");
    }
}

#[test]
fn dataset_source_must_be_unique() {
    let none = diags("");
    assert!(matches!(&none[..], [Diagnostic::Range { field, .. }] if field == "dataset"));
    let both = diags("[dataset]\nroot = \"/\"\n[dataset.synth]\n");
    assert!(matches!(&both[..], [Diagnostic::Range { field, .. }] if field == "dataset"));
}

#[test]
fn corruption_spec_checked_only_under_that_protocol() {
    let bad = "[dataset.synth]\n[dataset.corruption]\ntypes = [\"smudge\"]\nseverity = 4\n";
    assert_eq!(diags(bad), vec![]);
    let d = diags(&format!("[dataset]\nprotocol = \"corruption\"\n{bad}"));
    assert!(matches!(&d[..], [Diagnostic::Range { field, message }]
        if field == "dataset.corruption" && message.contains("smudge")));
}

#[test]
fn wrong_type_is_invalid_not_a_panic() {
    let d = diags("[dataset.synth]\n[train]\nlr = \"fast\"\n");
    assert!(matches!(&d[..], [Diagnostic::Invalid { .. }]), "{d:?}");
}

#[test]
fn syntax_error_carries_location() {
    let err = validate_toml("[train]\nlr = = 1\n", Path::new("/")).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    assert!(err.to_string().contains("line 2"), "{err}");
    let err = RunConfig::from_toml("[train]\nlr = = 1\n").unwrap_err();
    assert!(err.to_string().contains("line 2"), "{err}");
}

#[test]
fn policies_parse_from_tagged_tables() {
    let text = r#"
[dataset.synth]
[augment.negative]
kind = "scar"
length_range = [10.0, 25.0]
width_range = [2.0, 16.0]
rotation_range = [-45.0, 45.0]
"#;
    assert_eq!(diags(text), vec![]);
    let cfg = RunConfig::from_toml(text).unwrap();
    assert_eq!(cfg.augment.negative, NegativePolicy::scar());
    let bad = text.replace("kind = \"scar\"", "kind = \"scratch\"");
    assert!(matches!(&diags(&bad)[..], [Diagnostic::Invalid { .. }]));
}

#[test]
fn validate_returns_first_problem() {
    let mut cfg = RunConfig::default();
    cfg.dataset.synth = Some(SynthSpec::default());
    assert!(cfg.validate().is_ok());
    cfg.dataset.k = 0;
    let err = cfg.validate().unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("dataset.k"));
}

#[test]
fn relative_paths_resolve_against_config_dir() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("imgs")).unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(&path, "[dataset]\nroot = \"imgs\"\n").unwrap();
    assert_eq!(validate_config(&path).unwrap(), vec![]);
    let cfg = RunConfig::load(&path).unwrap();
    assert_eq!(cfg.dataset.root.unwrap(), dir.path().join("imgs"));
}
