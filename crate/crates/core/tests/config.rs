use fsistab::config::{ModelKind, RunConfig};
use fsistab::delay_control::ControlForm;
use fsistab::discretization::BodyForce;
use fsistab::FsiError;

#[test]
fn defaults_validate_and_margin_follows_gamma() {
    let cfg = RunConfig::default();
    cfg.validate().unwrap();
    assert_eq!(cfg.margin(), 0.4);
    assert_eq!(cfg.system_spec(), fsistab::discretization::SystemSpec::default());
}

#[test]
fn text_format_with_sections_and_comments() {
    let text =
        "# experiment\nseed = 7\n[control]\ngamma = 3.0  # faster\nform = \"kernel\"\n[simulation]\nnonlinear = true\n";
    let cfg = RunConfig::parse_str(text).unwrap();
    assert_eq!(cfg.seed, 7);
    assert_eq!(cfg.gamma, 3.0);
    assert_eq!(cfg.form, ControlForm::Kernel);
    assert!(cfg.nonlinear);
    assert_eq!(cfg.margin(), 0.6000000000000001);
}

#[test]
fn json_format_matches_text_format() {
    let json =
        r#"{"geometry": {"n_modes": 12}, "stationary": {"force": "cell:0.5"}, "model": {"kind": "scalar", "b": 0.0}}"#;
    let text = "geometry.n_modes = 12\nstationary.force = cell:0.5\nmodel.kind = scalar\nmodel.b = 0.0\n";
    let a = RunConfig::parse_str(json).unwrap();
    assert_eq!(a, RunConfig::parse_str(text).unwrap());
    assert_eq!(a.force, BodyForce::Cell(0.5));
    assert_eq!(a.model, ModelKind::Scalar);
}

#[test]
fn unknown_keys_are_rejected_by_name() {
    for text in ["control.gama = 2\n", "[physics]\nmu = 1\n", r#"{"simulation": {"steps": 3}}"#] {
        let err = RunConfig::parse_str(text).unwrap_err();
        assert!(matches!(err, FsiError::Config(_)));
        assert!(err.to_string().contains("unknown key"), "{err}");
        assert_eq!(err.exit_code(), 3);
    }
    let err = RunConfig::parse_str("control.gama = 2\n").unwrap_err();
    assert!(err.to_string().contains("control.gama"));
}

#[test]
fn invalid_values_are_rejected() {
    for text in ["control.gamma = -1\n", "geometry.n_modes = 7\n", "simulation.dt = 0\n", "physics.nu = x\n"] {
        assert!(matches!(RunConfig::parse_str(text), Err(FsiError::Config(_))), "{text}");
    }
}

#[test]
fn overrides_apply_and_validate() {
    let mut cfg = RunConfig::default();
    cfg.apply_override("simulation.radius=0.05").unwrap();
    cfg.apply_override("control.margin = 0.3").unwrap();
    assert_eq!(cfg.radius, 0.05);
    assert_eq!(cfg.margin(), 0.3);
    assert!(cfg.apply_override("simulation.radius").is_err());
    assert!(cfg.apply_override("control.t0=-1").is_err());
}

#[test]
fn canonical_text_roundtrips_and_hash_tracks_content() {
    let mut cfg = RunConfig::default();
    cfg.apply_override("physics.beta2=0.3").unwrap();
    cfg.apply_override("control.lambda0=12.5").unwrap();
    let back = RunConfig::parse_str(&cfg.to_text()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.hash(), cfg.hash());
    assert_eq!(cfg.hash().len(), 64);
    assert_ne!(cfg.hash(), RunConfig::default().hash());
}
