use std::fs;

use latstab::pipeline::{acceptance::artifact_digest, Pipeline, RunConfig, Stage, Workspace, SMOKE_CONFIG};
use latstab::Error;

fn smoke(dir: &std::path::Path) -> Pipeline {
    Pipeline::new(RunConfig::from_toml(SMOKE_CONFIG).unwrap(), Workspace::new(dir), 1)
}

#[test]
fn missing_upstream_names_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let p = smoke(dir.path());
    match p.run(Stage::TrainCae) {
        Err(Error::Dependency { stage, path }) => {
            assert_eq!(stage, "generate-data");
            assert!(path.ends_with("data.traj"));
        }
        other => panic!("expected dependency error, got {other:?}"),
    }
    assert!(matches!(p.run(Stage::Compare), Err(Error::Dependency { stage: "stability-ref", .. })));
}

#[test]
fn full_run_and_stage_isolation() {
    let dir = tempfile::tempdir().unwrap();
    let p = smoke(dir.path());
    p.run_all(false).unwrap();
    for stage in Stage::ALL {
        assert!(p.is_current(stage).unwrap(), "{}", stage.name());
    }
    let before = artifact_digest(dir.path()).unwrap();

    // downstream artifacts regenerate bit-identically from upstream ones
    for name in ["pred_latent.traj", "horizons.csv", "report.txt", "members/esn_01_spectrum.csv"] {
        fs::remove_file(dir.path().join(name)).unwrap();
    }
    assert!(!p.is_current(Stage::Predict).unwrap());
    let out = p.run_all(false).unwrap();
    assert!(out.contains("train-esn: up to date"));
    assert!(!out.contains("train-cae: 8"));
    assert_eq!(artifact_digest(dir.path()).unwrap(), before);

    let report = fs::read_to_string(dir.path().join("report_spectra.csv")).unwrap();
    assert!(report.lines().next().unwrap().ends_with("member_00,member_01"));
}

#[test]
fn config_change_marks_artifacts_stale() {
    let dir = tempfile::tempdir().unwrap();
    let p = smoke(dir.path());
    p.run(Stage::GenerateData).unwrap();
    let mut changed = p.config.clone();
    changed.cae.epochs += 1;
    let q = Pipeline::new(changed, Workspace::new(dir.path()), 1);
    assert!(!q.is_current(Stage::GenerateData).unwrap());
    assert!(matches!(q.run(Stage::TrainCae), Err(Error::Dependency { stage: "generate-data", .. })));
}

#[test]
fn member_failures_carry_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let p = smoke(dir.path());
    for stage in [Stage::GenerateData, Stage::StabilityRef, Stage::TrainCae, Stage::TrainEsn] {
        p.run(stage).unwrap();
    }
    fs::write(dir.path().join("members/esn_01.model"), b"garbage").unwrap();
    let err = p.run(Stage::StabilityLatent).unwrap_err();
    assert!(matches!(err, Error::Member { seed: 2, .. }), "{err}");
    assert!(matches!(err.root(), Error::Store(_)));
}
