use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rwre"))
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(args: &[&str], config: &Path, out: &Path) -> Output {
    bin()
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// A small non-nestling config in `dir` with extra TOML appended.
fn small_config(dir: &Path, extra: &str) -> PathBuf {
    let model = configs().join("models/non_nestling.json");
    let text = format!(
        "model = {:?}\ndirection = [1, 0]\nsamples = 20000\nseed = 99\n\n[rate]\nvelocities = [[0.4, 0.0], [0.35, 0.02]]\n\n[verify]\nconvexity_pairs = 4\nmarginal_points = 1\n{extra}",
        model.to_str().unwrap()
    );
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn missing_model_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "model = \"nope.json\"\ndirection = [1, 0]\nsamples = 10\nseed = 1\n").unwrap();
    let o = run(&["sample"], &cfg, dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("does not exist"));
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(bin().arg("bogus").output().unwrap().status.code(), Some(2));
    assert_eq!(bin().arg("rate").output().unwrap().status.code(), Some(2));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "typo = 3\n");
    assert_eq!(run(&["sample"], &cfg, dir.path()).status.code(), Some(2));
}

#[test]
fn shipped_non_nestling_config_verifies() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["verify"], &configs().join("non_nestling.toml"), dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    let claims = report["claims"].as_array().unwrap();
    assert!(claims.len() >= 5);
    assert!(claims.iter().all(|c| c["status"] == "pass"));
}

#[test]
fn shipped_nestling_config_verifies() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("nestling.toml");
    let s = run(&["sample"], &cfg, dir.path());
    assert_eq!(s.status.code(), Some(0));
    assert!(stdout(&s).contains("sub-exponential"), "{}", stdout(&s));
    let o = run(&["verify"], &cfg, dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("nestling_zero_ray"));
}

#[test]
fn zero_tolerance_fails_with_claim_list() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "\n[tolerances]\nall = 0.0\n");
    let o = run(&["verify"], &cfg, dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("failing claims: zero_at_velocity"), "{}", stdout(&o));
    let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert!(csv.contains(",fail,"));
}

#[test]
fn outputs_are_reproducible_and_worker_independent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let mut outputs = Vec::new();
    for (i, workers) in ["1", "3", "1"].iter().enumerate() {
        let out = dir.path().join(format!("run{i}"));
        for cmd in ["sample", "rate", "export"] {
            let o = bin()
                .args([cmd, "--config"])
                .arg(&cfg)
                .arg("--out")
                .arg(&out)
                .args(["--workers", workers])
                .output()
                .unwrap();
            assert_eq!(o.status.code(), Some(0), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
        }
        let files: Vec<Vec<u8>> =
            ["samples.rwre", "rate.csv", "samples.csv"].iter().map(|f| std::fs::read(out.join(f)).unwrap()).collect();
        outputs.push(files);
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0], outputs[2]);
}

#[test]
fn seed_override_changes_the_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(run(&["sample"], &cfg, &a).status.code(), Some(0));
    let o = bin().args(["sample", "--seed-override", "7", "--config"]).arg(&cfg).arg("--out").arg(&b).output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert_ne!(std::fs::read(a.join("samples.rwre")).unwrap(), std::fs::read(b.join("samples.rwre")).unwrap());
}

#[test]
fn export_and_region_write_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "\n[region]\nresolution = 0.02\n");
    assert_eq!(run(&["export"], &cfg, dir.path()).status.code(), Some(0));
    let csv = std::fs::read_to_string(dir.path().join("samples.csv")).unwrap();
    assert!(csv.starts_with("dx1,dx2,dtau,sup_disp\n"));
    assert_eq!(csv.lines().count(), 20_001);
    let o = run(&["region"], &cfg, dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let region = std::fs::read_to_string(dir.path().join("region.csv")).unwrap();
    assert!(region.starts_with("eta1,eta2,label,v1,v2,s0,lambda,lam_x,lam_x_se\n"));
}
