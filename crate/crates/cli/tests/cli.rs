use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn kinemix(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_kinemix"));
    c.args(args).env_remove("KINEMIX_THREADS");
    for (k, v) in envs {
        c.env(k, v);
    }
    c.output().expect("spawn kinemix")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit status")
}

fn small_config(dir: &Path, amplitude: f64, t_final: f64) -> String {
    let p = dir.join("run.toml");
    fs::write(
        &p,
        format!(
            "schema_version = 1\n\
             [grid]\nnv = 8\n\
             [space]\nx_lo = -6.0\nx_hi = 6.0\nnx = 16\n\
             [scheme]\nt_final = {t_final}\n\
             [initial]\namplitude = {amplitude}\n"
        ),
    )
    .unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn asymmetric_beta_is_a_config_error() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path().join("bad.toml");
    fs::write(&p, "[mixture]\nmasses = [1.0, 2.0]\ndensities = [1.0, 1.0]\nbeta = [[1.0, 0.5], [0.7, 1.0]]\n").unwrap();
    let out = d.path().join("out");
    let o = kinemix(&["verify", "--config", p.to_str().unwrap(), "--out", out.to_str().unwrap()], &[]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("symmetric"));
}

#[test]
fn unknown_keys_and_suites_are_rejected() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path().join("typo.toml");
    fs::write(&p, "[grid]\nnvv = 8\n").unwrap();
    let o = kinemix(&["verify", "--config", p.to_str().unwrap()], &[]);
    assert_eq!(code(&o), 2);
    let o = kinemix(&["verify", "--only", "nope", "--out", d.path().to_str().unwrap()], &[]);
    assert_eq!(code(&o), 2);
    let o = kinemix(&["simulate", "--only", "basis"], &[]);
    assert_eq!(code(&o), 2);
}

#[test]
fn bad_thread_count_is_a_config_error() {
    let d = tempfile::tempdir().unwrap();
    let o = kinemix(&["verify", "--only", "basis", "--out", d.path().to_str().unwrap()], &[("KINEMIX_THREADS", "0")]);
    assert_eq!(code(&o), 2);
}

#[test]
fn verify_only_runs_one_suite_and_exports() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("v");
    let o = kinemix(&["verify", "--only", "basis", "--out", out.to_str().unwrap()], &[("KINEMIX_THREADS", "2")]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let suites = summary["suites"].as_array().unwrap();
    assert_eq!(suites.len(), 1);
    assert_eq!(suites[0]["suite"], "basis");
    let hash = summary["config_hash"].as_str().unwrap();
    for line in fs::read_to_string(out.join("records.ndjson")).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["config_hash"], hash);
        for key in ["t", "name", "value", "tolerance", "pass", "check_ref"] {
            assert!(v.get(key).is_some(), "{key} missing in {line}");
        }
    }

    assert_eq!(code(&kinemix(&["export-plots", "--out", out.to_str().unwrap()], &[])), 0);
    let first = fs::read(out.join("plots/basis.gram_defect.tsv")).unwrap();
    let index = fs::read(out.join("plots/index.tsv")).unwrap();
    assert_eq!(code(&kinemix(&["export-plots", "--out", out.to_str().unwrap()], &[])), 0);
    assert_eq!(first, fs::read(out.join("plots/basis.gram_defect.tsv")).unwrap());
    assert_eq!(index, fs::read(out.join("plots/index.tsv")).unwrap());
}

#[test]
fn export_of_an_empty_directory_fails() {
    let d = tempfile::tempdir().unwrap();
    let o = kinemix(&["export-plots", "--out", d.path().to_str().unwrap()], &[]);
    assert_ne!(code(&o), 0);
    assert!(!d.path().join("plots").exists());
}

#[test]
fn zero_data_simulation_passes_and_checkpoints() {
    let d = tempfile::tempdir().unwrap();
    let cfg = small_config(d.path(), 0.0, 0.3);
    let out = d.path().join("s");
    let o = kinemix(&["simulate", "--config", &cfg, "--out", out.to_str().unwrap(), "--checkpoint-every", "1"], &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["records.ndjson", "summary.txt", "energy.json", "config.toml", "run.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert!(fs::read_dir(out.join("checkpoints")).unwrap().count() > 0);
    assert!(!out.join("abort.kmxs").exists());
}

#[test]
fn large_data_aborts_with_a_dump() {
    let d = tempfile::tempdir().unwrap();
    let cfg = small_config(d.path(), 10.0, 2.0);
    let out = d.path().join("s");
    let o = kinemix(&["simulate", "--config", &cfg, "--out", out.to_str().unwrap()], &[]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("abort.kmxs").exists());
}
