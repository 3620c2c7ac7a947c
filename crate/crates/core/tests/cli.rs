use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_eikorec");

const CONFIG: &str = "\
geometry.radii = 0.1
truth.centers = 0.5 0.8, 0.2 0.2, 0.8 0.4
truth.instants = 0, 0.1, 0.2
physics.beta = 0.1
noise.delta = 0.05
mesh.h = 0.05
mesh.data_h = 0.04
check.shape_fields = 1
";

fn run(dir: &Path, args: &[&str]) -> Output {
    let cfg = dir.join("test.cfg");
    if !cfg.exists() {
        std::fs::write(&cfg, CONFIG).unwrap();
    }
    Command::new(BIN)
        .args(args)
        .arg("--config")
        .arg(&cfg)
        .output()
        .expect("binary runs")
}

#[test]
fn check_gradient_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let ok = run(dir.path(), &["check-gradient"]);
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stdout));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("PASS"));
    let bad = run(dir.path(), &["check-gradient", "--corrupt-flux-sign"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL"));
}

#[test]
fn make_data_is_reproducible_and_seed_dependent() {
    let dir = tempfile::tempdir().unwrap();
    let read = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        let o = run(dir.path(), &["make-data", "--seed", seed, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read_to_string(out.join("observation.txt")).unwrap()
    };
    let a = read("a", "7");
    assert_eq!(a, read("b", "7"));
    assert_ne!(a, read("c", "8"));
    assert!(a.contains("\nseed 7\n"));
}

#[test]
fn invert_instants_from_an_observation_file() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(run(dir.path(), &["make-data", "--out", data.to_str().unwrap()]).status.success());
    let cfg = dir.path().join("file.cfg");
    std::fs::write(
        &cfg,
        format!("{CONFIG}data.observation = {}\n", data.join("observation.txt").display()),
    )
    .unwrap();
    let out = dir.path().join("inv");
    let o = Command::new(BIN)
        .args(["invert-instants", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("iterates.csv")).unwrap();
    assert!(csv.starts_with("k,u1,u2,u3,residual,alpha,error\n"));
    let report = std::fs::read_to_string(out.join("report.txt")).unwrap();
    assert!(report.contains("stop discrepancy"), "{report}");
}

#[test]
fn mesh_forward_and_beta_sweep_write_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = out.to_str().unwrap();
    for (cmd, file) in [("mesh", "mesh.txt"), ("forward", "trace.csv"), ("beta-sweep", "beta_sweep.csv")] {
        let r = run(dir.path(), &[cmd, "--out", o, "--mesh-h", "0.06"]);
        assert!(r.status.success(), "{cmd}: {}", String::from_utf8_lossy(&r.stderr));
        assert!(out.join(file).exists(), "{file}");
    }
    let mesh = eikorec::mesh::load_mesh(out.join("mesh.txt")).unwrap();
    assert_eq!(mesh.num_holes(), 3);
}

#[test]
fn sweep_creates_one_directory_per_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep");
    let r = run(
        dir.path(),
        &["invert-instants", "--out", out.to_str().unwrap(), "--sweep", "--deltas", "0.1,0.05", "--seeds", "1,2"],
    );
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    for d in ["delta_0.1_seed_1", "delta_0.1_seed_2", "delta_0.05_seed_1", "delta_0.05_seed_2"] {
        assert!(out.join(d).join("iterates.csv").exists(), "{d}");
    }
    assert_eq!(std::fs::read_to_string(out.join("sweep.csv")).unwrap().lines().count(), 5);
}

#[test]
fn configuration_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "physics.epsilom = 0.1\n").unwrap();
    let o = Command::new(BIN).args(["forward", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown key `physics.epsilom`"));
    let no_truth = dir.path().join("none.cfg");
    std::fs::write(&no_truth, "mesh.h = 0.1\n").unwrap();
    let o = Command::new(BIN).args(["invert-instants", "--config"]).arg(&no_truth).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}
