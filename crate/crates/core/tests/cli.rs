use std::path::Path;
use std::process::{Command, Output};

fn oseen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_oseen")).args(args).env_remove("OSEEN_THREADS").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn usage_errors_exit_64() {
    assert_eq!(oseen(&["--frobnicate"]).status.code(), Some(64));
    assert_eq!(oseen(&["solve", "--dim", "2"]).status.code(), Some(64));
    assert_eq!(oseen(&["kernels", "eval", "--dim", "3", "--x", "1,2"]).status.code(), Some(64));
    assert_eq!(oseen(&["solve", "--dim", "3", "--datum", "anisotropic", "--epsilon", "0.1", "--out", "/tmp/never"]).status.code(), Some(64));
    let o = Command::new(env!("CARGO_BIN_EXE_oseen")).args(["verify", "sphere"]).env("OSEEN_THREADS", "many").output().unwrap();
    assert_eq!(o.status.code(), Some(64));
}

#[test]
fn bad_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("run.conf");
    std::fs::write(&p, "grid.n_radial = 32\ngrid.colour = blue\n").unwrap();
    let o = oseen(&["--config", p.to_str().unwrap(), "solve", "--dim", "2", "--datum", "rotational", "--epsilon", "0.05", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(64));
    assert!(String::from_utf8_lossy(&o.stderr).contains("grid.colour"));
}

#[test]
fn verify_sphere_passes() {
    for d in ["2", "3", "4"] {
        let o = oseen(&["verify", "sphere", "--dim", d, "--threads", "1"]);
        assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
        assert!(stdout(&o).lines().filter(|l| l.ends_with("PASS")).count() >= 5);
    }
    // a rule too coarse for the tolerance fails the check
    assert_eq!(oseen(&["verify", "sphere", "--dim", "3", "--order", "4", "--tol", "1e-15"]).status.code(), Some(1));
}

#[test]
fn kernel_csv_is_deterministic() {
    let args = ["kernels", "eval", "--dim", "3", "--x", "0.5,-1,2", "--t", "0.7", "--kernel", "f"];
    let a = oseen(&args);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(stdout(&a), stdout(&oseen(&args)));
    let text = stdout(&a);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("j,h,k,x1,x2,x3,t,value"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 27);
    let v = rows[5].rsplit(',').next().unwrap();
    assert_eq!(v.split('e').next().unwrap().chars().filter(|c| c.is_ascii_digit()).count(), 17);
}

#[test]
fn highd_prediction_is_rejected() {
    let o = oseen(&["compare", "--profile", "nowhere/U.csv", "--prediction", "highd"]);
    assert_eq!(o.status.code(), Some(64));
}

#[test]
fn report_needs_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(oseen(&["report", dir.path().to_str().unwrap()]).status.code(), Some(1));
}

fn small_config(dir: &Path) -> String {
    let p = dir.join("small.conf");
    std::fs::write(
        &p,
        "grid.r_min = 0.05\ngrid.r_max = 400\ngrid.n_radial = 32\ngrid.n_angular = 16\nquad.time_nodes = 6\nquad.panel_nodes = 4\nquad.ball_dirs = 8\n",
    )
    .unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn solve_compare_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let conf = small_config(dir.path());
    let out = dir.path().join("aniso");
    let o = oseen(&["--config", &conf, "solve", "--dim", "2", "--datum", "anisotropic", "--epsilon", "0.05", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["U.csv", "trace.csv", "summary.json", "decay.svg", "manifest.json"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["grid.n_radial"], "32");
    assert_eq!(manifest["input_hash"].as_str().unwrap().len(), 64);

    let u = out.join("U.csv");
    let o = oseen(&["compare", "--profile", u.to_str().unwrap(), "--prediction", "2d", "--window", "20:200"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("compare_2d.json").is_file() && out.join("compare_2d.svg").is_file());
    let o = oseen(&["compare", "--profile", u.to_str().unwrap(), "--prediction", "3d"]);
    assert_eq!(o.status.code(), Some(64));

    let o = oseen(&["report", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let md = std::fs::read_to_string(dir.path().join("report.md")).unwrap();
    assert!(md.contains("anisotropic") && md.contains("Far-field comparisons"));
    let html = std::fs::read_to_string(dir.path().join("report.html")).unwrap();
    assert!(html.contains("<table>"));
    oseen(&["report", dir.path().to_str().unwrap()]);
    assert_eq!(std::fs::read_to_string(dir.path().join("report.md")).unwrap(), md);
}

#[test]
fn exhausted_iteration_budget_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let conf = small_config(dir.path());
    let o = oseen(&[
        "--config", &conf, "solve", "--dim", "2", "--datum", "anisotropic", "--epsilon", "0.05", "--tol", "1e-300", "--max-iter", "2", "--out",
        dir.path().join("t").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}
