use std::fs;
use std::path::Path;
use std::process::Command;

use cilab::analysis::mean_std;

fn cilab(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_cilab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = fs::read_to_string(path).unwrap();
    assert!(!text.contains('\r'), "{} has CR line endings", path.display());
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    (header, rows)
}

#[test]
fn simulate_writes_trajectories_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim");
    let res = cilab(&[
        "simulate",
        "--n",
        "4,12",
        "--out",
        out.to_str().unwrap(),
        "--set",
        "t_max=1e3",
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));

    let (header, rows) = read_csv(&out.join("trajectory.csv"));
    assert_eq!(header, cilab::experiments::TRAJECTORY_HEADER);
    let mut groups: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    groups.dedup();
    // 3 schemes x 2 sizes x 2 inits x 1 seed.
    assert_eq!(groups.len(), 12);
    for r in &rows {
        let acc: f64 = r[6].parse().unwrap();
        let div: f64 = r[7].parse().unwrap();
        assert!((0.0..=1.0).contains(&acc) && (-1e-12..=1.0 + 1e-12).contains(&div));
        assert!(r[8] == "0" || r[8] == "1");
    }
    for init in ["uniform", "concentrated"] {
        let (header, rows) = read_csv(&out.join(format!("equilibrium_{init}.csv")));
        assert_eq!(header, cilab::experiments::EQUILIBRIUM_HEADER);
        assert_eq!(rows.len(), 3 * (4 + 12));
    }
    let manifest = cilab::manifest::read(&out.join("manifest.json")).unwrap();
    assert_eq!(manifest["command"], "simulate");
    assert_eq!(manifest["seeds"], serde_json::json!([0]));
    assert_eq!(manifest["config"]["t_max"], "1e3");
    assert!(
        manifest["version"].as_str().unwrap().starts_with('v') || !manifest["version"].as_str().unwrap().is_empty()
    );
}

#[test]
fn sweep_summaries_match_raw_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep");
    let res = cilab(&[
        "sweep",
        "--n",
        "3..6,15",
        "--seeds",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let (header, rows) = read_csv(&out.join("sweep.csv"));
    assert_eq!(header, cilab::experiments::SWEEP_HEADER);
    let summaries: Vec<&Vec<String>> = rows.iter().filter(|r| r[0] == "summary").collect();
    assert_eq!(summaries.len(), 5 * 4);
    for s in summaries {
        let acc: Vec<f64> = rows
            .iter()
            .filter(|r| r[0] == "run" && r[1] == s[1] && r[2] == s[2])
            .map(|r| r[4].parse().unwrap())
            .collect();
        assert_eq!(acc.len(), 3);
        let (mean, sd) = mean_std(&acc);
        assert!((mean - s[7].parse::<f64>().unwrap()).abs() < 1e-9);
        assert!((sd - s[8].parse::<f64>().unwrap()).abs() < 1e-9);
    }
    assert!(rows.iter().any(|r| r[1] == cilab::experiments::UNIFORM_BASELINE));
}

#[test]
fn identical_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let res = cilab(&[
            "simulate",
            "--n",
            "6,14",
            "--scheme",
            "market",
            "--seed-list",
            "3",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(res.status.success());
    }
    for f in [
        "trajectory.csv",
        "equilibrium_uniform.csv",
        "equilibrium_concentrated.csv",
    ] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("run.cfg");
    fs::write(&file, "# desk run\nscheme = minority\nn = 7\nseeds = 2\nt_max = 50\n").unwrap();
    let out = dir.path().join("o");
    let res = cilab(&[
        "sweep",
        "--config",
        file.to_str().unwrap(),
        "--n",
        "5",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let manifest = cilab::manifest::read(&out.join("manifest.json")).unwrap();
    assert_eq!(manifest["n_values"], serde_json::json!([5]));
    assert_eq!(manifest["config"]["t_max"], "50");
    assert_eq!(manifest["schemes"], serde_json::json!(["minority"]));
}

#[test]
fn malformed_config_exits_with_code_one() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("bad.cfg");
    fs::write(&file, "scheme = lottery\n").unwrap();
    let res = cilab(&[
        "sweep",
        "--config",
        file.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(1));
    let err = String::from_utf8_lossy(&res.stderr);
    assert_eq!(err.trim().lines().count(), 1, "{err}");
    assert!(err.contains("lottery"));

    let res = cilab(&["simulate", "--set", "no_such_key=1"]);
    assert_eq!(res.status.code(), Some(1));
    let res = cilab(&["simulate", "--set", "t_max=-3"]);
    assert_eq!(res.status.code(), Some(1));
}

#[test]
fn unwritable_output_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let target = blocker.join("sub");
    let res = cilab(&["sweep", "--n", "3", "--seeds", "1", "--out", target.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("sub"));
}

#[test]
fn small_oracle_grid_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("oracle");
    let res = cilab(&[
        "oracle",
        "--out",
        out.to_str().unwrap(),
        "--set",
        "oracle_instances=2",
        "--set",
        "mc_samples=200000",
        "--set",
        "accuracy_n=100",
        "--set",
        "rounds=5000",
    ]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stdout));
    let (header, rows) = read_csv(&out.join("oracle.csv"));
    assert_eq!(header, cilab::experiments::ORACLE_HEADER);
    assert_eq!(rows.iter().filter(|r| r[0] == "rewards_exact_vs_mc").count(), 2 * 3 * 8);
    assert!(rows.iter().all(|r| r[8] == "1"));
}
