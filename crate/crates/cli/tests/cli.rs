use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use clq::io::SolutionDoc;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name)
}

fn clq(args: &[&str], input: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clq"))
        .args(args)
        .arg(input)
        .arg("--out")
        .arg(out)
        .output()
        .expect("run clq")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

#[test]
fn solve_finite_writes_solution() {
    let dir = tempfile::tempdir().unwrap();
    let o = clq(
        &["solve-finite"],
        &fixture("example2_case1.json"),
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let doc = SolutionDoc::read(&dir.path().join("solution.json")).unwrap();
    let SolutionDoc::Finite(sol) = doc else {
        panic!("expected finite solution")
    };
    assert_eq!(sol.horizon, 5);
    assert_eq!(sol.ghat.len(), 6);
    assert_eq!(sol.ghat[5][0], 1.0);
}

#[test]
fn diverging_box_exits_2_with_growing_trace() {
    let dir = tempfile::tempdir().unwrap();
    let o = clq(
        &["solve-infinite"],
        &fixture("example1_box34.json"),
        dir.path(),
    );
    assert_eq!(code(&o), 2);
    let text = std::fs::read_to_string(dir.path().join("iterates.csv")).unwrap();
    let rows: Vec<(f64, f64)> = text
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<f64> = l.split(',').map(|v| v.parse().unwrap()).collect();
            (f[1], f[2])
        })
        .collect();
    assert!(rows.len() > 2);
    assert!(rows
        .windows(2)
        .all(|w| w[1].0 >= w[0].0 && w[1].1 >= w[0].1));
    assert!(rows.last().unwrap().0 > 1e6);
    assert!(dir.path().join("solution.json").exists());
}

#[test]
fn bad_transition_row_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(fixture("example2_case2_markov.json")).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["model"]["markov"]["transition"][1][0] = serde_json::json!(0.9);
    let input = dir.path().join("bad.json");
    std::fs::write(&input, v.to_string()).unwrap();
    let o = clq(&["validate"], &input, dir.path());
    assert_eq!(code(&o), 1);
    let all = format!(
        "{}{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(all.contains("row 2"), "{all}");
}

#[test]
fn parse_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("broken.json");
    std::fs::write(&input, "{ \"model\": ").unwrap();
    assert_eq!(code(&clq(&["validate"], &input, dir.path())), 3);
    assert_eq!(
        code(&clq(
            &["solve-finite"],
            &dir.path().join("missing.json"),
            dir.path()
        )),
        3
    );
}

#[test]
fn every_fixture_validates() {
    let dir = tempfile::tempdir().unwrap();
    for name in [
        "example1_box23.json",
        "example1_box34.json",
        "example2_case1.json",
        "example2_infinite.json",
        "example2_case2_markov.json",
        "example3_market.json",
    ] {
        let o = clq(&["validate"], &fixture(name), dir.path());
        assert_eq!(
            code(&o),
            0,
            "{name}: {}",
            String::from_utf8_lossy(&o.stdout)
        );
    }
}

#[test]
fn simulation_outputs_are_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = ["simulate", "--paths", "200", "--seed", "42"];
    for d in [&a, &b] {
        let o = clq(&args, &fixture("example2_case2_markov.json"), d.path());
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["trajectories.csv", "stats.csv", "solution.json"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert_eq!(x, y, "{f}");
    }
    let header = std::fs::read_to_string(a.path().join("trajectories.csv")).unwrap();
    assert!(header.starts_with("path,t,x,u_1,u_2,u_3,scenario"));
}

#[test]
fn frontier_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = [
        "mv-frontier",
        "--paths",
        "2000",
        "--seed",
        "1",
        "--targets",
        "103,106,110",
    ];
    for d in [&a, &b] {
        let o = clq(&args, &fixture("example3_market.json"), d.path());
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let x = std::fs::read_to_string(a.path().join("frontier.csv")).unwrap();
    assert_eq!(
        x,
        std::fs::read_to_string(b.path().join("frontier.csv")).unwrap()
    );
    let lines: Vec<&str> = x.lines().collect();
    assert_eq!(lines[0], "x_d,lambda_star,mean_xT,var_xT,penalty,stderr");
    assert_eq!(lines.len(), 4);
}

#[test]
fn mv_calibrate_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let o = clq(
        &["mv-calibrate", "--initial-state", "2"],
        &fixture("example3_market.json"),
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let path = dir.path().join("solution.json");
    let doc = SolutionDoc::read(&path).unwrap();
    let again = dir.path().join("again.json");
    doc.write(&again).unwrap();
    assert_eq!(SolutionDoc::read(&again).unwrap(), doc);
    let SolutionDoc::Mv(mv) = doc else {
        panic!("expected mv document")
    };
    assert_eq!(mv.initial_state, 2);
    assert!(mv.lambda_star < 0.0);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("threshold wealth at t=0: 106."), "{stdout}");
}

#[test]
fn threshold_report_is_printed() {
    let dir = tempfile::tempdir().unwrap();
    let o = clq(
        &["check-threshold"],
        &fixture("example1_box34.json"),
        dir.path(),
    );
    assert_eq!(code(&o), 0);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("classical threshold: 0.401389"), "{stdout}");
}

#[test]
fn converging_infinite_problem_exits_0() {
    let dir = tempfile::tempdir().unwrap();
    let o = clq(
        &["solve-infinite", "--eps", "1e-10"],
        &fixture("example2_infinite.json"),
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let SolutionDoc::Infinite(fp) = SolutionDoc::read(&dir.path().join("solution.json")).unwrap()
    else {
        panic!("expected infinite solution")
    };
    assert!(fp.converged);
}
