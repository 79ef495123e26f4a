use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use netxform::io::{parse_nodes_csv, parse_schedule_csv, parse_trajectory_csv, schedule_csv};
use netxform::Graph;
use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_netxform"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn last_row(csv: &str) -> Vec<f64> {
    let (_, states) = parse_nodes_csv(csv).unwrap();
    states.last().unwrap().iter().copied().collect()
}

const CYCLE4: &str = r#"{"nodes": 4, "edges": [[1, 2], [2, 3], [3, 4], [4, 1]]}"#;
const SWAP: &str = "[[0,1,0,0],[1,0,0,0],[0,0,0,1],[0,0,1,0]]";

#[test]
fn check_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cons = write(
        dir.path(),
        "cons.json",
        &format!(
            r#"{{"graph": {CYCLE4}, "target": [[0.25,0.25,0.25,0.25],[0.25,0.25,0.25,0.25],[0.25,0.25,0.25,0.25],[0.25,0.25,0.25,0.25]]}}"#
        ),
    );
    let o = run(&["check", "--config", cons.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let report: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["reason"], "determinant is zero");
    assert_eq!(report["feasible"], false);

    let id = write(
        dir.path(),
        "id.json",
        &format!(r#"{{"graph": {CYCLE4}, "target": [[1,0,0,0],[0,1,0,0],[0,0,1,0],[0,0,0,1]]}}"#),
    );
    assert_eq!(code(&run(&["check", "--config", id.to_str().unwrap()])), 0);

    let missing = write(dir.path(), "missing.json", &format!(r#"{{"graph": {CYCLE4}}}"#));
    let o = run(&["check", "--config", missing.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("target"), "{}", stderr(&o));

    let disconnected = write(
        dir.path(),
        "disc.json",
        r#"{"graph": {"nodes": 2}, "target": [[1,0],[0,1]]}"#,
    );
    let o = run(&["check", "--config", disconnected.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stdout).contains("disconnected"));

    assert_eq!(code(&run(&["check", "--config", "/nonexistent/config.json"])), 1);
    assert_eq!(code(&run(&["frobnicate"])), 1);
}

#[test]
fn solve_scalar_and_identity() {
    let dir = tempfile::tempdir().unwrap();
    let scalar = write(
        dir.path(),
        "scalar.json",
        r#"{"graph": {"nodes": 1}, "target": [[2.0]]}"#,
    );
    let out = dir.path().join("scalar");
    let o = run(&[
        "solve",
        "--config",
        scalar.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let sol: Value = serde_json::from_str(&fs::read_to_string(out.join("solution.json")).unwrap()).unwrap();
    assert_eq!(sol["converged"], true);
    let ln2 = 2f64.ln();
    assert!((sol["cost"].as_f64().unwrap() - 0.5 * ln2 * ln2).abs() < 1e-8);
    assert!((sol["lambda0"][0][0].as_f64().unwrap() + ln2).abs() < 1e-6);
    for f in ["schedule.csv", "transition.csv", "costate.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }

    let id = write(
        dir.path(),
        "id.json",
        r#"{"graph": {"nodes": 3, "edges": [[1,2],[2,3]]}, "target": [[1,0,0],[0,1,0],[0,0,1]]}"#,
    );
    let out = dir.path().join("id");
    assert_eq!(
        code(&run(&[
            "solve",
            "--config",
            id.to_str().unwrap(),
            "--out",
            out.to_str().unwrap()
        ])),
        0
    );
    let sol: Value = serde_json::from_str(&fs::read_to_string(out.join("solution.json")).unwrap()).unwrap();
    assert_eq!(sol["cost"].as_f64().unwrap(), 0.0);
    let mask = Graph::path(3).unwrap().mask();
    let sched = parse_schedule_csv(&fs::read_to_string(out.join("schedule.csv")).unwrap(), &mask).unwrap();
    assert!(sched.samples().all(|(_, w)| w.iter().all(|&v| v == 0.0)));
}

#[test]
fn solve_infeasible_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let odd = write(
        dir.path(),
        "odd.json",
        &format!(r#"{{"graph": {CYCLE4}, "target": [[0,1,0,0],[1,0,0,0],[0,0,1,0],[0,0,0,1]]}}"#),
    );
    let o = run(&[
        "solve",
        "--config",
        odd.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("determinant is negative"));
}

#[test]
fn swap_without_waypoints_warns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "swap.json",
        &format!(r#"{{"graph": {CYCLE4}, "target": {SWAP}, "tf": 2.0, "solver": {{"restarts": 1, "max_iter": 5}}}}"#),
    );
    let o = run(&[
        "solve",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
        "--steps",
        "40",
    ]);
    let err = stderr(&o);
    assert!(err.contains("warning") && err.contains("s = 0.5"), "{err}");
    assert!(matches!(code(&o), 0 | 3));
    assert!(dir.path().join("o/solution.json").exists());
}

#[test]
fn solve_swap_then_simulate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "swap.json",
        &format!(
            r#"{{"graph": {CYCLE4}, "target": {SWAP}, "tf": 2.0, "waypoints": [[[0,1,0,0],[0,0,1,0],[1,0,0,0],[0,0,0,1]]]}}"#
        ),
    );
    let out = dir.path().join("swap");
    let o = run(&[
        "solve",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(!stderr(&o).contains("warning"), "{}", stderr(&o));

    let schedule = out.join("schedule.csv");
    let text = fs::read_to_string(&schedule).unwrap();
    let mask = Graph::cycle(4).unwrap().mask();
    assert_eq!(schedule_csv(&parse_schedule_csv(&text, &mask).unwrap()), text);

    let o = run(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--schedule",
        schedule.to_str().unwrap(),
        "--xi",
        "1,2,3,4",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let fin = last_row(&String::from_utf8_lossy(&o.stdout));
    for (v, e) in fin.iter().zip([2.0, 1.0, 4.0, 3.0]) {
        assert!((v - e).abs() < 1e-4, "{fin:?}");
    }

    // Unit initial states reproduce the columns of the final transition matrix.
    let (_, states) = parse_trajectory_csv(&fs::read_to_string(out.join("transition.csv")).unwrap()).unwrap();
    let x_final = states.last().unwrap();
    for k in 0..4 {
        let mut e = ["0"; 4];
        e[k] = "1";
        let sim = dir.path().join(format!("sim{k}"));
        let o = run(&[
            "simulate",
            "--config",
            cfg.to_str().unwrap(),
            "--schedule",
            schedule.to_str().unwrap(),
            "--xi",
            &e.join(","),
            "--out",
            sim.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0);
        let col = last_row(&fs::read_to_string(sim.join("nodes.csv")).unwrap());
        for i in 0..4 {
            assert!((col[i] - x_final[(i, k)]).abs() < 1e-7, "column {k}");
        }
    }

    let xi_file = write(dir.path(), "xi.txt", "[1, 2, 3, 4]\n");
    let o = run(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--schedule",
        schedule.to_str().unwrap(),
        "--xi-file",
        xi_file.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);

    let path_cfg = write(
        dir.path(),
        "path.json",
        r#"{"graph": {"nodes": 4, "edges": [[1,2],[2,3],[3,4]]}, "target": [[1]]}"#,
    );
    let o = run(&[
        "simulate",
        "--config",
        path_cfg.to_str().unwrap(),
        "--schedule",
        schedule.to_str().unwrap(),
        "--xi",
        "1,2,3,4",
    ]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("does not match"), "{}", stderr(&o));

    let o = run(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--schedule",
        schedule.to_str().unwrap(),
        "--xi",
        "1,2",
    ]);
    assert_eq!(code(&o), 1);
}

#[test]
fn simulate_zero_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "g.json", r#"{"graph": {"nodes": 2, "edges": [[1, 2]]}}"#);
    let sched = write(
        dir.path(),
        "s.csv",
        "t,w_1_1,w_1_2,w_2_1,w_2_2\n0,0,0,0,0\n0.5,0,0,0,0\n1,0,0,0,0\n",
    );
    let o = run(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--schedule",
        sched.to_str().unwrap(),
        "--xi",
        "1,2",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(last_row(&String::from_utf8_lossy(&o.stdout)), vec![1.0, 2.0]);
}

#[test]
fn solution_json_is_thread_independent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "p.json",
        r#"{"graph": {"nodes": 3, "edges": [[1,2],[2,3]]}, "target": [[0.6,0.3,0.1],[0.3,0.4,0.3],[0.1,0.3,0.6]], "solver": {"seed": 5}}"#,
    );
    let mut outputs = Vec::new();
    for threads in ["1", "2", "4"] {
        let out = dir.path().join(format!("t{threads}"));
        let o = bin()
            .env("NETXFORM_THREADS", threads)
            .args([
                "solve",
                "--config",
                cfg.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
            ])
            .output()
            .unwrap();
        assert!(matches!(code(&o), 0 | 3), "{}", stderr(&o));
        outputs.push(fs::read(out.join("solution.json")).unwrap());
    }
    assert!(outputs.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn scenario_swap_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("swap");
    let o = run(&["scenario", "swap", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let fin = last_row(&fs::read_to_string(out.join("nodes.csv")).unwrap());
    for (v, e) in fin.iter().zip([2.0, 1.0, 4.0, 3.0]) {
        assert!((v - e).abs() < 1e-4, "{fin:?}");
    }
    for f in ["phase_1.csv", "phase_2.csv", "solution.json", "schedule.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn scenario_densify_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("densify");
    let o = run(&["scenario", "densify", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(out.join("errors.csv")).unwrap();
    assert!(text.starts_with("t,err_sparse,err_dense,err_synth\n"));
    let rows: Vec<Vec<f64>> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    let first = &rows[0];
    assert!(first[1] == first[2] && first[2] == first[3]);
    let last = rows.last().unwrap();
    assert!(last[3] <= last[1], "synthesized {} vs sparse {}", last[3], last[1]);
}

#[test]
fn scenario_usage_errors() {
    assert_eq!(code(&run(&["scenario", "bogus"])), 1);
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.json", r#"{"pairs": [[1, 2]], "waypoints": []}"#);
    let o = run(&[
        "scenario",
        "swap",
        "--config",
        bad.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let typo = write(dir.path(), "typo.json", r#"{"tff": 1.0}"#);
    assert_eq!(
        code(&run(&["scenario", "densify", "--config", typo.to_str().unwrap()])),
        1
    );
}
