use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_grafs");

/// Small enough that a full search takes well under a second per seed.
const SMALL: &str = "\
run.seeds = 0,1,2,3,4
data.generator = spirals
data.n = 200
model.family = mlp
model.width = 8
model.depth = 2
search.total_rounds = 4
search.warmstart_rounds = 1
retrain.epochs = 3
";

/// A cell that reduces to ReLU: `left(left(max(x, 0), x), x)` with
/// identities elsewhere.
const RELU_CELL: &str = r#"{
  "format": "grafs-activation",
  "version": 1,
  "cell": {
    "u1": {"op": "max_zero"},
    "u2": {"op": "identity"},
    "u3": {"op": "identity"},
    "u4": {"op": "identity"},
    "b_bot": {"op": "left"},
    "b_top": {"op": "left"}
  },
  "provenance": {"seed": 0, "epoch": 0, "run_id": "hand", "tool_version": "0.1.0"},
  "formula": "ReLU(x)",
  "formula_exact": "ReLU(x)"
}"#;

fn grafs(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("GRAFS_THREADS")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.conf");
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn grid(o: &Output) -> Vec<(f64, f64)> {
    let text = stdout(o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("x,f"));
    lines
        .map(|l| {
            let (x, f) = l.split_once(',').unwrap();
            (x.parse().unwrap(), f.parse().unwrap())
        })
        .collect()
}

#[test]
fn plot_grid_reproduces_gpt4_hand_values() {
    let o = grafs(&[
        "plot-grid",
        "--activation",
        "F_GPT^4",
        "--lo",
        "-1",
        "--hi",
        "2",
        "--n",
        "4",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = grid(&o);
    let xs: Vec<f64> = rows.iter().map(|r| r.0).collect();
    assert_eq!(xs, vec![-1.0, 0.0, 1.0, 2.0]);
    let expected = [0.0, 0.0, 1.0, 2.9562];
    for ((_, f), e) in rows.iter().zip(expected) {
        assert!((f - e).abs() < 5e-5, "{f} vs {e}");
    }
}

#[test]
fn plot_grid_relu_and_endpoints() {
    let o = grafs(&[
        "plot-grid",
        "--activation",
        "ReLU",
        "--lo",
        "-3",
        "--hi",
        "3",
        "--n",
        "7",
    ]);
    let rows = grid(&o);
    assert_eq!(rows.len(), 7);
    for (x, f) in &rows {
        if *x < 0.0 {
            assert_eq!(*f, 0.0);
        } else {
            assert_eq!(f, x);
        }
    }
    let o = grafs(&[
        "plot-grid",
        "--activation",
        "GELU",
        "--lo",
        "-0.3",
        "--hi",
        "0.7",
        "--n",
        "2",
    ]);
    let xs: Vec<f64> = grid(&o).iter().map(|r| r.0).collect();
    assert_eq!(xs, vec![-0.3, 0.7]);
}

#[test]
fn plot_grid_rejects_bad_ranges() {
    for args in [
        ["--lo", "1", "--hi", "1", "--n", "4"],
        ["--lo", "0", "--hi", "1", "--n", "1"],
    ] {
        let mut full = vec!["plot-grid", "--activation", "ReLU"];
        full.extend(args);
        assert_eq!(grafs(&full).status.code(), Some(2));
    }
    let o = grafs(&["plot-grid", "--activation", "softsign", "--lo", "0", "--hi", "1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn misspelled_key_exits_2_naming_it() {
    let dir = TempDir::new().unwrap();
    let runs = dir.path().join("runs");
    let cfg = write_config(
        dir.path(),
        &format!("run.out = {}\nretrain.epcohs = 3\n", runs.display()),
    );
    for cmd in ["search", "retrain"] {
        let mut args = vec![cmd, "--config", &cfg];
        if cmd == "retrain" {
            args.extend(["--activation", "ReLU"]);
        }
        let o = grafs(&args);
        assert_eq!(o.status.code(), Some(2));
        assert!(stderr(&o).contains("epcohs"), "{}", stderr(&o));
    }
    assert!(!runs.exists());
}

#[test]
fn five_seed_search_writes_five_activations_and_refuses_rerun() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap();
    let o = grafs(&["search", "--config", &cfg, "--out", out_s]);
    assert!(o.status.success(), "{}", stderr(&o));
    for seed in 0..5 {
        let d = out.join(format!("seed-{seed}"));
        let doc = fs::read_to_string(d.join("activation.json")).unwrap();
        assert!(doc.contains("\"config_digest\""));
        assert!(doc.contains("\"tool_version\""));
        let events = fs::read_to_string(d.join("events.jsonl")).unwrap();
        assert_eq!(events.lines().count(), 4);
        let formula = fs::read_to_string(d.join("formula.txt")).unwrap();
        assert!(formula.contains("# config_digest: "));
    }

    let again = grafs(&["search", "--config", &cfg, "--out", out_s]);
    assert_eq!(again.status.code(), Some(2));
    assert!(stderr(&again).contains("--force"));

    // Forced rerun overwrites with identical bytes.
    let before = fs::read(out.join("seed-3/activation.json")).unwrap();
    let events_before = fs::read(out.join("seed-3/events.jsonl")).unwrap();
    let forced = grafs(&["search", "--config", &cfg, "--out", out_s, "--force", "--seed", "3"]);
    assert!(forced.status.success(), "{}", stderr(&forced));
    assert_eq!(fs::read(out.join("seed-3/activation.json")).unwrap(), before);
    assert_eq!(fs::read(out.join("seed-3/events.jsonl")).unwrap(), events_before);
}

#[test]
fn parallel_seeds_match_serial_seeds() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), SMALL.replace("0,1,2,3,4", "5,6,7").as_str());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let serial = grafs(&["search", "--config", &cfg, "--out", a.to_str().unwrap()]);
    assert!(serial.status.success());
    let parallel = Command::new(BIN)
        .args([
            "search",
            "--config",
            &cfg,
            "--out",
            b.to_str().unwrap(),
            "--parallel",
            "3",
        ])
        .env("GRAFS_THREADS", "2")
        .output()
        .unwrap();
    assert!(parallel.status.success(), "{}", stderr(&parallel));
    for seed in 5..8 {
        for file in ["activation.json", "events.jsonl", "formula.txt"] {
            let p = format!("seed-{seed}/{file}");
            assert_eq!(fs::read(a.join(&p)).unwrap(), fs::read(b.join(&p)).unwrap(), "{p}");
        }
    }
    let bad = Command::new(BIN)
        .args([
            "search",
            "--config",
            &cfg,
            "--out",
            dir.path().join("c").to_str().unwrap(),
        ])
        .env("GRAFS_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

fn summary_line(report: &str) -> &str {
    report.lines().last().unwrap()
}

fn seed_rows(report: &str) -> Vec<&str> {
    report
        .lines()
        .filter(|l| l.starts_with(|c: char| c.is_ascii_digit()))
        .collect()
}

#[test]
fn builtin_relu_and_relu_cell_retrain_identically() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &SMALL.replace("0,1,2,3,4", "0,1,2"));
    let cell = dir.path().join("relu-cell.json");
    fs::write(&cell, RELU_CELL).unwrap();
    let out = dir.path().join("out");
    let builtin = grafs(&[
        "retrain",
        "--config",
        &cfg,
        "--activation",
        "ReLU",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(builtin.status.success(), "{}", stderr(&builtin));
    let file = grafs(&[
        "retrain",
        "--config",
        &cfg,
        "--activation",
        cell.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(file.status.success(), "{}", stderr(&file));
    let (rb, rf) = (stdout(&builtin), stdout(&file));
    assert_eq!(seed_rows(&rb).len(), 3);
    assert_eq!(seed_rows(&rb), seed_rows(&rf));
    assert!(summary_line(&rb).starts_with("ReLU | "), "{rb}");
    assert_eq!(
        summary_line(&rb).split_once(" | ").unwrap().1,
        summary_line(&rf).split_once(" | ").unwrap().1
    );
    // Both reports were written, neither overwrote the other.
    let reports: Vec<_> = fs::read_dir(&out).unwrap().collect();
    assert_eq!(reports.len(), 2);
}

#[test]
fn single_seed_retrain_has_no_standard_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    let o = grafs(&[
        "retrain",
        "--config",
        &cfg,
        "--activation",
        "F_RN^4",
        "--seed",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = stdout(&o);
    assert!(summary_line(&report).ends_with("± n/a"), "{report}");
    assert!(report.contains("# config_digest: "));
    let again = grafs(&[
        "retrain",
        "--config",
        &cfg,
        "--activation",
        "F_RN^4",
        "--seed",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(again.status.code(), Some(2));
}

#[test]
fn retrain_with_missing_file_exits_2() {
    let o = grafs(&["retrain", "--activation", "no/such/activation.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("not found"));
}

#[test]
fn schedule_sums_to_104() {
    for (s, e) in [("2", "50"), ("2", "10"), ("4", "100")] {
        let o = grafs(&["schedule", "--start", s, "--end", e]);
        assert!(o.status.success());
        let text = stdout(&o);
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("epoch,drops"));
        let total: usize = lines
            .map(|l| l.split_once(',').unwrap().1.parse::<usize>().unwrap())
            .sum();
        assert_eq!(total, 104);
    }
    assert_eq!(
        grafs(&["schedule", "--start", "5", "--end", "5"]).status.code(),
        Some(2)
    );
}

#[test]
fn gradcheck_passes_and_a_broken_op_is_named() {
    let o = grafs(&["gradcheck"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert_eq!(stdout(&o).lines().count(), 1 + 35);

    let o = grafs(&["gradcheck", "--break-op", "silu"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("unary/silu"), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().filter(|l| l.ends_with("FAIL")).count(), 1);
}

#[test]
fn divergence_exits_1_and_is_reported() {
    let dir = TempDir::new().unwrap();
    let text = SMALL.replace("0,1,2,3,4", "0") + "search.inner.lr = 1e300\nretrain.lr = 1e300\n";
    let cfg = write_config(dir.path(), &text);
    let out = dir.path().join("out");
    let o = grafs(&["search", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let err = fs::read_to_string(out.join("seed-0/error.txt")).unwrap();
    assert!(err.contains("diverged in round"), "{err}");
    assert!(!out.join("seed-0/activation.json").exists());

    let o = grafs(&[
        "retrain",
        "--config",
        &cfg,
        "--activation",
        "ReLU",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let report = stdout(&o);
    assert!(report.contains("0 | diverged"), "{report}");
    assert_eq!(summary_line(&report), "ReLU | diverged");
}
