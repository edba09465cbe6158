use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
steps = 12
batch_size = 4
dataset_size = 32
eval_episodes = 8
";

fn mixlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixlab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, extra: &str) -> String {
    let p = dir.join("config.txt");
    fs::write(&p, format!("{TINY}{extra}")).unwrap();
    p.to_str().unwrap().to_string()
}

fn text(o: &Output) -> String {
    format!(
        "{}{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    )
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(mixlab(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        mixlab(&["ablate", "--kind", "depth"]).status.code(),
        Some(2)
    );
    assert_eq!(mixlab(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "learning_rate = 3\n");
    let o = mixlab(&["train", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).contains("learning_rate"), "{}", text(&o));

    let o = mixlab(&[
        "train",
        "--config",
        dir.path().join("missing.txt").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));

    let junk = dir.path().join("junk.bin");
    fs::write(&junk, b"junk").unwrap();
    let o = mixlab(&["eval", "--checkpoint", junk.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).contains("checkpoint"), "{}", text(&o));
}

#[test]
fn train_is_reproducible_and_reportable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "scheme = gated_fusion\n");
    let mut reports = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let o = mixlab(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", text(&o));
        let report = fs::read(out.join("report.md")).unwrap();
        assert_eq!(String::from_utf8_lossy(&o.stdout).as_bytes(), &report[..]);
        reports.push(report);
    }
    assert_eq!(reports[0], reports[1]);

    let a = dir.path().join("a");
    let run_dir = a.join("00-gated-fusion");
    for f in ["config.txt", "record.json", "checkpoint.bin", "loss.csv"] {
        assert!(run_dir.join(f).is_file(), "{f} missing");
    }
    assert_eq!(
        fs::read_to_string(run_dir.join("loss.csv"))
            .unwrap()
            .lines()
            .count(),
        13
    );

    // Rebuilding from the run directory gives the same table.
    fs::remove_file(a.join("report.md")).unwrap();
    let o = mixlab(&["report", "--out", a.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    assert_eq!(fs::read(a.join("report.md")).unwrap(), reports[0]);

    let o = mixlab(&["report", "--out", a.to_str().unwrap(), "--format", "csv"]);
    assert_eq!(o.status.code(), Some(0));
    let csv = fs::read_to_string(a.join("report.csv")).unwrap();
    assert!(
        csv.starts_with("Method,reach_2obj,reach_3obj,reach_4obj,Avg"),
        "{csv}"
    );

    // Evaluating the saved checkpoint under the training config reproduces the scores.
    let o = mixlab(&[
        "eval",
        "--checkpoint",
        run_dir.join("checkpoint.bin").to_str().unwrap(),
        "--config",
        &cfg,
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    assert_eq!(o.stdout, reports[0]);
}

#[test]
fn pilot_is_independent_of_worker_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let mut reports = Vec::new();
    for jobs in ["1", "3"] {
        let out = dir.path().join(format!("pilot{jobs}"));
        let o = mixlab(&[
            "pilot",
            "--config",
            &cfg,
            "--out",
            out.to_str().unwrap(),
            "--jobs",
            jobs,
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", text(&o));
        let runs = fs::read_dir(&out)
            .unwrap()
            .filter(|e| e.as_ref().unwrap().path().is_dir())
            .count();
        assert_eq!(runs, 10);
        reports.push(fs::read_to_string(out.join("report.md")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
    let rows = reports[0]
        .lines()
        .filter(|l| l.starts_with("| ") && !l.starts_with("| Method"))
        .count();
    assert_eq!(rows, 10);
    assert!(reports[0].contains("Mean gain"));
}
