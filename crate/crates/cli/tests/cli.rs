use std::path::Path;
use std::process::{Command, Output};

fn ending(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ending")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn gen_data_writes_layout_and_refuses_to_clobber() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("syn");
    let first = ending(&["gen-data", "--seed", "3", "--classes", "4", "--images", "20", "--size", "32", "--out", p(&out)]);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    for dir in ["images", "labels", "splits", "proposals"] {
        assert!(out.join(dir).is_dir(), "{dir}");
    }
    let train = std::fs::read_to_string(out.join("splits/train.txt")).unwrap();
    let val = std::fs::read_to_string(out.join("splits/val.txt")).unwrap();
    assert_eq!((train.lines().count(), val.lines().count()), (16, 4));

    let again = ending(&["gen-data", "--seed", "3", "--classes", "4", "--images", "20", "--size", "32", "--out", p(&out)]);
    assert_eq!(again.status.code(), Some(2));
    let forced = ending(&["gen-data", "--seed", "4", "--classes", "4", "--images", "10", "--size", "32", "--out", p(&out), "--force"]);
    assert!(forced.status.success());
    assert_eq!(std::fs::read_to_string(out.join("splits/train.txt")).unwrap().lines().count(), 8);
}

#[test]
fn config_problems_exit_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    std::fs::write(&cfg, r#"{"train": {"seed": 1}, "unexpected": true}"#).unwrap();
    let out = ending(&["run", "--config", p(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unexpected"));

    std::fs::write(&cfg, r#"{"task": {"split": "4-3"}, "train": {"seed": 1}}"#).unwrap();
    assert_eq!(ending(&["run", "--config", p(&cfg)]).status.code(), Some(2));

    std::fs::write(&cfg, "{}").unwrap();
    let out = ending(&["run", "--config", p(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));
}

#[test]
fn run_eval_and_report_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("voc");
    let gen = ending(&["gen-data", "--seed", "5", "--classes", "4", "--images", "30", "--size", "32", "--out", p(&data)]);
    assert!(gen.status.success());
    let cfg = tmp.path().join("c.json");
    let body = serde_json::json!({
        "dataset": {"kind": "voc", "path": p(&data), "image_size": 32},
        "task": {"split": "2-2", "total_classes": 4},
        "train": {"seed": 2, "epochs_per_step": 1, "batch_size": 4},
        "output": {"root": p(tmp.path()), "run_name": "cli"}
    });
    std::fs::write(&cfg, body.to_string()).unwrap();
    let run = ending(&["run", "--config", p(&cfg), "--override", "labels.tau=0.6"]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let table = String::from_utf8_lossy(&run.stdout);
    assert!(table.contains("0-2") && table.contains("3-4"), "{table}");

    let run_dir = tmp.path().join("cli");
    let resolved: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run_dir.join("resolved_config.json")).unwrap()).unwrap();
    assert_eq!(resolved["labels"]["tau"].as_f64().unwrap() as f32, 0.6);
    assert_eq!(resolved["applied_overrides"][0], "labels.tau=0.6");

    let eval = ending(&["eval", "--run", p(&run_dir)]);
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    let report: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    let saved: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run_dir.join("step_2/metrics.json")).unwrap()).unwrap();
    assert_eq!(report, saved);

    let out = tmp.path().join("rep");
    std::fs::create_dir_all(&out).unwrap();
    let rep = ending(&["report", p(&run_dir), "--plot", "--json", "--out", p(&out)]);
    assert!(rep.status.success(), "{}", String::from_utf8_lossy(&rep.stderr));
    for f in ["report.txt", "report.json", "miou_steps.svg"] {
        assert!(out.join(f).is_file(), "{f}");
    }

    // a run directory without metrics still yields a partial report
    let ghost = tmp.path().join("ghost");
    let partial = ending(&["report", p(&run_dir), p(&ghost), "--out", p(&out)]);
    assert!(!partial.status.success());
    assert!(String::from_utf8_lossy(&partial.stderr).contains("missing metrics"));
    assert!(String::from_utf8_lossy(&partial.stdout).contains("cli"));
}
