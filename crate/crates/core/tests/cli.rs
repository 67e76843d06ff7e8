use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &[&str] = &[
    "--users",
    "300",
    "--cascades",
    "2000",
    "--embed_dim",
    "8",
    "--grid_points",
    "4",
    "--hidden",
    "8",
    "--latent",
    "4",
    "--batch_size",
    "16",
    "--max_epochs",
    "3",
];

fn vnoip(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vnoip"))
        .args(args)
        .env("VNOIP_DATA_DIR", dir)
        .output()
        .expect("binary runs")
}

fn run_ok(dir: &Path, cmd: &str, extra: &[&str]) -> Vec<Value> {
    let mut args = vec![cmd];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    let out = vnoip(dir, &args);
    assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap_or_else(|e| panic!("{cmd}: {l:?}: {e}")))
        .collect()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

#[test]
fn full_workflow_emits_json_lines() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let gen = run_ok(d, "gen", &[]);
    assert_eq!(gen[0]["command"], "gen");
    assert_eq!(gen[0]["cascades"], 2000);
    let eligible = gen[0]["eligible"].as_u64().unwrap();
    assert!(eligible > 10, "{eligible}");

    let embed = run_ok(d, "embed", &[]);
    assert_eq!(embed.last().unwrap()["dim"], 8);
    assert!(d.join("global.emb").exists());

    let train = run_ok(d, "train", &[]);
    let epochs: Vec<&Value> = train
        .iter()
        .filter(|v| v.get("val_msle").is_some() && v.get("epoch").is_some())
        .collect();
    assert!(!epochs.is_empty() && epochs.len() <= 3);
    assert!(d.join("model.ckpt").exists() && d.join("history.jsonl").exists());
    let saved = std::fs::read_to_string(d.join("config.txt")).unwrap();
    assert!(saved.lines().any(|l| l.replace(' ', "") == "hidden=8"), "{saved}");

    let eval = run_ok(d, "eval", &[]);
    let report = eval.iter().find(|v| v.get("msle").is_some()).expect("eval summary");
    assert!(report["msle"].as_f64().unwrap().is_finite());
    assert_eq!(report["config_match"], true);
    assert!(d.join("predictions.jsonl").exists());

    run_ok(d, "plot", &[]);
    for f in ["loss_curve.csv", "loss_curve.svg", "trends.csv", "trends.svg"] {
        assert!(d.join(f).exists(), "{f}");
    }

    // a changed setting is reported, not silently accepted
    let eval = run_ok(d, "eval", &["--lambda1", "0.5"]);
    let report = eval.iter().find(|v| v.get("msle").is_some()).unwrap();
    assert_eq!(report["config_match"], false);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let file = d.join("run.conf");
    std::fs::write(&file, "# small corpus\nusers = 250\ncascades = 400\n").unwrap();
    let out = vnoip(d, &["gen", "--config", file.to_str().unwrap(), "--cascades", "300"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["users"], 250);
    assert_eq!(v["cascades"], 300);
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let out = vnoip(d, &["frobnicate"]);
    assert_eq!(code(&out), 2);

    let out = vnoip(d, &["gen", "--no_such_key", "1"]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));

    let out = vnoip(d, &["gen", "--t_o", "30", "--t_p", "20"]);
    assert_eq!(code(&out), 3);

    let bad = d.join("bad.conf");
    std::fs::write(&bad, "users = 10\nthis line has no equals sign\n").unwrap();
    let out = vnoip(d, &["gen", "--config", bad.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains('2'));

    let out = vnoip(d, &["eval"]);
    assert_eq!(code(&out), 5);
    assert!(String::from_utf8_lossy(&out.stderr).contains("not found"));

    let out = vnoip(d, &["gen", "--users", "300", "--cascades", "500"]);
    assert_eq!(code(&out), 0);
    std::fs::write(d.join("model.ckpt"), b"not a checkpoint").unwrap();
    let out = vnoip(d, &["eval", "--embed_dim", "8", "--users", "300", "--cascades", "500"]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = vnoip(dir.path(), &["gradcheck"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let lines: Vec<Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert!(lines.len() > 30);
    let checks: Vec<&Value> = lines.iter().filter(|v| v.get("passed").is_some()).collect();
    assert!(checks.iter().all(|v| v["passed"] == true));
}
