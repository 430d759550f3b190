use std::path::Path;
use std::process::{Command, Output};

fn equivar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_equivar"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("config.json");
    let cfg = serde_json::json!({
        "epochs": 2,
        "warmup_epochs": 1,
        "batch_size": 4,
        "centroids": 2,
        "samples_per_class": 2,
        "classes": 4,
        "embed_dim": 16,
        "heads": 2,
        "depth": 1,
        "proj_hidden": 16,
        "proj_dim": 8,
    });
    std::fs::write(&path, cfg.to_string()).unwrap();
    path
}

#[test]
fn missing_config_is_an_io_error() {
    let o = equivar(&["train", "--config", "/nonexistent/config.json"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = equivar(&["augdump", "--modality", "audio", "--seed", "1", "--bogus"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(code(&equivar(&["frobnicate"])), 1);
}

#[test]
fn unknown_config_key_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    std::fs::write(&path, r#"{"epochs": 2, "learning_rate": 0.1}"#).unwrap();
    let o = equivar(&["train", "--config", path.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
}

#[test]
fn augdump_is_reproducible_json_lines() {
    let args = ["augdump", "--modality", "visual", "--seed", "7", "--count", "3"];
    let a = equivar(&args);
    assert_eq!(code(&a), 0);
    assert_eq!(a.stdout, equivar(&args).stdout);
    let lines: Vec<serde_json::Value> = String::from_utf8(a.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
    for (i, l) in lines.iter().enumerate() {
        assert_eq!(l["draw"], i as u64);
        assert_eq!(l["modality"], "visual");
        assert_eq!(l["vector"].as_array().unwrap().len(), 18);
        assert!(l.get("rrc").is_some() && l.get("jitter").is_some());
    }
    let audio = equivar(&["augdump", "--modality", "audio", "--seed", "7"]);
    let line: serde_json::Value = serde_json::from_slice(&audio.stdout).unwrap();
    assert_eq!(line["vector"].as_array().unwrap().len(), 24);
    assert_eq!(code(&equivar(&["augdump", "--modality", "smell", "--seed", "7"])), 1);
}

#[test]
fn losscheck_passes() {
    let o = equivar(&["losscheck"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r["passed"], true);
}

#[test]
fn gradcheck_reports_small_error() {
    let o = equivar(&["gradcheck", "--seed", "3"]);
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(code(&o), 0, "{r}");
    assert!(r["max_rel_err"].as_f64().unwrap() < 1e-4);
}

#[test]
fn train_then_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = dir.path().join("run");
    let o = equivar(&["train", "--config", cfg.to_str().unwrap(), "--out", run.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 4);
    for line in metrics.lines() {
        let r: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["step", "epoch", "lr", "loss_total", "loss_inter", "loss_intra_a", "loss_intra_v"] {
            assert!(r.get(key).is_some(), "{key} missing");
        }
    }
    let ckpt = run.join("step-000004.ckpt");
    let ckpt = ckpt.to_str().unwrap();

    let report = dir.path().join("report.json");
    let o = equivar(&["eval", "--checkpoint", ckpt, "--retrieval", "--gallery", "4", "--held-out", "2", "--out", report.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r.as_array().unwrap().len(), 2);
    assert_eq!(r[0]["direction"], "video_to_audio");
    assert_eq!(r[1]["gallery_size"], 4);
    assert_eq!(std::fs::read(&report).unwrap(), o.stdout);

    let o = equivar(&["eval", "--checkpoint", ckpt, "--probe", "--held-out", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r["source"], "concatenated");
    assert_eq!(r["feature_dim"], 32);

    let bytes = std::fs::read(ckpt).unwrap();
    let cut = dir.path().join("cut.ckpt");
    std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    assert_eq!(code(&equivar(&["eval", "--checkpoint", cut.to_str().unwrap()])), 2);
    assert_eq!(code(&equivar(&["eval", "--checkpoint", ckpt, "--retrieval", "--probe"])), 1);
}

#[test]
fn resume_continues_the_metrics_log() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let full = dir.path().join("full");
    let part = dir.path().join("part");
    let c = cfg.to_str().unwrap();
    assert_eq!(code(&equivar(&["train", "--config", c, "--out", full.to_str().unwrap()])), 0);
    assert_eq!(
        code(&equivar(&["train", "--config", c, "--out", part.to_str().unwrap(), "--checkpoint-every", "2"])),
        0
    );
    // restart the second run from its step-2 checkpoint, truncating the log to match
    let log = std::fs::read_to_string(part.join("metrics.jsonl")).unwrap();
    let head: String = log.lines().take(2).map(|l| format!("{l}\n")).collect();
    std::fs::write(part.join("metrics.jsonl"), head).unwrap();
    let resume = part.join("step-000002.ckpt");
    let o = equivar(&["train", "--config", c, "--out", part.to_str().unwrap(), "--resume", resume.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        std::fs::read(full.join("metrics.jsonl")).unwrap(),
        std::fs::read(part.join("metrics.jsonl")).unwrap()
    );
    assert_eq!(
        std::fs::read(full.join("step-000004.ckpt")).unwrap(),
        std::fs::read(part.join("step-000004.ckpt")).unwrap()
    );
}
