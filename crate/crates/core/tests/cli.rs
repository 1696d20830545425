use std::path::Path;
use std::process::{Command, Output};

fn promptseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_promptseg")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&promptseg(&["frobnicate"])), 2);
    assert_eq!(code(&promptseg(&["generate"])), 2);
    assert_eq!(code(&promptseg(&["--help"])), 0);
    let dir = tempfile::tempdir().unwrap();
    let out = promptseg(&["train", "--data", s(dir.path()), "--out", s(dir.path()), "--strategy", "three_set"]);
    assert_eq!(code(&out), 2);
    assert_eq!(code(&promptseg(&["generate", "--out", s(dir.path()), "--scale", "-1"])), 2);
}

#[test]
fn missing_inputs_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let nowhere = dir.path().join("nowhere");
    let out = promptseg(&["train", "--data", s(&nowhere), "--out", s(&dir.path().join("run"))]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    let out = promptseg(&["eval", "--checkpoints", s(dir.path()), "--data", s(&nowhere), "--out", s(&dir.path().join("r"))]);
    assert_eq!(code(&out), 3);
}

#[test]
fn generate_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = promptseg(&["generate", "--out", s(&data), "--scale", "0.02", "--seed", "4"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("manifest.jsonl"));
    // Existing output needs --force.
    assert_eq!(code(&promptseg(&["generate", "--out", s(&data), "--scale", "0.02", "--seed", "4"])), 2);
    assert_eq!(code(&promptseg(&["generate", "--out", s(&data), "--scale", "0.02", "--seed", "4", "--force"])), 0);
    let manifests = std::fs::read_to_string(data.join("run_manifest.jsonl")).unwrap();
    assert_eq!(manifests.lines().count(), 2);

    let run = dir.path().join("runs/two");
    let train = |extra: &[&str]| {
        let mut args = vec!["train", "--data", s(&data), "--out", s(&run), "--epochs", "1", "--samples-per-epoch", "4", "--quiet"];
        args.extend_from_slice(extra);
        promptseg(&args)
    };
    let out = train(&[]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("checkpoint.ckpt").is_file());
    assert_eq!(std::fs::read_to_string(run.join("metrics.jsonl")).unwrap().lines().count(), 1);
    assert_eq!(code(&train(&[])), 2);
    let out = train(&["--force", "--text-mode", "frozen"]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));

    let report = dir.path().join("report");
    let out = promptseg(&["report", "--checkpoints", s(&dir.path().join("runs")), "--data", s(&data), "--out", s(&report)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(report.join("report.csv")).unwrap();
    assert!(csv.starts_with(promptseg::eval_harness::CSV_HEADER));
    assert!(csv.lines().skip(1).all(|l| l.starts_with("two_set,complete,")));
    assert!(report.join("charts/complete.png").is_file());
    let again = promptseg(&["eval", "--checkpoints", s(&dir.path().join("runs")), "--data", s(&data), "--out", s(&report)]);
    assert_eq!(code(&again), 2);
}

#[test]
fn partial_config_files_override_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let scene = dir.path().join("scene.toml");
    std::fs::write(&scene, "nuclei_per_patch = [6, 6]\n").unwrap();
    assert_eq!(code(&promptseg(&["generate", "--out", s(&data), "--scale", "0.02", "--config", s(&scene)])), 0);
    let cfg = dir.path().join("train.toml");
    std::fs::write(&cfg, "regime = \"incomplete\"\n[model]\nprompt_injection = \"carry\"\n[model.embedding]\nprojection_activation = false\n").unwrap();
    let run = dir.path().join("run");
    let out = promptseg(&[
        "train", "--data", s(&data), "--out", s(&run), "--config", s(&cfg), "--strategy", "free_text",
        "--epochs", "1", "--samples-per-epoch", "2", "--quiet",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let manifest: serde_json::Value =
        serde_json::from_str(std::fs::read_to_string(run.join("run_manifest.jsonl")).unwrap().trim()).unwrap();
    let c = &manifest["config"];
    assert_eq!(c["regime"], "incomplete");
    assert_eq!(c["model"]["prompt_injection"], "carry");
    assert_eq!(c["model"]["embedding"]["projection_activation"], false);
    assert_eq!(c["model"]["embedding"]["token_dim"], c["model"]["encoder_dim"]);

    std::fs::write(&cfg, "epochs = \"many\"\n").unwrap();
    let out = promptseg(&["train", "--data", s(&data), "--out", s(&run), "--config", s(&cfg), "--force"]);
    assert_eq!(code(&out), 2);
}
