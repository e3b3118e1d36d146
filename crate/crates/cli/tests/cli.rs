mod common;

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::time::Duration;

use common::{stderr, stdout, video_r4};
use serde_json::Value;
use videor4_cli::captioner::HttpCaptioner;
use videor4_cli::{resolve_config, GlobalArgs};
use videor4_core::corpus::Frame;
use videor4_core::trajectory::{CaptionerClient, Trajectory};

fn setup(args: &[&str]) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let o = video_r4(dir.path(), &[&["generate-corpus"], args].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    dir
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = video_r4(dir, args);
    assert_eq!(o.status.code(), Some(0), "{args:?}: {}", stderr(&o));
    stdout(&o)
}

fn json(path: PathBuf) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn match_reports_counts_and_is_deterministic() {
    let dir = setup(&["--images", "0", "--videos", "10", "--unmatchable", "3"]);
    let out = ok(dir.path(), &["match"]);
    assert!(out.contains("matched=7 unmatched=3"), "{out}");
    let first = fs::read(dir.path().join("out/evidence.jsonl")).unwrap();
    ok(dir.path(), &["match"]);
    assert_eq!(
        fs::read(dir.path().join("out/evidence.jsonl")).unwrap(),
        first
    );
    let summary = json(dir.path().join("out/match_summary.json"));
    assert_eq!(summary["command"], "match");
    assert_eq!(summary["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn empty_question_file_is_an_input_error() {
    let dir = setup(&["--videos", "2", "--images", "0", "--unmatchable", "0"]);
    fs::write(dir.path().join("corpus/instances.jsonl"), "").unwrap();
    let o = video_r4(dir.path(), &["match"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no questions"), "{}", stderr(&o));
}

#[test]
fn missing_inputs_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["match"][..],
        &["synthesize"],
        &["train"],
        &["report"],
        &["eval", "--predictions", "p.jsonl"],
    ] {
        let o = video_r4(dir.path(), args);
        assert_eq!(o.status.code(), Some(1), "{args:?}: {}", stderr(&o));
    }
    let o = video_r4(dir.path(), &["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn synthesis_is_repeatable_and_validation_quarantines_corruption() {
    let dir = setup(&["--images", "2", "--videos", "4", "--unmatchable", "1"]);
    ok(dir.path(), &["match"]);
    let out = ok(dir.path(), &["synthesize"]);
    assert!(out.contains("quarantined=0"), "{out}");
    let path = dir.path().join("out/trajectories.jsonl");
    let first = fs::read(&path).unwrap();
    assert_eq!(
        fs::read_to_string(dir.path().join("out/quarantine.jsonl")).unwrap(),
        ""
    );
    ok(dir.path(), &["synthesize"]);
    assert_eq!(fs::read(&path).unwrap(), first);
    ok(dir.path(), &["validate"]);

    // break the final answer of one trajectory
    let text = String::from_utf8(first).unwrap();
    let mut ts: Vec<Trajectory> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let last = ts[0].turns.len() - 1;
    ts[0].turns[last].final_answer = Some("definitely wrong".into());
    let corrupt = dir.path().join("corrupt.jsonl");
    let body: String = ts
        .iter()
        .map(|t| serde_json::to_string(t).unwrap() + "\n")
        .collect();
    fs::write(&corrupt, body).unwrap();
    let o = video_r4(dir.path(), &["validate", "--input", "corrupt.jsonl"]);
    assert_eq!(o.status.code(), Some(1));
    let q = fs::read_to_string(dir.path().join("out/validate_quarantine.jsonl")).unwrap();
    assert_eq!(q.lines().count(), 1);
    let entry: Value = serde_json::from_str(q.lines().next().unwrap()).unwrap();
    assert_eq!(entry["trajectory"]["id"], ts[0].id.as_str());
    assert_eq!(entry["violations"][0]["kind"], "incorrect");

    fs::write(&corrupt, "{not json\n").unwrap();
    let o = video_r4(dir.path(), &["validate", "--input", "corrupt.jsonl"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("corrupt.jsonl"), "{}", stderr(&o));
}

#[test]
fn train_reports_every_stage_and_ablation() {
    let dir = setup(&[]);
    let out = ok(
        dir.path(),
        &[
            "train",
            "--seed",
            "3",
            "--ablation",
            "crp_sft,rl_c",
            "--ablation",
            "crp_sft",
        ],
    );
    assert!(out.contains("drp_sft+rl_d+crp_sft+rl_c"), "{out}");
    let report = json(dir.path().join("out/train_report.json"));
    let runs = report["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 3);
    assert_eq!(runs[0]["report"]["stages"].as_array().unwrap().len(), 4);
    assert_eq!(runs[1]["report"]["stages"].as_array().unwrap().len(), 2);
    assert_eq!(runs[2]["report"]["stages"].as_array().unwrap().len(), 1);
    assert_eq!(report["seed"], 3);
    assert!(dir.path().join("out/policy.ckpt").is_file());

    let o = video_r4(dir.path(), &["train", "--ablation", "rl_c,crp_sft"]);
    assert_eq!(o.status.code(), Some(1));
    let o = video_r4(dir.path(), &["train", "--ablation", "sft"]);
    assert_eq!(o.status.code(), Some(1));

    ok(
        dir.path(),
        &["eval", "--seed", "3", "--checkpoint", "out/policy.ckpt"],
    );
    let preds = fs::read_to_string(dir.path().join("out/predictions.jsonl")).unwrap();
    assert_eq!(
        preds.lines().count(),
        report["eval_questions"].as_array().unwrap().len()
    );
    let summary = ok(dir.path(), &["report", "--seed", "3"]);
    assert!(
        summary.contains("train:") && summary.contains("eval:"),
        "{summary}"
    );
}

#[test]
fn plan_files_drive_training() {
    let dir = setup(&["--images", "2", "--videos", "6", "--unmatchable", "0"]);
    let plan = r#"{"seed": 0, "stages": [
        {"stage": "crp_sft", "filter": "mixed", "objective": "sft", "steps": 3, "learning_rate": 0.5, "batch_size": 1}
    ]}"#;
    fs::write(dir.path().join("plan.json"), plan).unwrap();
    ok(dir.path(), &["train", "--plan", "plan.json"]);
    let report = json(dir.path().join("out/train_report.json"));
    let stages = report["runs"][0]["report"]["stages"].as_array().unwrap();
    assert_eq!(stages.len(), 1);
    assert_eq!(stages[0]["loss_curve"].as_array().unwrap().len(), 3);

    fs::write(
        dir.path().join("plan.json"),
        plan.replace("mixed", "single_tool"),
    )
    .unwrap();
    let o = video_r4(dir.path(), &["train", "--plan", "plan.json"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn perfect_predictions_score_one() {
    let dir = setup(&["--images", "1", "--videos", "3"]);
    let instances = fs::read_to_string(dir.path().join("corpus/instances.jsonl")).unwrap();
    let preds: String = instances
        .lines()
        .map(|l| {
            let q: Value = serde_json::from_str(l).unwrap();
            serde_json::json!({"id": q["id"], "prediction": q["answers"][0]}).to_string() + "\n"
        })
        .collect();
    fs::write(dir.path().join("preds.jsonl"), preds).unwrap();
    let out = ok(dir.path(), &["eval", "--predictions", "preds.jsonl"]);
    let report = json(dir.path().join("out/eval_report.json"));
    for k in ["anls", "em", "macro_f1"] {
        assert_eq!(report[k], 1.0, "{out}");
    }
    assert!(fs::read_to_string(dir.path().join("out/eval_report.txt"))
        .unwrap()
        .contains("mean"));

    fs::write(
        dir.path().join("preds.jsonl"),
        "{\"id\":\"ghost\",\"prediction\":\"x\"}\n",
    )
    .unwrap();
    let o = video_r4(dir.path(), &["eval", "--predictions", "preds.jsonl"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn qc_export_replays_the_log() {
    let dir = setup(&["--images", "0", "--videos", "3", "--unmatchable", "0"]);
    ok(dir.path(), &["match"]);
    ok(dir.path(), &["synthesize", "--template", "locate_read"]);
    let out = ok(dir.path(), &["qc-export"]);
    assert!(
        out.contains("exported=0") && out.contains("pending=3"),
        "{out}"
    );
    assert!(!dir.path().join("out/decisions.jsonl").exists());
    let manifest = json(dir.path().join("out/curated/manifest.json"));
    assert_eq!(manifest["counts"]["pending"], 3);
}

#[test]
fn config_precedence_is_file_then_env_then_flags() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("c.toml");
    fs::write(
        &file,
        "[train]\nseed = 5\ngrid = 3\n[paths]\nout = \"from-file\"\n",
    )
    .unwrap();
    let global = GlobalArgs {
        config: Some(file.clone()),
        ..GlobalArgs::default()
    };
    let cfg = resolve_config(&global, []).unwrap();
    assert_eq!((cfg.train.seed, cfg.train.grid), (5, 3));
    let env = [("VIDEOR4_TRAIN__SEED".to_string(), "7".to_string())];
    let cfg = resolve_config(&global, env.clone()).unwrap();
    assert_eq!(cfg.train.seed, 7);
    let flags = GlobalArgs {
        seed: Some(9),
        out: Some("flag-out".into()),
        ..global.clone()
    };
    let cfg = resolve_config(&flags, env).unwrap();
    assert_eq!(cfg.train.seed, 9);
    assert_eq!(cfg.paths.out, PathBuf::from("flag-out"));

    fs::write(&file, "[train]\nseed = -1\n").unwrap();
    assert!(resolve_config(&global, []).is_err());
    fs::write(&file, "[captioner]\nkind = \"http\"\n").unwrap();
    assert!(resolve_config(&global, []).is_err());
}

#[test]
fn unreachable_captioner_fails_synthesis() {
    let dir = setup(&["--images", "0", "--videos", "2", "--unmatchable", "0"]);
    ok(dir.path(), &["match"]);
    // grab a free port, then close it
    let port = TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    fs::write(
        dir.path().join("c.toml"),
        format!("[captioner]\nkind = \"http\"\nendpoint = \"http://127.0.0.1:{port}/caption\"\ntimeout_secs = 2\n"),
    )
    .unwrap();
    let o = video_r4(dir.path(), &["synthesize", "--config", "c.toml"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("unavailable"), "{}", stderr(&o));
}

/// Answers one request with `{"text": ...}` echoing the task, and returns
/// the request body.
fn one_shot_server() -> (String, std::thread::JoinHandle<Value>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/caption", listener.local_addr().unwrap());
    let handle = std::thread::spawn(move || {
        let (mut stream, _) = listener.accept().unwrap();
        let mut reader = BufReader::new(stream.try_clone().unwrap());
        let mut len = 0;
        loop {
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            if line == "\r\n" {
                break;
            }
            if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                len = v.trim().parse().unwrap();
            }
        }
        let mut body = vec![0; len];
        reader.read_exact(&mut body).unwrap();
        let req: Value = serde_json::from_slice(&body).unwrap();
        let reply =
            serde_json::json!({"text": format!("caption for {}", req["task"].as_str().unwrap())})
                .to_string();
        write!(
            stream,
            "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{reply}",
            reply.len()
        )
        .unwrap();
        req
    });
    (url, handle)
}

#[test]
fn http_captioner_speaks_json() {
    let frame = Frame::from_fn(0, 4, 4, |x, y| (x * 16 + y) as u8).unwrap();
    let (url, server) = one_shot_server();
    let client = HttpCaptioner::new(url, Duration::from_secs(5));
    assert_eq!(
        client.caption_video(&[&frame]).unwrap(),
        "caption for video"
    );
    let req = server.join().unwrap();
    assert_eq!(req["frames"][0]["width"], 4);
    assert!(!req["frames"][0]["png"].as_str().unwrap().is_empty());

    let (url, server) = one_shot_server();
    let client = HttpCaptioner::new(url, Duration::from_secs(5));
    assert_eq!(client.think("why").unwrap(), "caption for think");
    assert_eq!(server.join().unwrap()["context"], "why");
}
