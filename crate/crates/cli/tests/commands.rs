use std::path::Path;
use std::process::Command;

use emagrpo_cli::*;
use emagrpo_core::normalize::Scheme;
use emagrpo_core::protocol::TaskKind;

const BIN: &str = env!("CARGO_BIN_EXE_emagrpo");

const GOLDEN_INPUT: &str = r#"{"id":"a","task":"math_qa","group":1,"response":"<think>2 + 2</think><answer>4</answer>","ground_truth":"4"}
{"id":"b","task":"temporal_grounding","group":1,"response":"<think>scan</think>\n<answer>{\"start\": 0.0, \"end\": 2.0}</answer>","ground_truth":{"start":0.0,"end":4.0}}
{"id":"c","task":"spatial_grounding","response":"<answer>{\"bbox\": [0, 0, 10, 10]}</answer>","ground_truth":{"bbox":[0,0,10,10]}}
"#;

// 4 == 4 scores 1 + format 1; [0,2] against [0,4] overlaps by half; the
// third answer is right but has no think block, so both terms vanish.
const GOLDEN_OUTPUT: &str = r#"{"id":"a","group":1,"task":"math_qa","r_acc":1.0,"r_format":1.0,"r_total":2.0}
{"id":"b","group":1,"task":"temporal_grounding","r_acc":0.5,"r_format":1.0,"r_total":1.5}
{"id":"c","task":"spatial_grounding","r_acc":0.0,"r_format":0.0,"r_total":0.0}
"#;

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn score_args(input: std::path::PathBuf, output: std::path::PathBuf) -> ScoreArgs {
    ScoreArgs {
        input,
        output: Some(output),
        scorer_url: None,
        scorer_timeout_ms: 1000,
        mock_scorer: false,
    }
}

#[test]
fn golden_score_output_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let input = write(dir.path(), "in.jsonl", GOLDEN_INPUT);
    for _ in 0..2 {
        let out = dir.path().join("out.jsonl");
        let s = cmd_score(&score_args(input.clone(), out.clone())).unwrap();
        assert_eq!(std::fs::read_to_string(&out).unwrap(), GOLDEN_OUTPUT);
        assert_eq!((s.records, s.errors, s.unavailable), (3, 0, 0));
        assert_eq!(s.mean_reward[&TaskKind::MathQa], 2.0);
        assert_eq!(s.mean_reward[&TaskKind::TemporalGrounding], 1.5);
    }
}

#[test]
fn score_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let empty = write(dir.path(), "empty.jsonl", "");
    let out = dir.path().join("o.jsonl");
    let st = Command::new(BIN)
        .args(["score", "--input"])
        .arg(&empty)
        .arg("--output")
        .arg(&out)
        .env_remove("SCORER_URL")
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(0));
    assert_eq!(std::fs::read_to_string(&out).unwrap(), "");

    let st = Command::new(BIN)
        .args(["score", "--input"])
        .arg(dir.path().join("missing.jsonl"))
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(2));

    let caption = write(
        dir.path(),
        "cap.jsonl",
        r#"{"id":1,"task":"caption","query":"describe","response":"<think>x</think><answer>a dog</answer>","ground_truth":"a dog"}
"#,
    );
    let st = Command::new(BIN)
        .args(["score", "--input"])
        .arg(&caption)
        .arg("--output")
        .arg(&out)
        .env_remove("SCORER_URL")
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(3));
    let st = Command::new(BIN)
        .args(["score", "--input"])
        .arg(&caption)
        .arg("--output")
        .arg(&out)
        .env("SCORER_URL", "http://127.0.0.1:9")
        .env("SCORER_TIMEOUT_MS", "200")
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(3));

    let st = Command::new(BIN).args(["score", "--bogus"]).status().unwrap();
    assert_eq!(st.code(), Some(2));
}

#[test]
fn bad_records_become_error_entries() {
    let dir = tempfile::tempdir().unwrap();
    let input = write(
        dir.path(),
        "in.jsonl",
        concat!(
            "{\"id\":1,\"task\":\"math_qa\",\"response\":\"<think>a</think><answer>3</answer>\",\"ground_truth\":\"3\"}\n",
            "{\"id\":2,\"task\":\"juggling\",\"response\":\"x\",\"ground_truth\":\"3\"}\n",
            "\n",
            "{broken\n",
            "{\"id\":4,\"task\":\"spatial_grounding\",\"response\":\"x\",\"ground_truth\":{\"bbox\":[5,5,1,1]}}\n",
        ),
    );
    let out = dir.path().join("o.jsonl");
    let s = cmd_score(&score_args(input, out.clone())).unwrap();
    assert_eq!((s.records, s.errors, s.unavailable), (4, 3, 0));
    let lines: Vec<serde_json::Value> = std::fs::read_to_string(&out)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines[0]["r_total"], 2.0);
    assert_eq!(lines[1]["id"], 2);
    assert!(lines[1]["error"].is_string());
    assert!(lines[2]["error"].as_str().unwrap().contains("line 4"));
    assert_eq!(lines[3]["id"], 4);
    assert!(lines[3]["error"].is_string());
}

#[test]
fn mock_scorer_handles_captions() {
    let dir = tempfile::tempdir().unwrap();
    let input = write(
        dir.path(),
        "in.jsonl",
        r#"{"id":1,"task":"caption","query":"describe","response":"<think>x</think><answer>a red car</answer>","ground_truth":"a blue car"}
"#,
    );
    let out = dir.path().join("o.jsonl");
    let args = ScoreArgs {
        mock_scorer: true,
        ..score_args(input, out.clone())
    };
    cmd_score(&args).unwrap();
    let v: serde_json::Value = serde_json::from_str(std::fs::read_to_string(&out).unwrap().trim()).unwrap();
    assert_eq!(v["r_acc"], 0.5);
}

fn rollout_log(groups: &[(&str, &str, &[f64])]) -> String {
    let mut s = String::new();
    for (g, task, rewards) in groups {
        for r in *rewards {
            s.push_str(&format!("{{\"group\":\"{g}\",\"task\":\"{task}\",\"r_total\":{r:?}}}\n"));
        }
    }
    s
}

fn adv_args(input: std::path::PathBuf, output: std::path::PathBuf, scheme: Scheme) -> AdvantageArgs {
    AdvantageArgs {
        input,
        output: Some(output),
        scheme,
        group_size: 4,
        beta: 0.99,
        stats: None,
        resume: None,
        no_filter: false,
    }
}

fn read_jsonl(p: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(p)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn ema_advantages_on_golden_log() {
    // first batch initialises the moments from {2,1,1,0,...}: m1 = 0.875,
    // m2 = 1.375, sigma = sqrt(1.375 - 0.765625)
    let log = rollout_log(&[
        ("p", "math_qa", &[2.0, 1.0, 1.0, 1.0]),
        ("q", "math_qa", &[2.0, 0.0, 0.0, 0.0]),
        ("r", "math_qa", &[2.0, 2.0, 2.0, 2.0]),
    ]);
    let dir = tempfile::tempdir().unwrap();
    let input = write(dir.path(), "log.jsonl", &log);
    let out = dir.path().join("adv.jsonl");
    let stats = dir.path().join("stats.json");
    let s = cmd_advantage(&AdvantageArgs {
        stats: Some(stats.clone()),
        ..adv_args(input.clone(), out.clone(), Scheme::Ema)
    })
    .unwrap();
    assert_eq!((s.groups, s.normalised, s.filtered, s.errors), (3, 2, 1, 0));
    let lines = read_jsonl(&out);
    let sigma = (1.375f64 - 0.875 * 0.875).sqrt();
    let p: Vec<f64> = serde_json::from_value(lines[0]["advantages"].clone()).unwrap();
    for (a, r) in p.iter().zip([2.0, 1.0, 1.0, 1.0]) {
        assert!((a - (r - 1.25) / sigma).abs() < 1e-12);
    }
    assert_eq!(lines[2]["filtered"], true);
    assert_eq!(lines[2]["filter_reason"], "all_correct");
    assert!(lines[2]["advantages"].is_null());

    let checkpoint: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&stats).unwrap()).unwrap();
    assert_eq!(checkpoint["math_qa"]["m1"], 0.875);
    assert_eq!(checkpoint["math_qa"]["m2"], 1.375);

    // resuming applies one more update on top of the checkpoint
    let out2 = dir.path().join("adv2.jsonl");
    cmd_advantage(&AdvantageArgs {
        resume: Some(stats.clone()),
        stats: Some(stats.clone()),
        ..adv_args(input, out2, Scheme::Ema)
    })
    .unwrap();
    let checkpoint: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&stats).unwrap()).unwrap();
    assert_eq!(checkpoint["math_qa"]["steps"], 2);
}

#[test]
fn grpo_zero_std_group_is_an_error_entry() {
    let log = rollout_log(&[("flat", "tracking", &[0.4; 4]), ("live", "tracking", &[0.1, 0.2, 0.3, 0.4])]);
    let dir = tempfile::tempdir().unwrap();
    let input = write(dir.path(), "log.jsonl", &log);
    let out = dir.path().join("adv.jsonl");
    let s = cmd_advantage(&AdvantageArgs {
        no_filter: true,
        ..adv_args(input, out.clone(), Scheme::Grpo)
    })
    .unwrap();
    assert_eq!((s.normalised, s.errors), (1, 1));
    let lines = read_jsonl(&out);
    assert!(lines[0]["error"].as_str().unwrap().contains("zero"));
    assert!(lines[1]["advantages"].is_array());
}

#[test]
fn ragged_group_exits_2_naming_it() {
    let log = rollout_log(&[("ok", "math_qa", &[1.0, 0.0, 1.0, 0.0]), ("short", "math_qa", &[1.0, 0.0, 1.0])]);
    let dir = tempfile::tempdir().unwrap();
    let input = write(dir.path(), "log.jsonl", &log);
    let out = Command::new(BIN)
        .args(["advantage", "--group-size", "4", "--input"])
        .arg(&input)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("short"));
}

#[test]
fn score_output_feeds_advantage() {
    let dir = tempfile::tempdir().unwrap();
    let mut input = String::new();
    for (i, ans) in ["4", "5", "4", "x"].iter().enumerate() {
        input.push_str(&format!(
            "{{\"id\":{i},\"task\":\"math_qa\",\"group\":\"g\",\"response\":\"<think>t</think><answer>{ans}</answer>\",\"ground_truth\":\"4\"}}\n"
        ));
    }
    let scored = dir.path().join("scored.jsonl");
    cmd_score(&score_args(write(dir.path(), "in.jsonl", &input), scored.clone())).unwrap();
    let out = dir.path().join("adv.jsonl");
    let s = cmd_advantage(&adv_args(scored, out.clone(), Scheme::Drgrpo)).unwrap();
    assert_eq!(s.normalised, 1);
    let adv: Vec<f64> = serde_json::from_value(read_jsonl(&out)[0]["advantages"].clone()).unwrap();
    assert_eq!(adv, vec![0.5, -0.5, 0.5, -0.5]);
}

#[test]
fn simulate_config_errors_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let bad_type = write(dir.path(), "a.json", r#"{"steps": "many"}"#);
    match load_config(&bad_type) {
        Err(CliError::Config { path, .. }) => assert_eq!(path, "steps"),
        other => panic!("{other:?}"),
    }
    let unknown = write(dir.path(), "b.json", r#"{"ema": {"beta": 0.9, "gamma": 1}}"#);
    match load_config(&unknown) {
        Err(CliError::Config { path, .. }) => assert_eq!(path, "ema.gamma"),
        other => panic!("{other:?}"),
    }
    let invalid = write(
        dir.path(),
        "c.json",
        r#"{"tasks": [{"name": "t", "task": "math_qa", "kind": {"type": "sparse_binary", "p_success": [0.5, 1.5]}, "seed": 1}]}"#,
    );
    let out = Command::new(BIN).args(["simulate", "--config"]).arg(&invalid).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("tasks[0].kind.p_success[1]"));
}

#[test]
fn simulate_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "cfg.json", r#"{"steps": 200, "schemes": ["drgrpo", "ema"]}"#);
    let csv = dir.path().join("run.csv");
    let summary = dir.path().join("summary.json");
    let reports = cmd_simulate(&SimulateArgs {
        config: Some(cfg),
        output: Some(csv.clone()),
        summary: Some(summary.clone()),
        scheme: None,
        seed: Some(7),
        group_size: None,
        beta: None,
        beta_kl: None,
        epsilon: None,
    })
    .unwrap();
    assert_eq!(reports.len(), 2);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * 200 * 2);
    let s: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&summary).unwrap()).unwrap();
    assert_eq!(s[1]["scheme"], "ema");

    let rows = cmd_report(&ReportArgs {
        input: csv,
        output: Some(dir.path().join("report.csv")),
    })
    .unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0].scheme, "drgrpo");
    assert_eq!(rows[0].steps, 200);
    let ema_sparse = rows.iter().find(|r| r.scheme == "ema" && r.task == "sparse").unwrap();
    assert_eq!(ema_sparse.final_sigma, reports[1].summary[0].final_sigma);
}
