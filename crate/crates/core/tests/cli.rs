use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tforge(args: &[&str], dir: &Path, env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_tforge"));
    cmd.args(args).current_dir(dir);
    for (k, _) in std::env::vars().filter(|(k, _)| k.starts_with("TFORGE_")) {
        cmd.env_remove(k);
    }
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SCORE_INPUT: &str = r#"{"id":"e","generation":"<think>red mug</think><answer>{\"bbox\":[0,0,10,10]}</answer><d_think>the red mug on the left of the table</d_think>","gt_box":[0,0,10,10],"image":{"width":100,"height":100}}
{"id":"d","generation":"<think>red mug</think><answer>{\"bbox\":[0,0,10,4]}</answer><d_think>the red mug on the left</d_think>","gt_box":[0,0,10,10]}
{"id":"c","generation":"no tags at all","gt_box":[0,0,10,10]}
{"id":"b","generation":"<answer>{\"bbox\":[0,0,10,10]}</answer>"}
{"id":"a","generation":"<think>mug</think><answer>{\"bbox\":[1,1,10,10]}</answer><d_think>mug</d_think>","gt":{"bbox":[0,0,10,10],"points":[[5,5]]}}
"#;

fn score_lines(out: &Output) -> Vec<serde_json::Value> {
    stdout(out).lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn score_emits_one_breakdown_per_record() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("in.jsonl"), SCORE_INPUT).unwrap();
    fs::write(dir.path().join("gt.jsonl"), r#"{"id":"b","gt_box":[0,0,10,10]}"#).unwrap();
    let out = tforge(&["score", "in.jsonl", "--gt", "gt.jsonl"], dir.path(), &[]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let lines = score_lines(&out);
    let ids: Vec<&str> = lines.iter().map(|l| l["id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["a", "b", "c", "d", "e"]);

    // IoU 0.4 is below the gate
    let d = &lines[3];
    assert_eq!(d["gate"], false);
    assert_eq!(d["r_train"], d["r_task"]);
    let e = &lines[4];
    assert_eq!(e["gate"], true);
    assert!(e["r_train"].as_f64().unwrap() > e["r_task"].as_f64().unwrap());
    assert_eq!(lines[2]["r_task"].as_f64(), Some(0.0));

    let out = tforge(&["score", "in.jsonl", "--gt", "gt.jsonl", "--no-sim"], dir.path(), &[]);
    let lines = score_lines(&out);
    assert_eq!(lines[4]["s_sim"].as_f64(), Some(1.0));
}

#[test]
fn score_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("empty.jsonl"), "\n").unwrap();
    assert_eq!(tforge(&["score", "missing.jsonl"], dir.path(), &[]).status.code(), Some(2));
    assert_eq!(tforge(&["score", "empty.jsonl"], dir.path(), &[]).status.code(), Some(1));
    assert_eq!(tforge(&["bogus"], dir.path(), &[]).status.code(), Some(2));
}

#[test]
fn print_config_round_trips_and_tracks_sources() {
    let dir = tempfile::tempdir().unwrap();
    let out = tforge(
        &["print-config", "--order", "dcA", "--no-gate", "--brevity", "shorter-better", "--set", "train.kl=0.01"],
        dir.path(),
        &[("TFORGE_TRAIN__STEPS", "40")],
    );
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    assert!(text.contains("# train.order = flag --order"));
    assert!(text.contains("# train.steps = env TFORGE_TRAIN__STEPS"));
    assert!(text.contains("# train.kl = flag --set train.kl"));
    assert!(text.contains("# train.clip = default"));
    fs::write(dir.path().join("printed.toml"), &text).unwrap();

    let again = tforge(&["print-config", "--config", "printed.toml"], dir.path(), &[]);
    let body = |s: &str| s.split("# sources").next().unwrap().to_string();
    assert_eq!(body(&stdout(&again)), body(&text));
    assert!(stdout(&again).contains("# train.order = file printed.toml"));
}

#[test]
fn flags_beat_env_beat_file() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), "[train]\nseed = 1\nsteps = 2\ngroup_size = 3\n").unwrap();
    let out = tforge(
        &["print-config", "--config", "c.toml", "--seed", "7"],
        dir.path(),
        &[("TFORGE_TRAIN__SEED", "5"), ("TFORGE_TRAIN__STEPS", "6")],
    );
    let text = stdout(&out);
    let cfg: toml::Table = toml::from_str(text.split("# sources").next().unwrap()).unwrap();
    let train = cfg["train"].as_table().unwrap();
    assert_eq!(train["seed"].as_integer(), Some(7));
    assert_eq!(train["steps"].as_integer(), Some(6));
    assert_eq!(train["group_size"].as_integer(), Some(3));
}

#[test]
fn invalid_config_is_fatal_with_field_message() {
    let dir = tempfile::tempdir().unwrap();
    let out = tforge(&["train-toy", "--set", "train.group_size=1"], dir.path(), &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("group_size"));
    let out = tforge(&["print-config", "--order", "cAx"], dir.path(), &[]);
    assert_eq!(out.status.code(), Some(2));
    let out = tforge(&["print-config"], dir.path(), &[("TFORGE_TRAIN__NOPE", "1")]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));
}

#[test]
fn train_toy_is_deterministic_and_summarizes() {
    let dir = tempfile::tempdir().unwrap();
    for run in ["a", "b"] {
        let out = tforge(&["train-toy", "--seed", "3", "--steps", "20", "--order", "dcA", "--out-dir", run], dir.path(), &[]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        let line = stdout(&out);
        assert!(line.starts_with("order dcA steps 20: inference tau_c"), "{line}");
        assert!(line.contains("success"));
    }
    let read = |p: &str| fs::read(dir.path().join(p)).unwrap();
    assert_eq!(read("a/run_log.jsonl"), read("b/run_log.jsonl"));
    assert_eq!(read("a/report.json"), read("b/report.json"));
    assert_eq!(String::from_utf8(read("a/run_log.jsonl")).unwrap().lines().count(), 20);
}

fn pred(id: &str, split: &str, generation: &str) -> String {
    serde_json::json!({
        "id": id,
        "split": split,
        "image": {"width": 20, "height": 20},
        "instruction": "segment the mug",
        "generation": generation,
        "gt_box": [0, 0, 10, 10],
    })
    .to_string()
}

#[test]
fn eval_prints_cumulative_iou_and_records_brevity() {
    let dir = tempfile::tempdir().unwrap();
    let lines = [
        pred("r1", "val", r#"<think>the mug</think><answer>{"bbox":[0,5,10,15]}</answer>"#),
        pred("r2", "val", "<think>the mug on the left</think>"),
        "{broken".to_string(),
    ];
    fs::write(dir.path().join("p.jsonl"), lines.join("\n")).unwrap();
    let out = tforge(&["eval", "p.jsonl", "--out-dir", "rep", "--brevity", "one sentence"], dir.path(), &[]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.contains("cIoU 0.2 "), "{text}");
    let meta = fs::read_to_string(dir.path().join("rep/report_meta.json")).unwrap();
    let meta: serde_json::Value = serde_json::from_str(&meta).unwrap();
    assert_eq!(meta["brevity"], "one sentence");
    assert_eq!(meta["skipped_lines"], 1);
    for f in ["split_val.csv", "hist_val.csv", "comparison.csv", "metrics.json", "scores.jsonl"] {
        assert!(dir.path().join("rep").join(f).exists(), "{f}");
    }

    // the report compares against itself as a baseline
    let out = tforge(&["eval", "p.jsonl", "--out-dir", "rep2", "--baseline", "rep/metrics.json"], dir.path(), &[]);
    assert!(stdout(&out).contains("val: 1.0×↓, +0.0"));
    let cmp = fs::read_to_string(dir.path().join("rep2/comparison.csv")).unwrap();
    assert_eq!(cmp.lines().count(), 2);
}

#[test]
fn eval_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.jsonl"), "{}\n").unwrap();
    assert_eq!(tforge(&["eval", "bad.jsonl", "--out-dir", "o"], dir.path(), &[]).status.code(), Some(1));
    assert_eq!(tforge(&["eval", "none.jsonl", "--out-dir", "o"], dir.path(), &[]).status.code(), Some(2));
    // a prediction and ground truth that are both empty leave no union
    let degenerate = serde_json::json!({
        "id": "z", "split": "s", "image": {"width": 4, "height": 4}, "instruction": "x",
        "generation": "<think>t</think>", "gt_mask": "4 4\n16",
    });
    fs::write(dir.path().join("deg.jsonl"), degenerate.to_string()).unwrap();
    let out = tforge(&["eval", "deg.jsonl", "--out-dir", "o"], dir.path(), &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("degenerate"));
}

#[test]
fn compare_requires_a_shared_split() {
    let dir = tempfile::tempdir().unwrap();
    let m = |split: &str| {
        serde_json::json!({"splits": [{
            "split": split, "n": 1, "giou": 0.5, "ciou": 0.5, "mean_tokens": 10.0, "median_tokens": 10.0,
            "intersection": 1, "union": 2, "token_histogram": vec![0; 31], "per_order": {},
        }]})
        .to_string()
    };
    fs::write(dir.path().join("a.json"), m("x")).unwrap();
    fs::write(dir.path().join("b.json"), m("y")).unwrap();
    assert_eq!(tforge(&["compare", "a.json", "b.json"], dir.path(), &[]).status.code(), Some(1));
    let out = tforge(&["compare", "a.json", "a.json", "--out-dir", "c"], dir.path(), &[]);
    assert_eq!(out.status.code(), Some(0));
    assert!(dir.path().join("c/comparison.csv").exists());
}
