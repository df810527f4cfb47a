mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::*;
use newsverdict::llm::{MockFixture, StageTag};
use newsverdict::Label;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_newsverdict"))
        .args(args)
        .current_dir(dir)
        .env_remove("NEWSVERDICT_MODEL_API_KEY")
        .env_remove("NEWSVERDICT_MODEL_BACKEND")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn world() -> World {
    let w = record_world(corpus("tr", 4, 4, false), corpus("te", 6, 6, true));
    w.write_config("");
    w
}

fn eval_args(out: &str) -> Vec<&str> {
    vec![
        "eval", "--config", "config.cfg", "--dataset", "train.jsonl", "--test", "test.jsonl", "--k", "4", "--out", out,
    ]
}

#[test]
fn build_store_writes_every_training_article() {
    let w = world();
    let o = run(w.dir.path(), &["build-store", "--config", "config.cfg", "--train", "train.jsonl", "--out", "fresh.jsonl"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("wrote 8 entries (4 real, 4 fake)"), "{}", stdout(&o));
    assert!(stderr(&o).contains("model calls:"));
    let fresh = newsverdict::inside::Datastore::load(w.path("fresh.jsonl"), None).unwrap();
    assert_eq!(fresh.len(), 8);
}

#[test]
fn detect_prints_every_stage_and_the_verdict() {
    let w = world();
    let a = &w.test[0];
    newsverdict::domain::write_articles(w.path("one.jsonl"), std::slice::from_ref(a)).unwrap();
    let o = run(w.dir.path(), &["detect", "--config", "config.cfg", "--article", "one.jsonl", "--trace-out", "trace.json"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    for section in ["[target news]", "[detection]", "[inside investigation]", "[outside investigation]", "[inside judge]", "[outside judge]", "[determination]"] {
        assert!(text.contains(section), "{section} missing:\n{text}");
    }
    let last = text.lines().last().unwrap();
    assert_eq!(last, format!("verdict: {} (agreement)", a.gold_label.unwrap()));
    let trace = newsverdict::PipelineTrace::from_json(&std::fs::read_to_string(w.path("trace.json")).unwrap()).unwrap();
    assert_eq!(trace.article_id, a.id);
}

#[test]
fn eval_is_reproducible_and_writes_all_outputs() {
    let w = world();
    let first = run(w.dir.path(), &eval_args("out1"));
    assert_eq!(first.status.code(), Some(0), "{}", stderr(&first));
    assert!(stdout(&first).contains("ACC "));
    let second = run(w.dir.path(), &eval_args("out2"));
    assert_eq!(second.status.code(), Some(0), "{}", stderr(&second));
    // The warm run is served from the stage cache.
    assert!(stderr(&second).contains("model calls: detection 0, inside_judge 0, outside_judge 0, determination 0"), "{}", stderr(&second));

    for name in ["report.txt", "report.jsonl", "split.json"] {
        let a = std::fs::read(w.path("out1").join(name)).unwrap();
        let b = std::fs::read(w.path("out2").join(name)).unwrap();
        assert_eq!(a, b, "{name}");
    }
    for a in &w.test {
        let file = newsverdict::evaluation::trace_file_name(&a.id);
        let x = std::fs::read(w.path("out1/traces").join(&file)).unwrap();
        let y = std::fs::read(w.path("out2/traces").join(&file)).unwrap();
        assert_eq!(x, y, "{file}");
    }
    let line = std::fs::read_to_string(w.path("out1/report.jsonl")).unwrap();
    assert_eq!(line.lines().count(), 1);
    let report: serde_json::Value = serde_json::from_str(&line).unwrap();
    assert_eq!(report["n_evaluated"], 12);
    assert_eq!(report["n_train"], 8);
    assert_eq!(report["k_per_class"], 4);
    let split: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(w.path("out1/split.json")).unwrap()).unwrap();
    assert_eq!(split["test"].as_array().unwrap().len(), 12);
}

#[test]
fn cache_inspect_and_clear() {
    let w = world();
    assert_eq!(run(w.dir.path(), &eval_args("out")).status.code(), Some(0));
    let o = run(w.dir.path(), &["cache", "inspect", "--config", "config.cfg"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    let count = |name: &str| -> usize {
        let line = text.lines().find(|l| l.trim_start().starts_with(name)).unwrap();
        line.split_whitespace().last().unwrap().parse().unwrap()
    };
    // Training detections live inside the cached datastore, not per article.
    assert_eq!(count("detection"), 12);
    assert_eq!(count("outside_judge"), 12);
    assert_eq!(count("datastore"), 1);

    let o = run(w.dir.path(), &["cache", "clear", "--config", "config.cfg"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = run(w.dir.path(), &["cache", "inspect", "--config", "config.cfg"]);
    assert!(stdout(&o).lines().skip(1).all(|l| l.ends_with(" 0")), "{}", stdout(&o));
}

#[test]
fn live_backend_without_key_is_a_config_error() {
    let w = world();
    w.write_config("[model]\nbackend = live\nendpoint_url = http://127.0.0.1:9/v1/chat/completions\n");
    let o = run(w.dir.path(), &eval_args("out"));
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("NEWSVERDICT_MODEL_API_KEY"), "{}", stderr(&o));
}

#[test]
fn dataset_problems_exit_2() {
    let w = world();
    std::fs::write(w.path("broken.jsonl"), "{\"id\": \"x\", \"title\": \n").unwrap();
    let mut args = eval_args("out");
    args[4] = "broken.jsonl";
    assert_eq!(run(w.dir.path(), &args).status.code(), Some(2));

    let mut args = eval_args("out");
    args[8] = "5";
    let o = run(w.dir.path(), &args);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn too_many_failures_exit_3() {
    let w = world();
    w.write_config("[eval]\nmax_failure_rate = 0.05\n");
    // One extra article has no recorded model output, so it gets no verdict.
    let mut test = w.test.clone();
    test.push(article("te-extra", 999, Label::Fake));
    newsverdict::domain::write_articles(w.path("test.jsonl"), &test).unwrap();
    let o = run(w.dir.path(), &eval_args("out"));
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let report = std::fs::read_to_string(w.path("out/report.jsonl")).unwrap();
    assert!(report.contains("\"n_failed\":1"), "{report}");
}

#[test]
fn detect_without_a_verdict_exits_3() {
    let w = world();
    write_jsonl(&w.chat_fixtures(), &[MockFixture::failing(StageTag::Detection, "transport")]);
    newsverdict::domain::write_articles(w.path("one.jsonl"), &w.test[..1]).unwrap();
    let o = run(w.dir.path(), &["detect", "--config", "config.cfg", "--article", "one.jsonl"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().last(), Some("verdict: none"));
}

#[test]
fn fixtures_command_records_replayable_output() {
    let w = world();
    let o = run(
        w.dir.path(),
        &["fixtures", "--config", "config.cfg", "--articles", "test.jsonl", "--train", "train.jsonl", "--out-dir", "rec"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("over 12 articles (0 without verdict)"), "{}", stdout(&o));
    for f in ["chat.jsonl", "search.jsonl", "datastore.jsonl"] {
        assert!(w.path("rec").join(f).exists(), "{f}");
    }
}

#[test]
fn usage_errors_exit_1_and_help_exits_0() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["eval"]).status.code(), Some(1));
    assert_eq!(run(dir.path(), &["--help"]).status.code(), Some(0));
    let o = run(dir.path(), &["detect", "--config", "missing.cfg", "--article", "a.jsonl"]);
    assert_eq!(o.status.code(), Some(1));
}
