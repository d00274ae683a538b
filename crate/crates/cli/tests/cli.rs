//! Runs the binary against a small scripted setup: demo, eval, export-sft
//! and the exit-code contract.

use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use decitool::backends::{Binding, Rule, Script};
use decitool::datagen::{save_split, DatasetSplit, Sample, SampleKind, SampleMeta};
use decitool::registry::{save_pool, FunctionSpec, ParamSpec, ParamType, Tool, ToolPool};
use decitool::runtime::CallCommand;

const TOOLS: [(&str, &str); 8] = [
    ("get_weather", "current weather and forecast for a city"),
    ("get_quote", "latest stock price for a ticker symbol"),
    ("translate", "translate text into another language"),
    ("news", "top news headlines about a topic"),
    ("recipes", "find cooking recipes for a dish"),
    ("flights", "search flights between two airports"),
    ("hotels", "find hotel rooms in a city"),
    ("movies", "movie showtimes near a location"),
];

fn pool() -> ToolPool {
    ToolPool::new(
        TOOLS
            .iter()
            .map(|(name, desc)| Tool {
                name: name.to_string(),
                description: desc.to_string(),
                function: FunctionSpec {
                    api_name: name.to_string(),
                    parameters: vec![ParamSpec {
                        name: "q".into(),
                        kind: ParamType::String,
                        required: true,
                        description: "query".into(),
                    }],
                    returns: "object".into(),
                },
            })
            .collect(),
    )
    .unwrap()
}

fn sample(id: &str, kind: SampleKind, query: &str, gold: Option<&str>) -> Sample {
    let candidates: Vec<String> = TOOLS
        .iter()
        .map(|t| t.0.to_string())
        .filter(|n| kind == SampleKind::Call || Some(n.as_str()) != gold)
        .take(5)
        .collect();
    Sample {
        id: id.into(),
        kind,
        query: query.into(),
        candidate_tools: if kind == SampleKind::NoSearch { vec![] } else { candidates },
        gold_call: gold.map(|g| CallCommand::new(g).arg("q", "Paris")),
        metadata: SampleMeta {
            strategy: "random".into(),
            seed: 0,
            fallback: false,
            cluster: None,
        },
    }
}

/// Writes pool, executor registry, backend script, dataset and config.
fn setup(dir: &Path, test_queries: &[(&str, SampleKind, &str, Option<&str>)]) {
    let pool = pool();
    save_pool(&pool, dir.join("pool.json")).unwrap();
    let bindings: std::collections::BTreeMap<String, Binding> = TOOLS
        .iter()
        .map(|(n, _)| (n.to_string(), Binding::mock(format!(r#"{{"source":"{n}"}}"#))))
        .collect();
    std::fs::write(dir.join("executor.json"), serde_json::to_string(&bindings).unwrap()).unwrap();

    let script = Script {
        rules: vec![
            Rule::respond("[ANSWER] Sleep well and call a friend.").when_query_contains("tips").at_turn(0),
            Rule::respond("not sure").when_query_contains("broken"),
            Rule::respond("[SEARCH]").at_turn(0),
            Rule::respond(r#"[CALL] get_weather(q="Paris")"#).when_query_contains("weather").at_turn(1),
            Rule::respond("[NOCALL]").at_turn(1),
            Rule::respond("Mild and sunny.").when_last_contains("source"),
            Rule::respond("I cannot help with that using tools."),
        ],
        ..Script::default()
    };
    std::fs::write(dir.join("script.json"), serde_json::to_string(&script).unwrap()).unwrap();

    let test = test_queries.iter().map(|&(id, kind, q, gold)| sample(id, kind, q, gold)).collect();
    let split = DatasetSplit {
        train: vec![sample("call-00001", SampleKind::Call, "weather in Rome", Some("get_weather"))],
        valid: vec![sample("nosearch-00001", SampleKind::NoSearch, "give me tips", None)],
        test,
    };
    save_split(&split, dir.join("dataset")).unwrap();

    std::fs::write(
        dir.join("decitool.toml"),
        r#"
seed = 3

[paths]
pool = "pool.json"
dataset = "dataset"
executor = "executor.json"
report = "report"

[backend]
kind = "scripted"
script = "script.json"

[eval]
trials = 3
"#,
    )
    .unwrap();
}

fn run(dir: &Path, args: &[&str], stdin: &str) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_decitool"))
        .current_dir(dir)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(stdin.as_bytes()).unwrap();
    child.wait_with_output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const GOOD_TEST: [(&str, SampleKind, &str, Option<&str>); 3] = [
    ("test-nosearch-00001", SampleKind::NoSearch, "any tips for a calm morning?", None),
    ("test-nocall-00001", SampleKind::NoCall, "rainfall on Mars yesterday", Some("get_weather")),
    ("test-call-00001", SampleKind::Call, "weather in Paris now", Some("get_weather")),
];

#[test]
fn demo_prints_each_branch() {
    let tmp = tempfile::tempdir().unwrap();
    setup(tmp.path(), &GOOD_TEST);
    let out = run(
        tmp.path(),
        &["--config", "decitool.toml", "demo"],
        "give me tips\n\nweather in Paris\nwrite a haiku\nbroken query\n",
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    for needle in [
        "? give me tips",
        "  | branch: ① NoSearch",
        ">> Sleep well and call a friend.",
        "? weather in Paris",
        r#"  | api get_weather(q="Paris") -> 200 {"source":"get_weather"}"#,
        "  | branch: ④ Call",
        ">> Mild and sunny.",
        "  | branch: ③ NoCall",
        "  | aborted at decision-search",
    ] {
        assert!(text.contains(needle), "missing {needle:?} in:\n{text}");
    }
    assert_eq!(text.matches("  | candidates: ").count(), 2);
}

#[test]
fn eval_writes_report_and_succeeds() {
    let tmp = tempfile::tempdir().unwrap();
    setup(tmp.path(), &GOOD_TEST);
    let out = run(tmp.path(), &["--config", "decitool.toml", "eval"], "");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = stdout(&out);
    assert!(table.contains("policy: tool-match  trials: 3"), "{table}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("report/report.json")).unwrap()).unwrap();
    assert_eq!(report["trials"], 3);
    let traces = std::fs::read_to_string(tmp.path().join("report/traces.jsonl")).unwrap();
    assert_eq!(traces.lines().count(), 9);

    // the scripted model is right on every sample
    let again = run(tmp.path(), &["--config", "decitool.toml", "eval", "--trials", "1", "--out", "r2"], "");
    assert!(again.status.success());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("r2/report.json")).unwrap()).unwrap();
    assert_eq!(report["trials"], 1);
    let metrics = report["metrics"].as_array().unwrap();
    assert_eq!(metrics.len(), 6);
    for m in metrics {
        assert_eq!(m["summary"]["mean"], 1.0, "{m}");
    }
}

#[test]
fn eval_exits_one_on_aborted_traces() {
    let tmp = tempfile::tempdir().unwrap();
    let mut queries = GOOD_TEST.to_vec();
    queries.push(("test-call-00002", SampleKind::Call, "broken weather request", Some("get_weather")));
    setup(tmp.path(), &queries);
    let out = run(tmp.path(), &["--config", "decitool.toml", "eval", "--trials", "1"], "");
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("aborted"));
}

#[test]
fn config_and_input_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    setup(tmp.path(), &GOOD_TEST);
    let missing = run(tmp.path(), &["--config", "nope.toml", "eval"], "");
    assert_eq!(missing.status.code(), Some(2));

    std::fs::write(tmp.path().join("bad.toml"), "[sampler]\nkay = 5\n").unwrap();
    let unknown = run(tmp.path(), &["--config", "bad.toml", "eval"], "");
    assert_eq!(unknown.status.code(), Some(2));

    let no_split = run(tmp.path(), &["--config", "decitool.toml", "eval", "--split", "dev"], "");
    assert_eq!(no_split.status.code(), Some(2));
}

#[test]
fn export_sft_writes_chat_files() {
    let tmp = tempfile::tempdir().unwrap();
    setup(tmp.path(), &GOOD_TEST);
    let out = run(tmp.path(), &["--config", "decitool.toml", "export-sft", "--out", "sft"], "");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for (file, rows) in [("sft_train.jsonl", 1), ("sft_valid.jsonl", 1), ("sft_test.jsonl", 3)] {
        let text = std::fs::read_to_string(tmp.path().join("sft").join(file)).unwrap();
        assert_eq!(text.lines().count(), rows, "{file}");
        for line in text.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(v["messages"].as_array().is_some_and(|m| m.len() >= 2));
        }
    }
}
