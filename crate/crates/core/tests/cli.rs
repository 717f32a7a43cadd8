mod common;

use std::fs;

use common::{f, q};
use quasik::chase::database;
use quasik::cli::{run_with, EXIT_IO, EXIT_USAGE};
use quasik::template::{search_template, TemplateSearchBudget};
use serde_json::Value;
use tempfile::tempdir;

fn call(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let argv = std::iter::once("quasik").chain(args.iter().copied());
    let code = run_with(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

const DENSE: &str = r#"{"worlds": ["u", "v"], "rel": [[0, 1], [1, 1]], "val": {"p": [1]}}"#;

#[test]
fn model_check_on_dense_model() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("m.json");
    fs::write(&path, DENSE).unwrap();
    let m = path.to_str().unwrap();
    assert_eq!(call(&["model-check", "-m", m, "-w", "u", "-f", "<>p", "-p", "1->2"]).0, 0);
    assert_eq!(call(&["model-check", "-m", m, "-w", "0", "-f", "p"]).0, 1);
    let (code, out, _) = call(&["--json", "model-check", "-m", m, "-w", "v", "-f", "[]p", "-p", "1->2,2->3"]);
    assert_eq!(code, 0);
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["result"], true);
    assert_eq!(v["qdps"]["1->2"], true);
    assert_eq!(call(&["model-check", "-m", m, "-w", "x", "-f", "p"]).0, EXIT_USAGE);
    let missing = dir.path().join("none.json");
    assert_eq!(call(&["model-check", "-m", missing.to_str().unwrap(), "-w", "u", "-f", "p"]).0, EXIT_IO);
}

#[test]
fn check_template_accepts_and_rejects() {
    let dir = tempdir().unwrap();
    let g = f("<>p & <>~p");
    let t = search_template(&g, &q(""), &TemplateSearchBudget::for_formula(&g)).template().cloned().unwrap();
    let good = dir.path().join("good.json");
    fs::write(&good, t.to_json()).unwrap();
    let (code, out, _) = call(&["--json", "check-template", "-t", good.to_str().unwrap(), "-f", "<>p & <>~p"]);
    assert_eq!(code, 0, "{out}");
    assert_eq!(serde_json::from_str::<Value>(&out).unwrap()["ok"], true);

    let bad = dir.path().join("bad.json");
    fs::write(&bad, database(&g).to_json()).unwrap();
    let (code, out, _) = call(&["--json", "check-template", "-t", bad.to_str().unwrap(), "-f", "<>p & <>~p"]);
    assert_eq!(code, 1);
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["ok"], false);
    assert!(v["violation"]["property"].is_number());

    let junk = dir.path().join("junk.json");
    fs::write(&junk, "{").unwrap();
    assert_eq!(call(&["check-template", "-t", junk.to_str().unwrap(), "-f", "p"]).0, EXIT_USAGE);
}

#[test]
fn chase_json_and_trace_file() {
    let dir = tempdir().unwrap();
    let trace = dir.path().join("trace.txt");
    let (code, out, _) = call(&["--json", "chase", "-f", "<>p & []q", "--trace", trace.to_str().unwrap()]);
    assert_eq!(code, 0);
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["verdict"]["witness"], 0);
    let lines = fs::read_to_string(&trace).unwrap();
    assert_eq!(lines.lines().count() as u64, v["total_steps"].as_u64().unwrap());
    assert!(lines.lines().all(|l| l.starts_with("step=")));

    let (code, out, _) = call(&["--json", "chase", "-f", "<>p & []~p"]);
    assert_eq!(code, 0);
    assert_eq!(serde_json::from_str::<Value>(&out).unwrap()["verdict"], "all_contradictory");
}

#[test]
fn formula_from_file_and_jobs() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("f.txt");
    fs::write(&path, "[]~p | <><>p\n").unwrap();
    let arg = format!("@{}", path.display());
    assert_eq!(call(&["--jobs", "2", "decide", "-f", &arg, "-p", "1->2"]).0, 0);
    assert_eq!(call(&["--jobs", "0", "sat", "-f", "p"]).0, EXIT_USAGE);
    let (code, out, err) = call(&["sat", "-f", "<>(p & ~p)", "--branching", "1", "--worlds", "1", "--steps", "1"]);
    assert_ne!(code, EXIT_USAGE, "{err}");
    assert!(!out.is_empty());
    assert!(err.contains("warning"));
}
