use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use qres_core::plan::read_corpus;
use qres_core::{OperatorType, PlanNode, QueryPlan, ResourceKind, TableMeta};
use serde_json::Value;
use tempfile::TempDir;

fn qres(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qres")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = qres(args);
    assert!(out.status.success(), "qres {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn fails_with(args: &[&str], code: i32, needle: &str) {
    let out = qres(args);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(out.status.code(), Some(code), "qres {args:?}: {stderr}");
    assert!(stderr.contains(needle), "expected {needle:?} in {stderr:?}");
}

struct Work {
    dir: TempDir,
}

impl Work {
    fn new() -> Self {
        Work { dir: TempDir::new().unwrap() }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).to_str().unwrap().to_string()
    }

    fn write(&self, name: &str, text: &str) -> String {
        fs::write(self.path(name), text).unwrap();
        self.s(name)
    }

    fn gen(&self, name: &str, spec: &str) -> String {
        let spec_path = self.write(&format!("{name}.spec.json"), spec);
        ok(&["gen", "--spec", &spec_path, "--out", &self.s(name)]);
        self.s(name)
    }

    fn train(&self, corpus: &str, model: &str, extra: &[&str]) -> String {
        let out = self.s(model);
        let mut args = vec!["train", "--corpus", corpus, "--out", &out];
        args.extend_from_slice(extra);
        ok(&args);
        out
    }
}

fn lineitem() -> TableMeta {
    TableMeta {
        table_id: "lineitem".into(),
        tuple_count: 60_000.0,
        page_count: 977.0,
        column_count: 16.0,
        avg_row_bytes: 120.0,
        index_depth: 2.0,
    }
}

fn scan_node(card: f64, est: f64) -> PlanNode {
    let mut scan = PlanNode::new(OperatorType::TableScan, card, 80.0).with_table(lineitem());
    scan.est_out_cardinality = est;
    scan.est_io_cost = 977.0;
    scan
}

fn plan_json(root: PlanNode) -> String {
    QueryPlan::new("probe", root).to_json_line()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn report_row<'a>(report: &'a Value, technique: &str, resource: &str) -> &'a Value {
    report
        .as_array()
        .unwrap()
        .iter()
        .find(|r| r["technique"] == technique && r["resource"] == resource)
        .unwrap_or_else(|| panic!("no {technique}/{resource} row"))
}

#[test]
fn gen_writes_one_line_per_query_deterministically() {
    let w = Work::new();
    let a = w.gen("a.jsonl", r#"{"queries": 100, "seed": 4}"#);
    let stdout = ok(&["gen", "--spec", &w.s("a.jsonl.spec.json"), "--out", &w.s("b.jsonl")]);
    assert!(stdout.contains("100 queries") && stdout.contains("seed 4"), "{stdout}");
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 100);
    assert_eq!(text, fs::read_to_string(w.path("b.jsonl")).unwrap());

    ok(&["gen", "--spec", &w.s("a.jsonl.spec.json"), "--seed", "5", "--out", &w.s("c.jsonl")]);
    assert_ne!(text, fs::read_to_string(w.path("c.jsonl")).unwrap());
}

#[test]
fn gen_rejects_empty_template_mix() {
    let w = Work::new();
    let spec = w.write("spec.json", r#"{"templates": []}"#);
    fails_with(&["gen", "--spec", &spec, "--out", &w.s("x.jsonl")], 2, "empty template mix");
}

#[test]
fn train_is_reproducible_and_reports_training_error() {
    let w = Work::new();
    let corpus = w.gen("c.jsonl", r#"{"queries": 150, "seed": 8}"#);
    let args = ["--iterations", "60", "--seed", "3"];
    let m1 = w.s("m1.qres");
    let mut argv = vec!["train", "--corpus", &corpus, "--out", &m1];
    argv.extend_from_slice(&args);
    let out = ok(&argv);
    assert!(out.contains("train_err") && out.contains("TableScan"), "{out}");
    w.train(&corpus, "m2.qres", &args);
    let (a, b) = (fs::read(w.path("m1.qres")).unwrap(), fs::read(w.path("m2.qres")).unwrap());
    assert_eq!(&a[..4], b"QRES");
    assert_eq!(a, b);
}

#[test]
fn degenerate_model_predicts_training_means() {
    let w = Work::new();
    let corpus = w.gen("c.jsonl", r#"{"queries": 120, "seed": 9, "templates": [{"name": "scan"}]}"#);
    let model =
        w.train(&corpus, "m.qres", &["--no-scaling", "--iterations", "1", "--max-leaves", "1", "--subsample", "1"]);

    let plans = read_corpus(fs::read_to_string(&corpus).unwrap().as_bytes()).unwrap();
    let labels: Vec<f64> = plans
        .iter()
        .flat_map(|p| {
            p.nodes()
                .into_iter()
                .filter(|r| r.node.op == OperatorType::TableScan)
                .map(|r| r.node.observed[&ResourceKind::CpuTime])
                .collect::<Vec<_>>()
        })
        .collect();
    let mean = labels.iter().sum::<f64>() / labels.len() as f64;

    let plan = w.write("plan.json", &plan_json(scan_node(10.0, 10.0)));
    let est: Value =
        serde_json::from_str(&ok(&["estimate", "--model", &model, "--plan", &plan, "--resource", "cpu"])).unwrap();
    let total = est[0]["total"].as_f64().unwrap();
    assert!((total - mean).abs() <= 1e-9 * mean, "{total} vs {mean}");
}

#[test]
fn train_requires_labels_for_the_resource() {
    let w = Work::new();
    let corpus = w.write("c.jsonl", &format!("{}\n", plan_json(scan_node(100.0, 100.0))));
    fails_with(&["train", "--corpus", &corpus, "--out", &w.s("m.qres")], 2, "lacks a cpu_us label");
}

#[test]
fn estimate_reports_operators_pipelines_and_totals() {
    let w = Work::new();
    let corpus = w.gen("c.jsonl", r#"{"queries": 200, "seed": 21}"#);
    let model = w.train(&corpus, "m.qres", &["--iterations", "100"]);

    let single = w.write("scan.json", &plan_json(scan_node(2000.0, 2000.0)));
    let est: Value = serde_json::from_str(&ok(&["estimate", "--model", &model, "--plan", &single])).unwrap();
    assert_eq!(est.as_array().unwrap().len(), 2);
    for e in est.as_array().unwrap() {
        let ops = e["per_operator"].as_array().unwrap();
        assert_eq!(ops.len(), 1);
        assert_eq!(ops[0]["estimate"], e["total"]);
        assert_eq!(e["per_pipeline"][0]["estimate"], e["total"]);
    }

    let mut filter = PlanNode::new(OperatorType::Filter, 500.0, 80.0).with_children(vec![scan_node(5000.0, 20_000.0)]);
    filter.est_out_cardinality = 2000.0;
    let plan = w.write("filter.json", &plan_json(filter));
    let total = |source: &str| {
        let out = ok(&["estimate", "--model", &model, "--plan", &plan, "--resource", "cpu", "--source", source]);
        serde_json::from_str::<Value>(&out).unwrap()[0]["total"].as_f64().unwrap()
    };
    assert_ne!(total("true"), total("estimated"));

    let out = w.s("est.json");
    ok(&["estimate", "--model", &model, "--plan", &corpus, "--resource", "io", "--out", &out]);
    assert_eq!(json(Path::new(&out)).as_array().unwrap().len(), 200);
}

#[test]
fn estimate_fails_for_operators_without_a_model() {
    let w = Work::new();
    let corpus = w.gen("c.jsonl", r#"{"queries": 40, "seed": 2, "templates": [{"name": "scan"}]}"#);
    let model = w.train(&corpus, "m.qres", &["--iterations", "20"]);
    let sort = PlanNode::new(OperatorType::Sort, 100.0, 40.0).with_children(vec![scan_node(100.0, 100.0)]);
    let plan = w.write("sort.json", &plan_json(sort));
    fails_with(&["estimate", "--model", &model, "--plan", &plan], 2, "no model for operator Sort");

    let bogus = w.write(
        "bogus.json",
        r#"{"query_id": "b", "root": {"op": "Teleport", "card_true": 1, "card_est": 1, "row_bytes": 8}}"#,
    );
    fails_with(&["estimate", "--model", &model, "--plan", &bogus], 2, "unknown operator");

    let garbage = w.write("garbage.qres", "not a model");
    fails_with(&["estimate", "--model", &garbage, "--plan", &plan], 2, "magic");
}

#[test]
fn eval_in_distribution_scaling_tracks_mart() {
    let w = Work::new();
    let train = w.gen("train.jsonl", r#"{"queries": 600, "seed": 31}"#);
    let test = w.gen("test.jsonl", r#"{"queries": 150, "seed": 32}"#);
    let model = w.train(&train, "m.qres", &["--iterations", "300"]);
    let dir = w.s("report");
    ok(&[
        "eval",
        "--model",
        &model,
        "--test",
        &test,
        "--train",
        &train,
        "--baselines",
        "linear,opt",
        "--out-dir",
        &dir,
    ]);

    let csv = fs::read_to_string(w.path("report/report.csv")).unwrap();
    assert!(csv.starts_with("technique,resource,l1_err,r_lt_1.5,r_1.5_to_2,r_gt_2,n,excluded\n"), "{csv}");
    assert_eq!(csv.lines().count(), 1 + 2 * 4);
    let report = json(&w.path("report/report.json"));
    // Label noise is 5%; SCALING may not trail MART by more than that.
    for resource in ["cpu_us", "logical_io"] {
        let s = report_row(&report, "SCALING", resource)["l1_err"].as_f64().unwrap();
        let m = report_row(&report, "MART", resource)["l1_err"].as_f64().unwrap();
        assert!(s <= m + 0.05, "{resource}: SCALING {s} vs MART {m}");
    }
}

#[test]
fn eval_on_larger_data_favours_scaling() {
    let w = Work::new();
    let train = w.gen("train.jsonl", r#"{"queries": 600, "seed": 41, "scales": [1, 2, 4]}"#);
    let test = w.gen("test.jsonl", r#"{"queries": 200, "seed": 42, "scales": [8, 10]}"#);
    let model = w.train(&train, "m.qres", &["--iterations", "300"]);
    let dir = w.s("report");
    ok(&["eval", "--model", &model, "--test", &test, "--out-dir", &dir]);
    let report = json(&w.path("report/report.json"));
    for resource in ["cpu_us", "logical_io"] {
        let s = report_row(&report, "SCALING", resource)["r_above_2"].as_f64().unwrap();
        let m = report_row(&report, "MART", resource)["r_above_2"].as_f64().unwrap();
        assert!(s < m, "{resource}: SCALING R>2 {s} vs MART {m}");
    }
}

#[test]
fn eval_rejects_empty_test_corpus() {
    let w = Work::new();
    let corpus = w.gen("c.jsonl", r#"{"queries": 30, "seed": 5}"#);
    let model = w.train(&corpus, "m.qres", &["--iterations", "10"]);
    let empty = w.write("empty.jsonl", "");
    fails_with(&["eval", "--model", &model, "--test", &empty, "--out-dir", &w.s("r")], 2, "empty");
    fails_with(
        &["eval", "--model", &model, "--test", &corpus, "--baselines", "opt", "--out-dir", &w.s("r")],
        1,
        "--train",
    );
}

#[test]
fn fit_scaling_picks_the_planted_form() {
    let w = Work::new();
    let mut csv = String::from("cin,usage\n");
    for k in 0..10 {
        let x = 1000.0 * f64::from(1 << k);
        csv.push_str(&format!("{x},{}\n", 3.0 * x * x.log2()));
    }
    let obs = w.write("obs.csv", &csv);
    let report: Value = serde_json::from_str(&ok(&["fit-scaling", "--observations", &obs])).unwrap();
    assert_eq!(report["selected"]["kind"], "NLogN");
    assert!((report["selected"]["alpha"].as_f64().unwrap() - 3.0).abs() < 1e-9);
    assert_eq!(report["features"], serde_json::json!(["cin"]));

    let mut pair = String::from("a,b,usage\n");
    for (a, b) in [(10.0, 20.0), (30.0, 5.0), (7.0, 7.0), (50.0, 40.0), (2.0, 90.0)] {
        pair.push_str(&format!("{a},{b},{}\n", 2.0 * a * b));
    }
    let obs = w.write("pair.csv", &pair);
    let out = w.s("pair.json");
    ok(&["fit-scaling", "--observations", &obs, "--out", &out]);
    assert_eq!(json(Path::new(&out))["selected"]["kind"], "Product2");

    let bad = w.write("bad.csv", "usage\n1\n");
    fails_with(&["fit-scaling", "--observations", &bad], 2, "feature columns");
}

#[test]
fn fit_scaling_choices_feed_training() {
    let w = Work::new();
    let corpus = w.gen("c.jsonl", r#"{"queries": 120, "seed": 6}"#);
    let choices = w.s("choices.json");
    ok(&["fit-scaling", "--corpus", &corpus, "--out", &choices]);
    let entries = json(Path::new(&choices));
    let sort = entries
        .as_array()
        .unwrap()
        .iter()
        .find(|e| e["op"] == "Sort" && e["resource"] == "cpu_us" && e["features"] == serde_json::json!(["CIN1"]))
        .expect("sort/CIN1 choice");
    assert_eq!(sort["form"]["kind"], "NLogN");

    w.train(&corpus, "a.qres", &["--iterations", "30", "--scaling", &choices]);
    w.train(&corpus, "b.qres", &["--iterations", "30"]);
    assert_eq!(fs::read(w.path("a.qres")).unwrap(), fs::read(w.path("b.qres")).unwrap());
}

#[test]
fn inspect_dumps_models_and_features() {
    let w = Work::new();
    let corpus = w.gen("c.jsonl", r#"{"queries": 60, "seed": 12}"#);
    let model = w.train(&corpus, "m.qres", &["--iterations", "5", "--resource", "cpu"]);
    let dump: Value = serde_json::from_str(&ok(&["inspect", &model])).unwrap();
    assert_eq!(dump["format_version"], 1);
    let fam = &dump["families"][0];
    assert_eq!(fam["resource"], "cpu_us");
    let mart = &fam["models"][0]["mart"];
    assert_eq!(mart["tree_count"], 5);
    assert_eq!(mart["trees"].as_array().unwrap().len(), 5);
    assert!(fam["models"]
        .as_array()
        .unwrap()
        .iter()
        .any(|m| m["kind"] == "combined" && m["scale_terms"][0]["form"]["kind"].is_string()));

    let summary: Value = serde_json::from_str(&ok(&["inspect", &model, "--summary"])).unwrap();
    assert!(summary["families"][0]["models"][0]["mart"].get("trees").is_none());

    let csv = ok(&["inspect", "--features", &corpus]);
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("query_id,node,op,COUT"));
    let plans = read_corpus(fs::read_to_string(&corpus).unwrap().as_bytes()).unwrap();
    assert_eq!(lines.count(), plans.iter().map(QueryPlan::node_count).sum::<usize>());
}

#[test]
fn usage_errors_exit_with_one() {
    let w = Work::new();
    fails_with(&["gen"], 1, "--out");
    fails_with(&["frobnicate"], 1, "unrecognized subcommand");
    fails_with(&["train", "--corpus", "c", "--out", "m", "--iterations", "0"], 1, "iterations");
    fails_with(&["estimate", "--model", "m", "--plan", "p", "--resource", "disk"], 1, "unknown resource");
    fails_with(&["gen", "--out", &w.s("x"), "--spec", &w.s("missing.json")], 2, "missing.json");
    assert_eq!(qres(&["--help"]).status.code(), Some(0));
    assert_eq!(qres(&["--version"]).status.code(), Some(0));
}
