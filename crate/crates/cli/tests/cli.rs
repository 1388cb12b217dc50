use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use neuroflow_core::synth;

fn neuroflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_neuroflow")).args(args).output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn run_args<'a>(i: &'a synth::RunInputs, out: &'a Path) -> Vec<&'a str> {
    vec![
        "run", "--objective", p(&i.objective), "--dataset", p(&i.dataset), "--cards", p(&i.cards),
        "--policy", "scripted", "--script", p(&i.script), "--config", p(&i.config), "--out", p(out),
    ]
}

#[test]
fn run_happy_path_writes_three_outputs_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let inputs = synth::write_run_inputs(dir.path(), &synth::happy_script(), "").unwrap();
    let out = dir.path().join("out");
    let o = neuroflow(&run_args(&inputs, &out));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["trace.jsonl", "deliverables.json", "run_stats.tsv"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let deliverables: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("deliverables.json")).unwrap()).unwrap();
    assert_eq!(deliverables["completed"], true);
    assert_eq!(deliverables["manifest"].as_array().unwrap().len(), 3);
    let stats = fs::read_to_string(out.join("run_stats.tsv")).unwrap();
    let mut lines = stats.lines();
    let header: Vec<&str> = lines.next().unwrap().split('\t').collect();
    let row: Vec<&str> = lines.next().unwrap().split('\t').collect();
    let col = |name: &str| row[header.iter().position(|h| *h == name).unwrap()];
    assert_eq!(col("n_pipelines_explored"), "2");
    assert_eq!(col("completed"), "true");

    let first = fs::read(out.join("trace.jsonl")).unwrap();
    let o = neuroflow(&run_args(&inputs, &out));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(first, fs::read(out.join("trace.jsonl")).unwrap());
}

#[test]
fn run_missing_cards_is_a_usage_error_naming_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let mut inputs = synth::write_run_inputs(dir.path(), &synth::happy_script(), "").unwrap();
    inputs.cards = dir.path().join("nope");
    let o = neuroflow(&run_args(&inputs, &dir.path().join("out")));
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--cards"), "{}", stderr(&o));
}

#[test]
fn run_budget_exhaustion_exits_3_with_complete_trace() {
    let dir = tempfile::tempdir().unwrap();
    let inputs = synth::write_run_inputs(dir.path(), &synth::looping_script(), "[budget]\nmax_react_steps = 25").unwrap();
    let out = dir.path().join("out");
    let o = neuroflow(&run_args(&inputs, &out));
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    let ledger = neuroflow_core::ledger::read_ledger(&out.join("trace.jsonl")).unwrap();
    assert_eq!(ledger.steps.len(), 25);
    assert!(ledger.close.is_some());
}

#[test]
fn run_bad_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let inputs = synth::write_run_inputs(dir.path(), &synth::happy_script(), "unknown_key = 1").unwrap();
    let o = neuroflow(&run_args(&inputs, &dir.path().join("out")));
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

fn write_iqms(path: &Path) {
    let mut tsv = String::from("subject_id\tsnr_total\tcjv\n");
    for mv in synth::iqm_rows() {
        tsv.push_str(&format!("{}\t{}\t{}\n", mv.subject, mv.metrics["snr_total"], mv.metrics["cjv"]));
    }
    fs::write(path, tsv).unwrap();
}

#[test]
fn qc_screen_flags_the_planted_outlier() {
    let dir = tempfile::tempdir().unwrap();
    let table = dir.path().join("iqms.tsv");
    write_iqms(&table);
    let out = dir.path().join("out");
    let o = neuroflow(&["qc", "screen", "--metrics", p(&table), "--rule", "iqr", "--metric", "snr_total", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("flagged.json")).unwrap()).unwrap();
    assert_eq!(v["flagged"], serde_json::json!(["s10"]));
}

#[test]
fn qc_checkpoint_on_coregistration_cohort_fails_one() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = dir.path().join("cohort");
    synth::write_cohort(&cohort, &synth::coregistration_cohort()).unwrap();
    let out = dir.path().join("out");
    let o = neuroflow(&["qc", "checkpoint", "--cohort", p(&cohort), "--checkpoint", "bold_to_t1w", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let tsv = fs::read_to_string(out.join("verdicts.tsv")).unwrap();
    let fails: Vec<&str> = tsv.lines().filter(|l| l.split('\t').nth(1) == Some("FAIL")).collect();
    assert_eq!(fails.len(), 1, "{tsv}");
    assert!(fails[0].starts_with("s9\t"));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("verdicts.json")).unwrap()).unwrap();
    assert_eq!(report["inspected"], serde_json::json!(["s7", "s9"]));
}

#[test]
fn qc_metrics_writes_tsv_and_rejects_mismatched_dims() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = dir.path().join("cohort");
    let mut subjects = synth::coregistration_cohort();
    synth::write_cohort(&cohort, &subjects).unwrap();
    let out = dir.path().join("out");
    let o = neuroflow(&["qc", "metrics", "--cohort", p(&cohort), "--checkpoint", "bold_to_t1w", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let tsv = fs::read_to_string(out.join("metrics.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 13);

    let small = neuroflow_core::qc::VoxelGrid::zeros([4, 4, 4], [1.0; 3]);
    subjects[0].mask = Some(small);
    let bad = dir.path().join("bad");
    synth::write_cohort(&bad, &subjects[..1]).unwrap();
    let o = neuroflow(&["qc", "metrics", "--cohort", p(&bad), "--checkpoint", "bold_to_t1w", "--out", p(&out)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("dimensions differ"), "{}", stderr(&o));
}

#[test]
fn qc_judge_inspects_requested_subjects() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = dir.path().join("cohort");
    synth::write_cohort(&cohort, &synth::coregistration_cohort()).unwrap();
    let out = dir.path().join("out");
    let o = neuroflow(&[
        "qc", "judge", "--cohort", p(&cohort), "--checkpoint", "bold_to_t1w", "--subject", "s7", "--subject", "s9",
        "--out", p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let tsv = fs::read_to_string(out.join("judgments.tsv")).unwrap();
    let rows: Vec<Vec<&str>> = tsv.lines().skip(1).map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][..2], ["s7", "ACCEPTABLE"]);
    assert_eq!(rows[1][..2], ["s9", "REJECTED"]);
}

fn write_ratings(path: &Path, n: usize, fails: &[usize]) {
    let mut csv = String::from("item_id,label\n");
    for i in 0..n {
        csv.push_str(&format!("item{i:03},{}\n", if fails.contains(&i) { "FAIL" } else { "PASS" }));
    }
    fs::write(path, csv).unwrap();
}

#[test]
fn agree_reports_identity_and_table_format() {
    let dir = tempfile::tempdir().unwrap();
    let fails = [3, 17, 40, 88, 120, 151];
    let raters: Vec<_> = (1..=3).map(|i| dir.path().join(format!("rater{i}.csv"))).collect();
    for r in &raters {
        write_ratings(r, 160, &fails);
    }
    let system = dir.path().join("hierarchical.csv");
    write_ratings(&system, 160, &fails);
    let out = dir.path().join("out");
    let o = neuroflow(&[
        "agree", "--system", p(&system), "--raters", p(&raters[0]), p(&raters[1]), p(&raters[2]),
        "--checkpoint", "bold_to_t1w", "--out", p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let tsv = fs::read_to_string(out.join("agreement.tsv")).unwrap();
    for line in tsv.lines().skip(1) {
        assert_eq!(line.split('\t').nth(6), Some("1"), "{line}");
    }
    let rates = fs::read_to_string(out.join("pass_rates.tsv")).unwrap();
    assert!(rates.contains("hierarchical\t96.2% (154/160)"), "{rates}");
}

#[test]
fn agree_rejects_a_rater_missing_an_item() {
    let dir = tempfile::tempdir().unwrap();
    let system = dir.path().join("system.csv");
    write_ratings(&system, 20, &[1]);
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let c = dir.path().join("c.csv");
    write_ratings(&a, 20, &[1]);
    write_ratings(&b, 20, &[]);
    write_ratings(&c, 19, &[]);
    let o = neuroflow(&[
        "agree", "--system", p(&system), "--raters", p(&a), p(&b), p(&c), "--checkpoint", "raw_t1w", "--out",
        p(&dir.path().join("out")),
    ]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn stats_summarizes_and_rejects_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let inputs = synth::write_run_inputs(dir.path(), &synth::happy_script(), "").unwrap();
    let out = dir.path().join("run");
    assert_eq!(code(&neuroflow(&run_args(&inputs, &out))), 0);
    let trace = out.join("trace.jsonl");
    let sout = dir.path().join("stats");
    let o = neuroflow(&["stats", "--traces", p(&trace), "--out", p(&sout)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary = fs::read_to_string(sout.join("summary.tsv")).unwrap();
    assert!(summary.contains("n_pipelines_explored\t2.0 (2\u{2013}2)"), "{summary}");

    let text = fs::read_to_string(&trace).unwrap();
    let corrupted = text.replacen("delivered to DataAwareness", "delivered to Processing", 1);
    let bad = dir.path().join("bad.jsonl");
    fs::write(&bad, corrupted).unwrap();
    let o = neuroflow(&["stats", "--traces", p(&bad), "--out", p(&sout)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}
