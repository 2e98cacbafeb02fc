use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

fn forest(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_forest")).args(args).current_dir(cwd).output().unwrap()
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn demo_pipeline_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = forest(&["demo", "--dir", "demo"], d);
    assert!(o.status.success(), "{}", text(&o.stderr));

    let a = forest(&["pipeline", "--config", "demo/pipeline.toml", "--out-dir", "run_a", "--threads", "1"], d);
    let b = forest(&["pipeline", "--config", "demo/pipeline.toml", "--out-dir", "run_b", "--threads", "3"], d);
    assert!(a.status.success(), "{}", text(&a.stderr));
    assert!(b.status.success(), "{}", text(&b.stderr));
    assert!(text(&a.stdout).contains("scored 400 records with mode forest_score"));
    let (sa, sb) = (snapshot(&d.join("run_a")), snapshot(&d.join("run_b")));
    assert!(sa.contains_key("summary.json") && sa.contains_key("eval/eval_mask.json"));
    assert_eq!(sa, sb);
}

#[test]
fn subcommands_on_demo_data() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(forest(&["demo", "--dir", "."], d).status.success());
    let cats = ["--categories", "categories.jsonl"];

    let o = forest(&[&["build-tree", "--kind", "visual", "--features", "features.txt", "--out", "v.json"][..], &cats].concat(), d);
    assert!(o.status.success(), "{}", text(&o.stderr));
    assert!(text(&o.stdout).starts_with("tree visual: M=25 cluster sizes ["));
    let o = forest(&[&["build-tree", "--kind", "geometric", "--masks", "masks.jsonl", "--out", "g.json"][..], &cats].concat(), d);
    assert!(text(&o.stdout).starts_with("tree geometric: M=50"), "{}", text(&o.stderr));
    let o = forest(&[&["build-tree", "--kind", "lexical", "--hierarchy", "hierarchy.json", "--out", "l.json"][..], &cats].concat(), d);
    assert!(text(&o.stdout).starts_with("tree lexical: M=12"));

    let trees = ["--tree", "trees/lexical.json", "--tree", "trees/visual.json"];
    let o = forest(&[&["score", "--records", "records.jsonl", "--mode", "forest_vote", "--out", "s.jsonl"][..], &cats, &trees].concat(), d);
    assert!(o.status.success(), "{}", text(&o.stderr));
    assert_eq!(std::fs::read_to_string(d.join("s.jsonl")).unwrap().lines().count(), 400);

    let o = forest(&[&["analyze", "--scores", "s.jsonl", "--out-dir", "an", "--eps-neg", "0.05"][..], &cats].concat(), d);
    assert!(o.status.success(), "{}", text(&o.stderr));
    assert!(d.join("an/density_forest_vote_incorrect.csv").exists());

    let o = forest(&[&["nms", "--proposals", "proposals.jsonl", "--scheme", "linear", "--out-dir", "nms"][..], &cats].concat(), d);
    assert!(o.status.success(), "{}", text(&o.stderr));
    assert!(text(&o.stdout).contains("rare"));
    let csv = std::fs::read_to_string(d.join("nms/nms_thresholds.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| {
        let t: f64 = l.rsplit(',').next().unwrap().parse().unwrap();
        (0.65..=0.95).contains(&t)
    }));

    let o = forest(&[&["eval", "--detections", "detections.jsonl", "--ground-truth", "ground_truth.jsonl", "--out-dir", "ev"][..], &cats].concat(), d);
    assert!(o.status.success(), "{}", text(&o.stderr));
    assert!(text(&o.stdout).contains("Box: AP") && text(&o.stdout).contains("Mask: AP"));
}

#[test]
fn exit_codes_and_error_locations() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(forest(&["demo", "--dir", "."], d).status.success());

    // I/O failure
    let o = forest(&["score", "--categories", "categories.jsonl", "--records", "missing.jsonl"], d);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("missing.jsonl"));

    // validation failure with file and line
    let recs = std::fs::read_to_string(d.join("records.jsonl")).unwrap();
    let mut lines: Vec<&str> = recs.lines().take(4).collect();
    lines.push(r#"{"object_id":"bad","fine_logits":[0.0]}"#);
    std::fs::write(d.join("bad.jsonl"), lines.join("\n")).unwrap();
    let o = forest(&["score", "--categories", "categories.jsonl", "--records", "bad.jsonl", "--mode", "baseline"], d);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o.stderr).contains("bad.jsonl:5"), "{}", text(&o.stderr));

    // missing tree named
    let o = forest(&["score", "--categories", "categories.jsonl", "--records", "records.jsonl", "--mode", "tree:nope", "--tree", "trees/visual.json"], d);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o.stderr).contains("nope"), "{}", text(&o.stderr));

    // bad flag values
    assert_eq!(forest(&["score", "--mode", "sideways"], d).status.code(), Some(1));
    assert_eq!(forest(&["analyze", "--eps-gt", "1.5", "--categories", "categories.jsonl"], d).status.code(), Some(1));
    assert_eq!(forest(&["nms", "--alpha-f", "0.95", "--categories", "categories.jsonl", "--proposals", "proposals.jsonl"], d).status.code(), Some(1));
    assert_eq!(forest(&["pipeline"], d).status.code(), Some(1));
    assert_eq!(forest(&["--help"], d).status.code(), Some(0));
}

#[test]
fn as_printed_flag_changes_linear_thresholds() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(forest(&["demo", "--dir", "."], d).status.success());
    let run = |extra: &[&str], out: &str| {
        let args = [&["nms", "--categories", "categories.jsonl", "--proposals", "proposals.jsonl", "--scheme", "linear", "--out-dir", out][..], extra].concat();
        assert!(forest(&args, d).status.success());
        std::fs::read_to_string(d.join(out).join("nms_thresholds.csv")).unwrap()
    };
    let corrected = run(&[], "a");
    let printed = run(&["--as-printed"], "b");
    let first = |csv: &str| csv.lines().nth(1).unwrap().rsplit(',').next().unwrap().parse::<f64>().unwrap();
    // class 0 is the most frequent class
    assert_eq!(first(&corrected), 0.65);
    assert_eq!(first(&printed), 0.85);
}
