use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use spgm::fixtures::random_tree_data;
use spgm::format::load_mixture;
use spgm::learn::chow_liu;
use spgm::{log_likelihood, Dataset};

fn e1() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/e1.spgm")
}

fn spgm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spgm"))
        .args(args)
        .env_remove("SPGM_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    let text = String::from_utf8(out.stdout.clone()).unwrap();
    assert_eq!(text.lines().count(), 1, "{text}");
    serde_json::from_str(text.trim()).unwrap()
}

fn write_dataset(dir: &Path, name: &str) {
    // one sample split three ways keeps the splits on the same distribution
    let all = random_tree_data(7, 900, 42);
    for (split, range) in [("ts", 0..600), ("valid", 600..750), ("test", 750..900)] {
        let part: Vec<Vec<u8>> = range.map(|i| all.row(i).to_vec()).collect();
        std::fs::write(
            dir.join(format!("{name}.{split}.data")),
            Dataset::from_rows(&part).unwrap().to_text(),
        )
        .unwrap();
    }
}

#[test]
fn marginal_on_e1() {
    let v = json(&spgm(&["query", e1().to_str().unwrap(), "marginal", "A=0,B=0"]));
    assert!((v["probability"].as_f64().unwrap() - 0.468).abs() < 1e-12);
}

#[test]
fn independence_on_e1_reports_both_paths() {
    let v = json(&spgm(&["query", e1().to_str().unwrap(), "indep", "A", "B"]));
    assert_eq!(v["independent"], Value::Bool(false));
    assert_eq!(v["surviving_paths"], 2);

    let v = json(&spgm(&["query", e1().to_str().unwrap(), "indep", "A", "B", "context", "Z1=1"]));
    assert_eq!(v["surviving_paths"], 1);
}

#[test]
fn map_with_full_evidence_equals_the_marginal() {
    let path = e1();
    let m = json(&spgm(&["query", path.to_str().unwrap(), "marginal", "A=1,B=0,Z1=1"]));
    let p = json(&spgm(&["query", path.to_str().unwrap(), "map", "A=1,B=0,Z1=1"]));
    assert_eq!(m["probability"], p["value"]);
    let free = json(&spgm(&["query", path.to_str().unwrap(), "map"]));
    assert!((free["value"].as_f64().unwrap() - 0.378).abs() < 1e-12);
    assert_eq!(free["assignment"]["A"], 0);
}

#[test]
fn malformed_queries_fail() {
    let path = e1();
    for q in [
        vec!["bogus"],
        vec!["indep", "A"],
        vec!["indep", "A", "B", "given"],
        vec!["marginal", "A=7"],
        vec!["marginal", "Q=0"],
    ] {
        let mut args = vec!["query", path.to_str().unwrap()];
        args.extend(q.iter());
        let out = spgm(&args);
        assert!(!out.status.success(), "{q:?}");
        assert!(out.stdout.is_empty());
    }
}

#[test]
fn eval_single_row_is_log_of_the_marginal() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("one.data");
    std::fs::write(&file, "0,0\n").unwrap();
    let v = json(&spgm(&["eval", e1().to_str().unwrap(), "--file", file.to_str().unwrap()]));
    assert!((v["total_ll"].as_f64().unwrap() - 0.468f64.ln()).abs() < 1e-12);

    let out = spgm(&["eval", e1().to_str().unwrap(), "--file", file.to_str().unwrap(), "--format", "table"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("mean LL"));
}

#[test]
fn corrupted_model_is_a_parse_error_with_a_line() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.spgm");
    let text = std::fs::read_to_string(e1()).unwrap().replace("weights 0.7 0.3", "weights 0.7 x");
    std::fs::write(&bad, text).unwrap();
    let out = spgm(&["query", bad.to_str().unwrap(), "marginal"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.spgm:10"), "{err}");

    let wrong_version = dir.path().join("v2.spgm");
    std::fs::write(&wrong_version, std::fs::read_to_string(e1()).unwrap().replace("v1", "v2")).unwrap();
    assert!(!spgm(&["eval", wrong_version.to_str().unwrap(), "--file", bad.to_str().unwrap()]).status.success());
}

#[test]
fn arity_mismatch_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("three.data");
    std::fs::write(&file, "0,0,1\n").unwrap();
    let out = spgm(&["eval", e1().to_str().unwrap(), "--file", file.to_str().unwrap()]);
    assert!(!out.status.success());
}

#[test]
fn compile_reports_counts_and_writes_a_circuit() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("e1.spn");
    let v = json(&spgm(&["compile-spn", e1().to_str().unwrap(), "-o", out_path.to_str().unwrap()]));
    assert_eq!(v["subtrees"], 2);
    assert!(v["z_indicators"].as_u64().unwrap() > 0);
    let text = std::fs::read_to_string(&out_path).unwrap();
    let spn = spgm::spn::parse_circuit(&text).unwrap();
    assert_eq!(v["nodes"].as_u64().unwrap() as usize, spn.nodes().len());
}

#[test]
fn missing_data_directory_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = spgm(&["train", "nothing", "-o", dir.path().join("m.spgm").to_str().unwrap()]);
    assert!(!out.status.success());
    let out = spgm(&[
        "train",
        "nothing",
        "--data-dir",
        dir.path().to_str().unwrap(),
        "-o",
        dir.path().join("m.spgm").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
}

#[test]
fn single_tree_run_matches_chow_liu() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), "toy");
    let model = dir.path().join("cl.spgm");
    let v = json(&spgm(&[
        "train",
        "toy",
        "--data-dir",
        dir.path().to_str().unwrap(),
        "-o",
        model.to_str().unwrap(),
        "--mixture-size",
        "1",
        "--max-insertions",
        "0",
        "--threads",
        "1",
    ]));
    let triple = spgm::load_dataset(dir.path(), "toy").unwrap();
    let tree = chow_liu(&triple.train.weighted(1e-3)).unwrap();
    let expected = log_likelihood(&tree, &triple.test).unwrap().mean;
    assert_eq!(v["test_ll"].as_f64().unwrap(), expected);

    let e = json(&spgm(&[
        "eval",
        model.to_str().unwrap(),
        "--dataset",
        "toy",
        "--data-dir",
        dir.path().to_str().unwrap(),
    ]));
    assert_eq!(e["mean_ll"], v["test_ll"]);
}

#[test]
fn training_twice_gives_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), "toy");
    let run = |name: &str| {
        let model = dir.path().join(name);
        let metrics = dir.path().join(format!("{name}.jsonl"));
        let out = spgm(&[
            "--threads",
            "1",
            "train",
            "toy",
            "--data-dir",
            dir.path().to_str().unwrap(),
            "-o",
            model.to_str().unwrap(),
            "--metrics",
            metrics.to_str().unwrap(),
            "--mixture-size",
            "3",
            "--max-insertions",
            "4",
            "--max-iters",
            "5",
            "--fine-tune",
        ]);
        json(&out);
        (std::fs::read(model).unwrap(), std::fs::read(metrics).unwrap())
    };
    let a = run("a.spgm");
    let b = run("b.spgm");
    assert_eq!(a, b);
    let m = load_mixture(&dir.path().join("a.spgm")).unwrap();
    assert_eq!(m.len(), 3);
}
