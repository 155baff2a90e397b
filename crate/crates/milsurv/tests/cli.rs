use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn milsurv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_milsurv")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Relative path to file bytes, for comparing output trees.
fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn last_json_line(text: &str) -> serde_json::Value {
    let line = text.lines().rev().find(|l| l.starts_with('{')).expect("a JSON line");
    serde_json::from_str(line).unwrap()
}

fn small_cohort(out: &Path, extractors: &str) {
    let o = milsurv(&[
        "synth", "--n", "40", "--d", "8", "--seed", "3", "--extractors", extractors, "--min-patches", "4", "--max-patches", "9",
        "--out", p(out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn paramcount_prints_the_count_and_the_resolved_config() {
    for (head, count) in [("mean", "526852"), ("max", "526852"), ("abmil", "592645"), ("transmil", "2673172")] {
        let o = milsurv(&["paramcount", "--head", head, "--dim", "1024"]);
        assert_eq!(o.status.code(), Some(0));
        assert_eq!(stdout(&o).trim(), count);
        assert!(stderr(&o).contains("\"input_dim\":1024"), "{}", stderr(&o));
    }
}

#[test]
fn unknown_flags_exit_one_with_a_json_error() {
    let o = milsurv(&["paramcount", "--head", "mean", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    let err = last_json_line(&stderr(&o));
    assert_eq!(err["error"], "usage");
    assert_eq!(err["exit_code"], 1);

    let o = milsurv(&["paramcount", "--head", "resnet"]);
    assert_eq!(o.status.code(), Some(1));

    assert_eq!(milsurv(&["--help"]).status.code(), Some(0));
    assert_eq!(milsurv(&["train", "--help"]).status.code(), Some(0));
}

#[test]
fn synth_is_reproducible_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = milsurv(&["synth", "--n", "100", "--censor", "0.45", "--seed", "7", "--out", p(out)]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        assert!(stderr(&o).contains("\"seed\":7"));
    }
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta.len(), 101);
    assert_eq!(ta, tb);
    let summary: serde_json::Value = serde_json::from_str(&stdout(&milsurv(&[
        "synth", "--n", "100", "--censor", "0.45", "--seed", "7", "--out", p(&dir.path().join("c")),
    ])))
    .unwrap();
    let realized = summary["realized_censor_fraction"].as_f64().unwrap();
    assert!((realized - 0.45).abs() <= 0.05, "{realized}");
}

#[test]
fn concat_writes_ensemble_files_with_the_summed_width() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    small_cohort(&data, "uni,hibou-base");
    let ens = dir.path().join("ens");
    let o = milsurv(&[
        "concat", "--parts", "uni,hibou-base", "--in", p(&data.join("features")), "--out", p(&ens),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let summary: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(summary["d"], 1792);
    assert_eq!(summary["written"], 40);
    let registry = milsurv_core::features::ExtractorRegistry::default();
    let fm = milsurv::store::read_features(&ens.join("uni+hibou-base/SYN-0000-01.milf"), &registry).unwrap();
    assert_eq!((fm.d(), fm.extractor_id.as_str()), (1792, "uni+hibou-base"));
}

#[test]
fn ingest_reports_rows_and_rejects_corrupt_files() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    small_cohort(&data, "synthetic");
    let manifest = data.join("manifest.csv");
    let features = data.join("features");
    let o = milsurv(&["ingest", "--manifest", p(&manifest), "--features", p(&features), "--extractors", "synthetic"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["rows"], 40);
    assert_eq!(report["sets"][0]["d"], 8);

    // A missing file drops the row; a flipped byte fails validation.
    fs::remove_file(features.join("synthetic/SYN-0001-01.milf")).unwrap();
    let o = milsurv(&["ingest", "--manifest", p(&manifest), "--features", p(&features), "--extractors", "synthetic"]);
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["rows"], 39);
    assert_eq!(report["rejected"][0]["case_id"], "SYN-0001");

    let victim = features.join("synthetic/SYN-0002-01.milf");
    let mut bytes = fs::read(&victim).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    fs::write(&victim, bytes).unwrap();
    let o = milsurv(&["ingest", "--manifest", p(&manifest), "--features", p(&features), "--extractors", "synthetic"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(last_json_line(&stderr(&o))["error"], "corrupt");
}

#[test]
fn split_writes_every_case_once() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    small_cohort(&data, "synthetic");
    let out = dir.path().join("splits.csv");
    let o = milsurv(&["split", "--manifest", p(&data.join("manifest.csv")), "--folds", "4", "--seed", "1", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let split = milsurv::splits::read_splits(&out).unwrap();
    assert_eq!(split.k, 4);
    assert_eq!(split.fold_sizes(), vec![10, 10, 10, 10]);

    let o = milsurv(&["split", "--manifest", p(&data.join("manifest.csv")), "--folds", "1", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_eval_and_report_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    small_cohort(&data, "synthetic");
    let run = dir.path().join("run");
    let (manifest, features) = (data.join("manifest.csv"), data.join("features"));
    let args = [
        "train", "--manifest", p(&manifest), "--features", p(&features), "--extractors",
        "synthetic", "--head", "mean,abmil", "--epochs", "3", "--folds", "2", "--hidden-dim", "16", "--attn-dim", "8",
        "--seed", "5", "--dataset", "SYN", "--out", p(&run),
    ];
    let o = milsurv(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("| MeanMIL | synthetic |"), "{}", stdout(&o));
    assert!(stdout(&o).contains("| ABMIL | synthetic |"), "{}", stdout(&o));
    for f in ["config.json", "splits.csv", "report.csv", "report.md", "cells/abmil__synthetic/fold1/best.milc"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let log = fs::read_to_string(run.join("cells/mean__synthetic/fold0/log.csv")).unwrap();
    assert!(log.starts_with("epoch,train_loss,val_cindex"));

    let o = milsurv(&["eval", "--run", p(&run)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let mut rows = csv::Reader::from_reader(o.stdout.as_slice());
    let rows: Vec<csv::StringRecord> = rows.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 4);

    let csv_out = dir.path().join("merged.csv");
    let o = milsurv(&["report", "--runs", p(&run), "--format", "csv", "--out", p(&csv_out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(fs::read(&csv_out).unwrap(), fs::read(run.join("report.csv")).unwrap());

    let o = milsurv(&["report", "--runs", p(&run.join("report.csv"))]);
    assert!(stdout(&o).contains("| Model | Extractors | SYN | Average |"));
}

#[test]
fn output_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    small_cohort(&data, "synthetic");
    let root = dir.path().join("runs");
    let o = Command::new(env!("CARGO_BIN_EXE_milsurv"))
        .args([
            "train", "--manifest", p(&data.join("manifest.csv")), "--features", p(&data.join("features")),
            "--extractors", "synthetic", "--epochs", "2", "--folds", "2", "--hidden-dim", "8", "--seed", "1",
        ])
        .env(milsurv::cli::OUTPUT_ROOT_ENV, &root)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let runs: Vec<_> = fs::read_dir(&root).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(runs.len(), 1);
    assert!(runs[0].join("report.csv").is_file());
}

#[test]
fn bad_presets_and_hyperparameters_are_validation_errors() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    small_cohort(&data, "synthetic");
    let (manifest, features, run) = (data.join("manifest.csv"), data.join("features"), dir.path().join("run"));
    let train = |extractors: &str, extra: &[&str]| {
        let mut args = vec!["train", "--manifest", p(&manifest), "--features", p(&features), "--out", p(&run)];
        args.extend(["--extractors", extractors]);
        args.extend_from_slice(extra);
        milsurv(&args).status.code()
    };
    assert_eq!(train("synthetic", &["--preset", "gbm"]), Some(1));
    assert_eq!(train("synthetic", &["--lr", "-1"]), Some(1));
    assert_eq!(train("synthetic", &["--head", "mean,resnet"]), Some(1));
    // The manifest has no uni column.
    assert_eq!(train("uni", &[]), Some(1));
}

#[test]
fn gradcheck_passes_and_lists_every_check() {
    let o = milsurv(&["gradcheck", "--seed", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let text = stdout(&o);
    assert!(text.lines().all(|l| l.ends_with(" ok")));
    for head in ["MeanMIL", "MaxMIL", "ABMIL", "TransMIL"] {
        assert!(text.lines().any(|l| l.starts_with("head") && l.contains(head)), "{head}");
    }
}
