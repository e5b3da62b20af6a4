//! Subcommand behavior: exit codes, warnings, and report formats.

use std::path::Path;
use std::process::{Command, Output};

fn vtqa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vtqa"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write(path: &Path, content: &str) {
    std::fs::write(path, content).unwrap();
}

#[test]
fn validate_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.json");
    write(
        &good,
        r#"[{"qid":"q1","image_local_path":"i.png","text":"t","question":"q","answer":"suit","answer_type":"G"}]"#,
    );
    let out = vtqa(&["validate", good.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("ok: 1 record(s)"));

    // yes_or_no on an E-type record: exit 1 and the qid is named on stderr.
    let bad = dir.path().join("bad.json");
    write(
        &bad,
        r#"[{"qid":"q9","image_local_path":"i.png","text":"t","question":"q","answer":"suit","answer_type":"E","yes_or_no":"yes"}]"#,
    );
    let out = vtqa(&["validate", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("q9"), "{stderr}");

    // Empty file: exit 0 with a warning.
    let empty = dir.path().join("empty.json");
    write(&empty, "");
    let out = vtqa(&["validate", empty.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));

    // Missing file: exit 2.
    let out = vtqa(&["validate", dir.path().join("nope.json").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn score_fixture_matches_hand_computed_report() {
    let dir = tempfile::tempdir().unwrap();
    let gold = dir.path().join("gold.json");
    write(
        &gold,
        r#"[
        {"qid":"q1","image_local_path":"i","text":"t","question":"q","answer":"yes","answer_type":"YN","yes_or_no":"yes"},
        {"qid":"q2","image_local_path":"i","text":"t","question":"q","answer":"no","answer_type":"YN","yes_or_no":"no"},
        {"qid":"q3","image_local_path":"i","text":"t","question":"q","answer":"suit","answer_type":"E"},
        {"qid":"q4","image_local_path":"i","text":"t","question":"q","answer":"suit","answer_type":"E"},
        {"qid":"q5","image_local_path":"i","text":"t","question":"q","answer":"kavelier","answer_type":"G"}
        ]"#,
    );
    let pred = dir.path().join("pred.json");
    write(
        &pred,
        r#"{"q1":"yes","q2":"yes","q3":"suit","q4":"suit jacket","q5":"elena"}"#,
    );
    let report_path = dir.path().join("report.json");
    let out = vtqa(&[
        "score",
        "--pred",
        pred.to_str().unwrap(),
        "--gold",
        gold.to_str().unwrap(),
        "--out",
        report_path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.starts_with("EM\tYN-Acc\tE-F1\tG-F1\n"), "{stdout}");
    assert!(stdout.contains("0.4000\t0.5000\t0.8333\t0.0000"), "{stdout}");

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert!((report["em"].as_f64().unwrap() - 0.4).abs() < 1e-12);
    assert!((report["yn_acc"].as_f64().unwrap() - 0.5).abs() < 1e-12);
    assert!((report["e_f1"].as_f64().unwrap() - 5.0 / 6.0).abs() < 1e-12);
    assert_eq!(report["g_f1"].as_f64().unwrap(), 0.0);
    assert_eq!(report["counts"]["total"].as_u64().unwrap(), 5);
}

#[test]
fn score_missing_qid_warns_but_scores() {
    let dir = tempfile::tempdir().unwrap();
    let gold = dir.path().join("gold.json");
    write(
        &gold,
        r#"[
        {"qid":"a","image_local_path":"i","text":"t","question":"q","answer":"suit","answer_type":"E"},
        {"qid":"b","image_local_path":"i","text":"t","question":"q","answer":"suit","answer_type":"E"}
        ]"#,
    );
    let pred = dir.path().join("pred.json");
    write(&pred, r#"{"a":"suit"}"#);
    let out = vtqa(&[
        "score",
        "--pred",
        pred.to_str().unwrap(),
        "--gold",
        gold.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
    assert!(String::from_utf8_lossy(&out.stdout).contains("0.5000"));
}

#[test]
fn score_respects_custom_dictionary() {
    let dir = tempfile::tempdir().unwrap();
    let gold = dir.path().join("gold.json");
    write(
        &gold,
        r#"[{"qid":"a","image_local_path":"i","text":"t","question":"q","answer":"sure","answer_type":"YN","yes_or_no":"yes"}]"#,
    );
    let pred = dir.path().join("pred.json");
    write(&pred, r#"{"a":"sure"}"#);

    // Without the custom entry the prediction is unknown -> wrong.
    let out = vtqa(&["score", "--pred", pred.to_str().unwrap(), "--gold", gold.to_str().unwrap()]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("0.0000"));

    let dict = dir.path().join("dict.tsv");
    write(&dict, "# custom entries\nsure\tyes\n");
    let out = vtqa(&[
        "score",
        "--pred",
        pred.to_str().unwrap(),
        "--gold",
        gold.to_str().unwrap(),
        "--dict",
        dict.to_str().unwrap(),
    ]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("1.0000"));
}

#[test]
fn gen_synth_rejects_infeasible_spec() {
    let dir = tempfile::tempdir().unwrap();
    let out = vtqa(&[
        "gen-synth",
        "--out",
        dir.path().to_str().unwrap(),
        "--yn",
        "0",
        "--e",
        "0",
        "--g",
        "0",
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_rejects_unknown_config_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    write(&cfg, "d_latent = 16\nnot_a_key = 3\n");
    let data = dir.path().join("d.json");
    write(&data, "[]");
    let out = vtqa(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--features",
        data.to_str().unwrap(),
        "--out",
        dir.path().join("run").to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not_a_key"));
}

#[test]
fn config_file_applies_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    // End to end: config sets epochs=1; the flag overrides to 2.
    let synth_dir = dir.path().join("synth");
    let out = vtqa(&[
        "gen-synth",
        "--out",
        synth_dir.to_str().unwrap(),
        "--yn",
        "2",
        "--e",
        "2",
        "--g",
        "2",
        "--seed",
        "3",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let cfg = dir.path().join("run.cfg");
    write(
        &cfg,
        "epochs = 1\nbatch_size = 4\nlearning_rate = 1e-3\nd_image_in = 16\ntop_k = 2\nmodules = 1\ncmr_per_module = 1\n",
    );
    let run_dir = dir.path().join("run");
    let out = vtqa(&[
        "train",
        "--data",
        synth_dir.join("data.json").to_str().unwrap(),
        "--features",
        synth_dir.join("features.vtf").to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--dims",
        "8",
        "--heads",
        "2",
        "--epochs",
        "2",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run_dir.join("epoch_002.kcpt").exists());
    assert!(run_dir.join("final.kcpt").exists());
    assert!(!run_dir.join("epoch_003.kcpt").exists());
}

#[test]
fn f64_precision_flag_trains_and_predicts() {
    let dir = tempfile::tempdir().unwrap();
    let synth_dir = dir.path().join("synth");
    vtqa(&[
        "gen-synth", "--out", synth_dir.to_str().unwrap(),
        "--yn", "1", "--e", "1", "--g", "1", "--seed", "8",
    ]);
    let run_dir = dir.path().join("run");
    let out = vtqa(&[
        "train",
        "--data", synth_dir.join("data.json").to_str().unwrap(),
        "--features", synth_dir.join("features.vtf").to_str().unwrap(),
        "--out", run_dir.to_str().unwrap(),
        "--dims", "8", "--heads", "2", "--d-image", "16",
        "--k", "2", "--modules", "1", "--cmr", "1",
        "--epochs", "1", "--batch", "4", "--f64",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let preds = dir.path().join("p.json");
    let out = vtqa(&[
        "predict",
        "--ckpt", run_dir.join("final.kcpt").to_str().unwrap(),
        "--data", synth_dir.join("data.json").to_str().unwrap(),
        "--features", synth_dir.join("features.vtf").to_str().unwrap(),
        "--out", preds.to_str().unwrap(),
        "--f64",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let parsed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&preds).unwrap()).unwrap();
    assert_eq!(parsed.as_object().unwrap().len(), 3);
}

#[test]
fn predict_with_workers_matches_sequential() {
    let dir = tempfile::tempdir().unwrap();
    let synth_dir = dir.path().join("synth");
    vtqa(&[
        "gen-synth", "--out", synth_dir.to_str().unwrap(),
        "--yn", "2", "--e", "2", "--g", "2", "--seed", "5",
    ]);
    let run_dir = dir.path().join("run");
    let out = vtqa(&[
        "train",
        "--data", synth_dir.join("data.json").to_str().unwrap(),
        "--features", synth_dir.join("features.vtf").to_str().unwrap(),
        "--out", run_dir.to_str().unwrap(),
        "--dims", "8", "--heads", "2", "--d-image", "16",
        "--k", "2", "--modules", "1", "--cmr", "1",
        "--epochs", "1", "--batch", "4",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let p1 = dir.path().join("p1.json");
    let p4 = dir.path().join("p4.json");
    for (path, workers) in [(&p1, "1"), (&p4, "4")] {
        let out = vtqa(&[
            "predict",
            "--ckpt", run_dir.join("final.kcpt").to_str().unwrap(),
            "--data", synth_dir.join("data.json").to_str().unwrap(),
            "--features", synth_dir.join("features.vtf").to_str().unwrap(),
            "--out", path.to_str().unwrap(),
            "--workers", workers,
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p4).unwrap());

    // The prediction file parses as a qid -> answer object covering the set.
    let parsed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&p1).unwrap()).unwrap();
    let map = parsed.as_object().unwrap();
    assert_eq!(map.len(), 6);
    assert!(map.keys().all(|k| k.starts_with("synth-")));
}
