use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tileseg::nnet::{save_checkpoint, Checkpoint, ModelParams, NetworkConfig, Tensor};
use tileseg::phantom::{vocabulary, PresetFile};
use tileseg::tiling::plan_tiles;
use tileseg::volio::{read_label_map, write_volume, Volume3D};

fn tileseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tileseg")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn noiseless_cohort(dir: &Path, n: usize) -> PathBuf {
    let mut phantom = PresetFile::builtin().adult;
    phantom.noise_sigma = 0.0;
    let spec = json!({ "phantom": phantom, "n": n, "cohort": "original", "id_prefix": "s-" });
    let path = dir.join("cohort.json");
    fs::write(&path, spec.to_string()).unwrap();
    let out = dir.join("cohort");
    let o = tileseg(&["phantom", "--spec", s(&path), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

/// One-channel network that passes the (non-negative) intensity through and
/// scores class c with 2·μ_c·x − μ_c², i.e. nearest class intensity wins.
/// On a noiseless phantom it reproduces the truth exactly.
fn oracle_checkpoint(path: &Path) {
    let p = PresetFile::builtin().adult;
    let means = [0.0, p.csf_intensity, p.gm_intensity, p.wm_intensity, p.hc_intensity];
    let config = NetworkConfig {
        in_channels: 1,
        hidden_channels: 1,
        hidden_layers: 1,
        num_classes: 5,
        normalize_input: false,
    };
    let mut w1 = vec![0.0f32; 27];
    w1[13] = 1.0;
    let tensors = vec![
        Tensor::from_vec(&[1, 1, 3, 3, 3], w1).unwrap(),
        Tensor::from_vec(&[1], vec![0.0]).unwrap(),
        Tensor::from_vec(&[5, 1, 1, 1, 1], means.iter().map(|m| (2.0 * m) as f32).collect()).unwrap(),
        Tensor::from_vec(&[5], means.iter().map(|m| (-m * m) as f32).collect()).unwrap(),
    ];
    let model = ModelParams::from_tensors(config.clone(), tensors, 0).unwrap();
    let plan = plan_tiles([32; 3], [3, 3, 3], [12; 3]).unwrap();
    let ck = Checkpoint {
        config,
        models: vec![model; plan.len()],
        plan,
        vocabulary: vocabulary(),
        regime: "baseline".into(),
        selected_epoch: 0,
        validation_curve: vec![],
    };
    save_checkpoint(&ck, path).unwrap();
}

#[test]
fn phantom_writes_cohort_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = tileseg(&["phantom", "--preset", "adult", "--n", "3", "--seed", "5", "--out", s(out)]);
        assert_eq!(code(&o), 0);
        assert!(String::from_utf8_lossy(&o.stdout).contains("3 subjects (seed 5)"));
    }
    let mut names: Vec<String> = fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names.iter().filter(|n| n.ends_with("_T1w.nii")).count(), 3);
    assert_eq!(names.iter().filter(|n| n.ends_with("_seg.nii")).count(), 3);
    assert!(names.contains(&"manifest.json".to_string()));
    for n in &names {
        assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap(), "{n} differs");
    }
}

#[test]
fn phantom_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    let o = tileseg(&["phantom", "--preset", "adult", "--n", "1", "--out", s(&blocker.join("sub"))]);
    assert_eq!(code(&o), 3);

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"n": 3}"#).unwrap();
    assert_eq!(code(&tileseg(&["phantom", "--spec", s(&bad), "--out", s(dir.path())])), 2);

    let missing = dir.path().join("missing.json");
    assert_eq!(code(&tileseg(&["phantom", "--spec", s(&missing), "--out", s(dir.path())])), 3);
    assert_eq!(code(&tileseg(&["phantom", "--out", s(dir.path())])), 2);
}

#[test]
fn segment_with_oracle_checkpoint_reproduces_truth() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = noiseless_cohort(dir.path(), 2);
    let ck = dir.path().join("oracle.tbnn");
    oracle_checkpoint(&ck);
    for id in ["s-000", "s-001"] {
        let out = dir.path().join(format!("{id}_pred.nii"));
        let image = cohort.join(format!("{id}_T1w.nii"));
        let o = tileseg(&["segment", "--model", s(&ck), "--image", s(&image), "--out", s(&out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let pred = read_label_map(&out).unwrap();
        let truth = read_label_map(cohort.join(format!("{id}_seg.nii"))).unwrap();
        assert_eq!(pred.labels(), truth.labels());
        assert_eq!(pred.dims(), truth.dims());

        let e = tileseg(&["eval", "--pred", s(&out), "--truth", s(&cohort.join(format!("{id}_seg.nii"))), "--format", "json"]);
        assert_eq!(code(&e), 0);
        let v: Value = serde_json::from_slice(&e.stdout).unwrap();
        assert_eq!(v[0]["mean_dsc"], 1.0);
    }

    let e = tileseg(&["eval", "--model", s(&ck), "--manifest", s(&cohort.join("manifest.json")), "--format", "csv"]);
    assert_eq!(code(&e), 0, "{}", String::from_utf8_lossy(&e.stderr));
    // Header plus one row per subject and label.
    assert_eq!(String::from_utf8_lossy(&e.stdout).lines().count(), 1 + 2 * 5);
}

#[test]
fn segment_rejects_incompatible_dims() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("oracle.tbnn");
    oracle_checkpoint(&ck);
    let image = dir.path().join("small.nii");
    write_volume(&Volume3D::filled([16, 16, 16], [1.0; 3], 0.5).unwrap(), &image).unwrap();
    let o = tileseg(&["segment", "--model", s(&ck), "--image", s(&image), "--out", s(&dir.path().join("o.nii"))]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("[32, 32, 32]"));
}

#[test]
fn stats_on_csv_columns() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("pairs.csv");
    fs::write(&csv, "a,b\n1,0\n2,0\n3,0\n4,0\n5,0\n6,0\n").unwrap();
    let o = tileseg(&["stats", "--input", s(&csv), "--x", "a", "--y", "b", "--comparisons", "3", "--format", "json"]);
    assert_eq!(code(&o), 0);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["p_two_sided"], 0.03125);
    assert_eq!(v["w_plus"], 21.0);
    assert_eq!(v["significant"], false);
    let md = tileseg(&["stats", "--input", s(&csv), "--x", "a", "--y", "b", "--comparisons", "3"]);
    assert!(String::from_utf8_lossy(&md.stdout).contains("0.0167"));
    assert_eq!(code(&tileseg(&["stats", "--input", s(&csv), "--x", "a", "--y", "zz"])), 2);
}

/// The shipped pediatric spec shrunk to 16³ volumes and a couple of epochs.
fn tiny_spec(dir: &Path) -> PathBuf {
    let text = fs::read_to_string(repo_root().join("configs/experiments/pediatric.json")).unwrap();
    let mut v: Value = serde_json::from_str(&text).unwrap();
    for (cohort, n) in [("pretrain_cohort", 10), ("original_cohort", 10), ("new_cohort", 10)] {
        v[cohort]["generate"]["phantom"]["dims"] = json!([16, 16, 16]);
        v[cohort]["generate"]["n"] = json!(n);
    }
    v["tiles"] = json!({ "tiles_per_axis": [2, 2, 2], "tile_shape": [10, 10, 10] });
    v["network"]["hidden_channels"] = json!(2);
    v["network"]["hidden_layers"] = json!(1);
    v["pretrain"]["epochs"] = json!(2);
    v["transfer"]["epochs"] = json!(2);
    let path = dir.join("tiny.json");
    fs::write(&path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    path
}

#[test]
fn experiment_report_and_stages() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny_spec(dir.path());
    let (a, b) = (dir.path().join("run_a"), dir.path().join("run_b"));
    for out in [&a, &b] {
        let o = tileseg(&["--threads", "1", "experiment", "--spec", s(&spec), "--out", s(out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stdout).contains("| baseline |"));
    }
    let report = fs::read(a.join("report.json")).unwrap();
    assert_eq!(report, fs::read(b.join("report.json")).unwrap());
    for f in ["metrics.csv", "summary.csv", "stats.csv", "training_log.csv", "checkpoints/pretrain_baseline.tbnn"] {
        assert!(a.join(f).exists(), "{f} missing");
    }
    let v: Value = serde_json::from_slice(&report).unwrap();
    assert_eq!(v["fold_means"].as_array().unwrap().len(), 3 * 2 * 5);

    // Summary means are recomputable from the per-subject rows.
    for row in v["summary"].as_array().unwrap() {
        let vals: Vec<f64> = v["subjects"]
            .as_array()
            .unwrap()
            .iter()
            .filter(|r| r["regime"] == row["regime"] && r["cohort"] == row["cohort"])
            .map(|r| r["mean_dsc"].as_f64().unwrap())
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!((mean - row["mean"].as_f64().unwrap()).abs() < 1e-12);
    }

    let rp = a.join("report.json");
    let csv_dir = dir.path().join("plots");
    let o = tileseg(&["report", "--report", s(&rp), "--format", "csv", "--out", s(&csv_dir)]);
    assert_eq!(code(&o), 0);
    assert!(csv_dir.join("panel_A.csv").exists() && csv_dir.join("panel_C.csv").exists());
    let md = tileseg(&["report", "--report", s(&rp), "--format", "md"]);
    assert!(String::from_utf8_lossy(&md.stdout).contains(" ± "));
    let js = tileseg(&["report", "--report", s(&rp), "--format", "json"]);
    // Reloading a report and re-serializing it is lossless.
    assert_eq!(js.stdout, report);
    assert_eq!(code(&tileseg(&["report", "--report", s(&rp), "--format", "pdf"])), 2);

    let mut empty = v.clone();
    empty["folds"] = json!(0);
    empty["subjects"] = json!([]);
    let ep = dir.path().join("empty.json");
    fs::write(&ep, empty.to_string()).unwrap();
    assert_eq!(code(&tileseg(&["report", "--report", s(&ep), "--format", "md"])), 2);

    let stages = dir.path().join("stages");
    let o = tileseg(&["pretrain", "--spec", s(&spec), "--out", s(&stages)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let base = stages.join("pretrain_baseline.tbnn");
    // Same seeds as the experiment's pretraining stage.
    assert_eq!(fs::read(&base).unwrap(), fs::read(a.join("checkpoints/pretrain_baseline.tbnn")).unwrap());
    let o = tileseg(&["transfer", "--spec", s(&spec), "--model", s(&base), "--fold", "2", "--mode", "new-only", "--out", s(&stages)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        fs::read(stages.join("fold2_new_only.tbnn")).unwrap(),
        fs::read(a.join("checkpoints/fold2_new_only.tbnn")).unwrap()
    );
    assert_eq!(code(&tileseg(&["transfer", "--spec", s(&spec), "--model", s(&base), "--fold", "9", "--out", s(&stages)])), 2);

    let image = dir.path().join("img.nii");
    write_volume(&Volume3D::filled([16, 16, 16], [1.0; 3], 0.5).unwrap(), &image).unwrap();
    let o = tileseg(&["segment", "--model", s(&base), "--image", s(&image), "--out", s(&dir.path().join("seg.nii"))]);
    assert_eq!(code(&o), 0);
}
