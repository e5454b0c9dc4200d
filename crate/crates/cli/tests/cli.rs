use std::path::Path;
use std::process::{Command, Output};

const SMALL: [&str; 8] = [
    "--set",
    "synth.n_subjects=30",
    "--set",
    "synth.visits_per_subject=6",
    "--set",
    "train.epochs=2",
    "--set",
    "cv.folds=3",
];

fn nkm(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nkm"))
        .args(args)
        .arg("--out")
        .arg(out)
        .args(SMALL)
        .output()
        .expect("spawn nkm")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let o = nkm(&["synth", "--seed", "5"], d);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["data.csv", "truth.json", "report.json"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f} differs"
        );
    }
    let cfg = json(&a.join("effective-config.json"));
    assert_eq!(cfg["seed"], 5);
    assert_eq!(cfg["synth"]["n_subjects"], 30);
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = nkm(&["bogus"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"));
    let o = nkm(&["synth", "--set", "nodot"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn runtime_errors_exit_one_and_name_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    let o = nkm(
        &["train", "--config", missing.to_str().unwrap()],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing.json"), "{}", stderr(&o));

    let o = nkm(&["synth", "--set", "model.bogus=1"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bogus"));

    let o = nkm(&["cv", "--data", "/nonexistent/cohort.csv"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("/nonexistent/cohort.csv"));
}

#[test]
fn train_then_eval_round_trips_the_model() {
    let dir = tempfile::tempdir().unwrap();
    let t = dir.path().join("train");
    let o = nkm(&["train"], &t);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in [
        "effective-config.json",
        "report.json",
        "metrics.csv",
        "model/manifest.json",
        "model/params.bin",
        "model/preprocessor.json",
    ] {
        assert!(t.join(f).exists(), "missing {f}");
    }
    let history = std::fs::read_to_string(t.join("metrics.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);

    let e = dir.path().join("eval");
    let model = t.join("model");
    let o = nkm(&["eval", "--model", model.to_str().unwrap()], &e);
    assert!(o.status.success(), "{}", stderr(&o));
    let m = json(&e.join("report.json"));
    assert!(m["result"]["metrics"]["mean"]["pearson"].is_f64());
    let again = dir.path().join("eval2");
    assert!(nkm(&["eval", "--model", model.to_str().unwrap()], &again)
        .status
        .success());
    assert_eq!(
        std::fs::read(e.join("predictions.csv")).unwrap(),
        std::fs::read(again.join("predictions.csv")).unwrap()
    );
}

#[test]
fn config_file_and_data_flag_are_honoured() {
    let dir = tempfile::tempdir().unwrap();
    let s = dir.path().join("synth");
    assert!(nkm(&["synth"], &s).status.success());
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"model": {"d_z": 8}, "edmd.n_centers": 15}"#).unwrap();
    let out = dir.path().join("edmd");
    let data = s.join("data.csv");
    let o = nkm(
        &[
            "edmd",
            "--config",
            cfg.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
        ],
        &out,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("EDMD (RBF)") && stdout.contains("linear regression"));
    let eff = json(&out.join("effective-config.json"));
    assert_eq!(eff["model"]["d_z"], 8);
    assert_eq!(eff["edmd"]["n_centers"], 15);
    assert!(out.join("edmd-fold0/manifest.json").exists());
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 3 * 3);
}

#[test]
fn cv_prints_a_table_row() {
    let dir = tempfile::tempdir().unwrap();
    let o = nkm(&["cv", "--set", "flags.no_control=true"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.lines().nth(1).unwrap().starts_with("no control"));
    let r = json(&dir.path().join("report.json"));
    assert_eq!(r["result"]["folds"].as_array().unwrap().len(), 3);
}

#[test]
fn analysis_commands_write_their_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let vb = dir.path().join("vb");
    let o = nkm(
        &[
            "verify-bound",
            "--set",
            "verify.sequence_visits=10",
            "--set",
            "verify.tau_max=5",
        ],
        &vb,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let r = json(&vb.join("report.json"));
    assert_eq!(r["result"]["nkm"]["pass"], true);
    let csv = std::fs::read_to_string(vb.join("metrics.csv")).unwrap();
    assert!(csv.lines().filter(|l| l.starts_with("NKM,")).count() == 5);

    let vd = dir.path().join("vd");
    let o = nkm(
        &[
            "verify-descent",
            "--set",
            "descent.iterations=4",
            "--set",
            "verify.descent_windows=8",
        ],
        &vd,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let r = json(&vd.join("report.json"));
    assert_eq!(r["result"]["descent"]["pass"], true);
    assert_eq!(r["result"]["negative_control"]["pass"], false);

    let el = dir.path().join("el");
    let o = nkm(&["export-latents", "--set", "latents.rollout_steps=2"], &el);
    assert!(o.status.success(), "{}", stderr(&o));
    let lat = std::fs::read_to_string(el.join("latents.csv")).unwrap();
    assert!(lat.starts_with("subject_id,window_index,step,pc1,pc2,diagnosis\n"));

    let im = dir.path().join("im");
    let o = nkm(&["importance", "--set", "importance.runs=1"], &im);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(std::fs::read_to_string(im.join("metrics.csv"))
        .unwrap()
        .starts_with("feature,"));
}
