//! Exit-code contract and light subcommand smoke tests. The full pipeline
//! run lives in the acceptance suite.

use std::path::Path;
use std::process::{Command, Output};

fn pas3d(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pas3d"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = pas3d(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    let out = pas3d(&["synth", "--normal", "4"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_input_file_is_a_domain_error_naming_the_file() {
    let out = pas3d(&["split", "--manifest", "no/such/manifest.csv", "--out", "x.csv"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("manifest.csv"), "{}", stderr(&out));
}

#[test]
fn synth_split_augment_report_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = |name: &str| tmp.path().join(name).display().to_string();

    let out = pas3d(&[
        "synth", "--normal", "6", "--pas", "4", "--seed", "7", "--out-dir", &dir("data"),
        "--size", "32x32x32",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let manifest = tmp.path().join("data/manifest.csv");
    assert!(manifest.exists());

    // synth is idempotent without --force
    let again = pas3d(&[
        "synth", "--normal", "6", "--pas", "4", "--seed", "7", "--out-dir", &dir("data"),
        "--size", "32x32x32",
    ]);
    assert_eq!(again.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&again.stdout).contains("skipping"));

    let manifest_s = manifest.display().to_string();
    let split_out = tmp.path().join("split.csv");
    let out = pas3d(&[
        "split", "--manifest", &manifest_s, "--seed", "3",
        "--train", "0.5", "--val", "0.25", "--test", "0.25",
        "--out", &split_out.display().to_string(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));

    let aug_out = tmp.path().join("augmented.csv");
    let out = pas3d(&[
        "augment", "--manifest", &split_out.display().to_string(), "--seed", "3",
        "--out-dir", &dir("aug"), "--out", &aug_out.display().to_string(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(tmp.path().join("aug/augmentations.csv").exists());

    // report and compare work off a hand-written results file
    let results = tmp.path().join("results.csv");
    std::fs::write(
        &results,
        "# format_version=1\n\
         model,seed,status,accuracy,auc,precision_macro,recall_macro,f1_macro,checkpoint\n\
         a,0,ok,0.8,0.9,0.8,0.8,0.8,\n\
         a,1,ok,0.9,0.95,0.9,0.9,0.9,\n\
         b,0,ok,0.6,0.7,0.6,0.6,0.6,\n\
         b,1,ok,0.7,0.75,0.7,0.7,0.7,\n",
    )
    .unwrap();
    let results_s = results.display().to_string();

    let table = tmp.path().join("report.csv");
    let out = pas3d(&["report", "--runs", &results_s, "--out", &table.display().to_string()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = std::fs::read_to_string(&table).unwrap();
    assert!(text.contains("0.900 (0.850"), "{text}");

    let pairwise = tmp.path().join("pairwise.csv");
    let out = pas3d(&[
        "compare", "--runs", &results_s, "--metric", "accuracy", "--alpha", "0.05",
        "--out", &pairwise.display().to_string(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = std::fs::read_to_string(&pairwise).unwrap();
    assert!(text.contains("model_a,model_b,t,p_raw,p_adj,significant"), "{text}");
    assert!(text.lines().any(|l| l.starts_with("a,b,")), "{text}");
}

#[test]
fn compare_rejects_unknown_metric() {
    let tmp = tempfile::tempdir().unwrap();
    let results = tmp.path().join("results.csv");
    std::fs::write(
        &results,
        "model,seed,status,accuracy,auc,precision_macro,recall_macro,f1_macro,checkpoint\n\
         a,0,ok,0.8,0.9,0.8,0.8,0.8,\n\
         a,1,ok,0.9,0.95,0.9,0.9,0.9,\n",
    )
    .unwrap();
    let out = pas3d(&[
        "compare", "--runs", &results.display().to_string(), "--metric", "sharpness",
        "--out", &tmp.path().join("x.csv").display().to_string(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("sharpness"));
}

#[test]
fn evaluate_requires_existing_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let bogus: &Path = &tmp.path().join("nope.ckpt");
    let out = pas3d(&[
        "evaluate", "--checkpoint", &bogus.display().to_string(),
        "--manifest", &tmp.path().join("m.csv").display().to_string(),
        "--out", &tmp.path().join("r.csv").display().to_string(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn ingest_preprocess_train_chain() {
    use ndarray::Array3;
    use pas3d_core::dicom::write_dicom_series;

    let tmp = tempfile::tempdir().unwrap();
    let raw = tmp.path().join("raw");
    for (i, base) in [100u16, 900].into_iter().enumerate() {
        let voxels = Array3::from_shape_fn((20, 20, 6), |(r, c, k)| {
            base + ((r + c + k) % 50) as u16
        });
        write_dicom_series(raw.join(format!("case{i}")), &format!("1.2.3.{i}"), &voxels, [1.0, 1.0, 2.0])
            .unwrap();
    }
    let labels = tmp.path().join("labels.csv");
    std::fs::write(&labels, "case_id,patient_id,label\ncase0,p0,0\ncase1,p1,1\n").unwrap();

    let manifest = tmp.path().join("ingested.csv");
    let out = pas3d(&[
        "ingest", "--input", &raw.display().to_string(),
        "--labels", &labels.display().to_string(),
        "--out-dir", &tmp.path().join("nifti").display().to_string(),
        "--manifest", &manifest.display().to_string(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));

    let pre = tmp.path().join("pre");
    let out = pas3d(&[
        "preprocess", "--manifest", &manifest.display().to_string(),
        "--out-dir", &pre.display().to_string(), "--target", "32x32x32",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(pre.join("case0.nii").exists() && pre.join("manifest.csv").exists());

    // a 2-case manifest cannot be split 3 ways with both labels everywhere;
    // train on a small synthetic dataset instead, using a config file that
    // the --epochs flag overrides
    let data = tmp.path().join("train-data");
    let out = pas3d(&[
        "synth", "--normal", "6", "--pas", "6", "--seed", "1",
        "--out-dir", &data.display().to_string(), "--size", "32x32x32",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let split_csv = tmp.path().join("train-split.csv");
    let out = pas3d(&[
        "split", "--manifest", &data.join("manifest.csv").display().to_string(),
        "--seed", "1", "--train", "0.5", "--val", "0.25", "--test", "0.25",
        "--out", &split_csv.display().to_string(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));

    let conf = tmp.path().join("run.conf");
    std::fs::write(&conf, "epochs = 99\nbatch_size = 4\nlr = 0.001\nwidth_multiplier = 0.125\ninput_shape = 32x32x32\n").unwrap();
    let run_dir = tmp.path().join("run");
    let out = pas3d(&[
        "train", "--manifest", &split_csv.display().to_string(),
        "--arch", "resnet18", "--seed", "0",
        "--config", &conf.display().to_string(), "--epochs", "2",
        "--out-dir", &run_dir.display().to_string(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    for artifact in ["best.ckpt", "log.csv", "result.csv"] {
        assert!(run_dir.join(artifact).exists(), "missing {artifact}");
    }
    let log = std::fs::read_to_string(run_dir.join("log.csv")).unwrap();
    assert_eq!(log.lines().filter(|l| !l.starts_with('#')).count(), 3, "flag must override config epochs: {log}");
}
