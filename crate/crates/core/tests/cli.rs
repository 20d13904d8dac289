use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use amalgam::data::{Dataset, PositionSecret};
use amalgam::ir::archive::Archive;
use amalgam::secret::SecretBundle;

fn amalgam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_amalgam")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = amalgam(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        Workspace { _dir: dir, root }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

#[test]
fn report_prints_losses() {
    let out = ok(&["report", "--alpha", "0.5", "--shape", "28x28x1"]);
    assert!(out.contains("0.6667") && out.contains("0.3333"), "{out}");
    assert!(out.contains("search space"));
}

#[test]
fn exit_codes() {
    assert_eq!(amalgam(&["report", "--nope"]).status.code(), Some(1));
    assert_eq!(amalgam(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(amalgam(&["report", "--alpha", "-0.5", "--shape", "28x28"]).status.code(), Some(1));
    let ws = Workspace::new();
    let bad = ws.path("bad.json");
    std::fs::write(&bad, "{}").unwrap();
    std::fs::write(ws.path("bad.amlg"), "x").unwrap();
    let out = amalgam(&["evaluate", "--model", p(&bad), "--data", p(&bad)]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(amalgam(&["--help"]).status.code(), Some(0));
}

#[test]
fn zero_alpha_is_identity() {
    let ws = Workspace::new();
    let data = ws.path("d.amlg");
    ok(&["fixture", "--kind", "images", "--n", "20", "--out", p(&data)]);
    let secret = ws.path("s.amlg");
    let out = ws.path("cloud/d.amlg");
    ok(&["augment-data", "--data", p(&data), "--alpha", "0", "--secret", p(&secret), "--out", p(&out)]);
    assert_eq!(std::fs::read(&data).unwrap(), std::fs::read(&out).unwrap());
    let b = SecretBundle::read(&secret).unwrap();
    let Some(PositionSecret::Image { kept_rows, kept_cols, .. }) = b.positions else { panic!() };
    assert_eq!(kept_rows, (0..28).collect::<Vec<_>>());
    assert_eq!(kept_cols, (0..28).collect::<Vec<_>>());
}

#[test]
fn secret_inside_cloud_dir_is_refused() {
    let ws = Workspace::new();
    let data = ws.path("d.amlg");
    ok(&["fixture", "--kind", "images", "--n", "4", "--out", p(&data)]);
    let cloud = ws.path("cloud");
    let out = amalgam(&[
        "augment-data",
        "--data",
        p(&data),
        "--alpha",
        "0.5",
        "--secret",
        p(&cloud.join("s.amlg")),
        "--cloud-dir",
        p(&cloud),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!cloud.join("s.amlg").exists());
}

/// Runs the whole pipeline; returns the extracted and standalone models.
fn pipeline(ws: &Workspace, kind: &str, data_kind: &str, lr: &str) -> (Vec<u8>, Vec<u8>) {
    let (model, data) = (ws.path("m.json"), ws.path("d.amlg"));
    let (secret, cloud) = (ws.path("local/secret.amlg"), ws.path("cloud"));
    std::fs::create_dir_all(ws.path("local")).unwrap();
    ok(&["fixture", "--kind", kind, "--seed", "1", "--out", p(&model)]);
    ok(&["fixture", "--kind", data_kind, "--n", "200", "--seed", "2", "--out", p(&data)]);
    let common = ["--epochs", "2", "--lr", lr, "--batch", "32", "--seed", "4", "--deterministic"];

    ok(&["augment-data", "--data", p(&data), "--alpha", "0.5", "--seed", "3", "--secret", p(&secret), "--cloud-dir", p(&cloud)]);
    ok(&["augment-model", "--model", p(&model), "--subnets", "2", "--seed", "5", "--secret", p(&secret), "--cloud-dir", p(&cloud)]);
    let (aug_model, aug_data) = (cloud.join("model.json"), cloud.join("data.amlg"));
    let trained = cloud.join("trained.json");
    let mut args = vec!["train", "--model", p(&aug_model), "--data", p(&aug_data), "--out", p(&trained)];
    args.extend(common);
    ok(&args);
    let extracted = ws.path("local/extracted.json");
    let json = ws.path("local/extract.json");
    ok(&[
        "extract", "--model", p(&trained), "--secret", p(&secret), "--original", p(&model), "--out", p(&extracted),
        "--json-out", p(&json),
    ]);
    let rep: serde_json::Value = serde_json::from_slice(&std::fs::read(&json).unwrap()).unwrap();
    assert_eq!(rep["architecture_match"], true);

    let standalone = ws.path("local/standalone.json");
    let mut args = vec!["train", "--model", p(&model), "--data", p(&data), "--out", p(&standalone)];
    args.extend(common);
    ok(&args);
    let a = ok(&["evaluate", "--model", p(&extracted), "--data", p(&data)]);
    let b = ok(&["evaluate", "--model", p(&standalone), "--data", p(&data)]);
    assert_eq!(a, b);
    let by_secret = ok(&["evaluate", "--model", p(&trained), "--data", p(&aug_data), "--secret", p(&secret)]);
    assert!(by_secret.contains("accuracy"));

    // nothing in the cloud dir is a secret or mentions its contents
    for entry in std::fs::read_dir(&cloud).unwrap() {
        let bytes = std::fs::read(entry.unwrap().path()).unwrap();
        if bytes.starts_with(b"AMLG") {
            assert_ne!(bytes[6], 0x4C);
        }
        let text = String::from_utf8_lossy(&bytes);
        assert!(!text.contains("amalgam-secret") && !text.contains("layer_map"));
    }
    let extracted = [std::fs::read(&extracted).unwrap(), std::fs::read(extracted.with_extension("amlg")).unwrap()].concat();
    let standalone =
        [std::fs::read(&standalone).unwrap(), std::fs::read(standalone.with_extension("amlg")).unwrap()].concat();
    (extracted, standalone)
}

#[test]
fn image_pipeline_matches_standalone_training() {
    let ws = Workspace::new();
    let (e, s) = pipeline(&ws, "lenet-mini", "images", "0.05");
    assert_eq!(e, s);
}

#[test]
fn text_pipeline_matches_standalone_training() {
    let ws = Workspace::new();
    let (e, s) = pipeline(&ws, "text-classifier", "text", "0.5");
    assert_eq!(e, s);
}

#[test]
fn reruns_are_byte_identical() {
    let ws = Workspace::new();
    let data = ws.path("d.amlg");
    ok(&["fixture", "--kind", "text", "--n", "30", "--out", p(&data)]);
    let run = |tag: &str| {
        let secret = ws.path(&format!("s{tag}.amlg"));
        let out = ws.path(&format!("o{tag}.amlg"));
        ok(&[
            "augment-data", "--data", p(&data), "--alpha", "0.75", "--noise", "gaussian", "--seed", "9", "--secret",
            p(&secret), "--out", p(&out),
        ]);
        (std::fs::read(secret).unwrap(), std::fs::read(out).unwrap())
    };
    assert_eq!(run("a"), run("b"));
    let aug = Dataset::read(&ws.path("oa.amlg")).unwrap();
    assert_eq!(aug.sample_shape(), &[35]);
    assert!(Archive::read(&ws.path("sa.amlg")).unwrap().local_only);
}

#[test]
fn report_curve_and_json() {
    let ws = Workspace::new();
    let (curve, json, model) = (ws.path("c.csv"), ws.path("r.json"), ws.path("m.json"));
    ok(&["fixture", "--kind", "lenet-mini", "--out", p(&model)]);
    ok(&[
        "report", "--alpha", "0.25", "--shape", "20", "--model", p(&model), "--curve", p(&curve), "--json-out", p(&json),
    ]);
    let csv = std::fs::read_to_string(&curve).unwrap();
    assert!(csv.starts_with("alpha,epsilon,rho,log10_space_pp,log10_space_struct\n"));
    assert_eq!(csv.lines().count(), 102);
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&json).unwrap()).unwrap();
    assert_eq!(v["epsilon"], 0.8);
    assert_eq!(v["params"], 61322);
    let added = v["added_params"].as_u64().unwrap() as f64;
    assert!((added / 61322.0 - 0.25).abs() < 0.02 * 1.25);
}

#[test]
fn attack_command_writes_outputs() {
    let ws = Workspace::new();
    let (model, data) = (ws.path("m.json"), ws.path("d.amlg"));
    ok(&["fixture", "--kind", "tiny-cnn", "--out", p(&model)]);
    ok(&["fixture", "--kind", "tiny-images", "--n", "3", "--out", p(&data)]);
    let (rec, hist) = (ws.path("rec.amlg"), ws.path("h.csv"));
    let out = ok(&[
        "attack", "--model", p(&model), "--data", p(&data), "--index", "1", "--iterations", "3", "--out", p(&rec),
        "--history", p(&hist),
    ]);
    assert!(out.contains("iDLG label"));
    assert_eq!(std::fs::read_to_string(&hist).unwrap().lines().count(), 4);
    assert_eq!(Archive::read(&rec).unwrap().get("reconstruction").unwrap().shape(), &[1, 14, 14]);
}
