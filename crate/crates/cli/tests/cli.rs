use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use mdanet_core::compression::CompressionParams;
use mdanet_core::segnet::load_checkpoint;
use mdanet_core::SegNet;
use tempfile::TempDir;

const DIMS: &str = "16,16,16";
const BASE: usize = 4;
const RADIUS: usize = 2;

fn mdanet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mdanet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn mdanet")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "exit {:?}\nstdout:\n{}\nstderr:\n{}", o.status.code(), stdout(&o), stderr(&o));
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn make_phantoms(dir: &Path, subjects: usize, seed: u64) {
    ok(mdanet(&[
        "make-phantoms",
        "--out",
        s(dir),
        "--subjects",
        &subjects.to_string(),
        "--dims",
        DIMS,
        "--seed",
        &seed.to_string(),
    ]));
}

fn write_config(dir: &Path, data: &Path, variant: &str, epochs: usize) -> PathBuf {
    let path = dir.join("run.toml");
    let text = format!(
        r#"data = "{}"
out = "run"
variant = "{variant}"
folds = 3
fold = 0
seed = 5

[model]
depth = 2
base_channels = {BASE}
num_classes = 4

[model.compression]
radius = {RADIUS}

[train]
lr = 1e-3
max_epochs = {epochs}
batch_size = 4
"#,
        s(&data.join("manifest.json"))
    );
    fs::write(&path, text).unwrap();
    path
}

/// A dataset plus a one-fold run per variant, trained once and shared.
struct Fixture {
    _tmp: TempDir,
    data: PathBuf,
    runs: Vec<(String, PathBuf)>,
}

impl Fixture {
    fn run(&self, variant: &str) -> &Path {
        &self.runs.iter().find(|(v, _)| v == variant).unwrap().1
    }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let tmp = TempDir::new().unwrap();
        let data = tmp.path().join("data");
        make_phantoms(&data, 3, 11);
        let runs = ["plain", "mse", "mda"]
            .into_iter()
            .map(|v| {
                let dir = tmp.path().join(v);
                fs::create_dir_all(&dir).unwrap();
                let cfg = write_config(&dir, &data, v, 2);
                ok(mdanet(&["train", "--config", s(&cfg)]));
                (v.to_string(), dir.join("run"))
            })
            .collect();
        Fixture { _tmp: tmp, data, runs }
    })
}

#[test]
fn make_phantoms_is_byte_identical_for_a_seed() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    make_phantoms(&a, 2, 3);
    make_phantoms(&b, 2, 3);
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 1 + 2 * 3, "manifest plus header, image and labels per subject");
    for name in &names {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name:?}");
    }
    let header: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("phantom-000.json")).unwrap()).unwrap();
    assert_eq!(header["dims"], serde_json::json!([16, 16, 16]));

    let c = tmp.path().join("c");
    make_phantoms(&c, 2, 4);
    assert_ne!(fs::read(a.join("phantom-000.raw")).unwrap(), fs::read(c.join("phantom-000.raw")).unwrap());
}

#[test]
fn train_writes_resolved_config_checkpoint_and_metrics() {
    let run = fixture().run("plain");
    let resolved = fs::read_to_string(run.join("config.toml")).unwrap();
    let parsed: toml::Value = toml::from_str(&resolved).unwrap();
    assert_eq!(parsed["variant"].as_str(), Some("plain"));
    assert_eq!(parsed["fold"].as_integer(), Some(0));
    assert_eq!(parsed["train"]["max_epochs"].as_integer(), Some(2));
    assert_eq!(parsed["model"]["base_channels"].as_integer(), Some(BASE as i64));

    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert!(lines.len() >= 2, "header and at least one row:\n{metrics}");
    assert!(lines[1..].iter().all(|l| l.contains("plain")), "{metrics}");

    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.as_array().map(Vec::len), Some(1));

    let net: SegNet<f32> = load_checkpoint(&run.join("model.ckpt"), None).unwrap();
    assert_eq!(net.config().base_channels, BASE);
}

#[test]
fn mda_checkpoint_adds_exactly_the_compression_block_and_one_input_channel() {
    let f = fixture();
    let mse: SegNet<f32> = load_checkpoint(&f.run("mse").join("model.ckpt"), None).unwrap();
    let mda: SegNet<f32> = load_checkpoint(&f.run("mda").join("model.ckpt"), None).unwrap();
    let (cm, cs) = (mda.param_count(), mse.param_count());
    let (h, w) = (mda.config().height, mda.config().width);
    assert_eq!(cm.compression, CompressionParams::<f32>::closed_form_count(h, w, 2 * RADIUS));
    assert_eq!(cs.compression, 0);
    assert_eq!(cm.total - cs.total, cm.compression + 9 * BASE);
}

#[test]
fn infer_then_eval_matches_direct_eval() {
    let f = fixture();
    let ckpt = f.run("plain").join("model.ckpt");
    let volume = f.data.join("phantom-002.json");
    let tmp = TempDir::new().unwrap();
    let pred = tmp.path().join("out/pred.json");
    ok(mdanet(&["infer", "--checkpoint", s(&ckpt), "--volume", s(&volume), "--out", s(&pred)]));

    let header: serde_json::Value = serde_json::from_str(&fs::read_to_string(&pred).unwrap()).unwrap();
    assert_eq!(header["dims"], serde_json::json!([16, 16, 16]));

    let direct = stdout(&ok(mdanet(&["eval", "--checkpoint", s(&ckpt), "--volume", s(&volume)])));
    let saved = stdout(&ok(mdanet(&["eval", "--prediction", s(&pred), "--volume", s(&volume)])));
    assert!(direct.starts_with("view sagittal"), "{direct}");
    assert!(direct.contains("foreground mean"), "{direct}");
    assert_eq!(direct, saved);

    let json = tmp.path().join("eval.json");
    ok(mdanet(&["eval", "--checkpoint", s(&ckpt), "--volume", s(&volume), "--out", s(&json)]));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(report["mean"].as_array().map(Vec::len), Some(4));
}

#[test]
fn eval_refuses_a_checkpoint_of_another_variant() {
    let f = fixture();
    let ckpt = f.run("plain").join("model.ckpt");
    let volume = f.data.join("phantom-000.json");
    let o = mdanet(&["eval", "--checkpoint", s(&ckpt), "--volume", s(&volume), "--variant", "mda"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("expected a mda manifest"), "{}", stderr(&o));
}

#[test]
fn training_on_unlabelled_subjects_fails_before_creating_the_run() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    let image = tmp.path().join("image.raw");
    let bytes: Vec<u8> = (0..16 * 16 * 16).flat_map(|i| (i as f32 / 4096.0).to_le_bytes()).collect();
    fs::write(&image, bytes).unwrap();
    for id in ["a", "b", "c"] {
        ok(mdanet(&["import", "--out", s(&data), "--id", id, "--image", s(&image), "--dims", DIMS]));
    }
    let dup = mdanet(&["import", "--out", s(&data), "--id", "a", "--image", s(&image), "--dims", DIMS]);
    assert_eq!(dup.status.code(), Some(2));

    let cfg = write_config(tmp.path(), &data, "plain", 1);
    let o = mdanet(&["train", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("has no label volume"), "{}", stderr(&o));
    assert!(!tmp.path().join("run").exists());
}

#[test]
fn import_rejects_a_payload_of_the_wrong_size() {
    let tmp = TempDir::new().unwrap();
    let image = tmp.path().join("short.raw");
    fs::write(&image, [0u8; 12]).unwrap();
    let o = mdanet(&["import", "--out", s(&tmp.path().join("d")), "--id", "x", "--image", s(&image), "--dims", "2,2,2"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("expected 32"), "{}", stderr(&o));
}

#[test]
fn paramcount_reports_ordering_and_compression_delta() {
    let out = stdout(&ok(mdanet(&["paramcount"])));
    assert!(out.contains("ordering cscse > mse > plain: holds"), "{out}");
    assert!(out.contains("mda - mse = "), "{out}");
    for v in ["plain", "cscse", "mse", "mda"] {
        assert!(out.contains(&format!("variant {v} ")), "{out}");
    }
}

#[test]
fn paramcount_follows_a_run_config() {
    let f = fixture();
    let cfg = f.run("mda").join("config.toml");
    let out = stdout(&ok(mdanet(&["paramcount", "--config", s(&cfg), "--variant", "mda"])));
    assert!(out.contains("(16x16, depth 2, base 4)"), "{out}");
}

#[test]
fn block_gradcheck_passes() {
    let out = stdout(&ok(mdanet(&["gradcheck", "--instances", "2", "--seed", "9"])));
    assert_eq!(out.lines().filter(|l| l.ends_with(" ok")).count(), 5 * 2, "{out}");
}

#[test]
fn network_gradcheck_rejects_odd_sizes() {
    let o = mdanet(&["gradcheck", "--scope", "network", "--size", "7"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(mdanet(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(mdanet(&["eval", "--volume", "x.json"]).status.code(), Some(1));
    assert_eq!(mdanet(&["--help"]).status.code(), Some(0));

    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "folds = 3\nfold = 7\n").unwrap();
    let o = mdanet(&["train", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("out of range"), "{}", stderr(&o));

    fs::write(&cfg, "bogus_key = 1\n").unwrap();
    assert_eq!(mdanet(&["train", "--config", s(&cfg)]).status.code(), Some(1));
}
