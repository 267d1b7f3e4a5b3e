use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use generality::datasets::{make_synthetic, write_idx, Family, SyntheticSizes};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_generality"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).env_remove("GENERALITY_OUT").output().expect("spawn")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn preset(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../presets").join(name)
}

const TINY: &str = r#"
kind = "curve"
arch = "char3conv"
seeds = [1, 2]

[optim]
lr0 = 0.001
momentum_range = [0.5, 0.9]
momentum_ramp_epochs = 2
max_epochs = 2
batch_size = 25

[datasets.strokes]
source = "synthetic"
family = "strokes"
train = 100
valid = 40
test = 60
seed = 3

[experiment]
base = "strokes"
retrain = "strokes"
ks = [0, 3]
"#;

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn malformed_config_exits_2_with_field() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(
        dir.path(),
        "bad.toml",
        &TINY.replace("max_epochs = 2", "max_epochs = \"many\""),
    );
    let o = run(&["validate", "--config", bad.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("optim.max_epochs"), "{}", stderr(&o));

    let o = run(&[
        "run",
        "--config",
        bad.to_str().unwrap(),
        "--out",
        dir.path().join("r").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
    assert!(!dir.path().join("r").exists());

    let unknown = write_config(
        dir.path(),
        "u.toml",
        &TINY.replace("retrain = \"strokes\"", "retrain = \"nope\""),
    );
    let o = run(&["validate", "--config", unknown.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("experiment.retrain"));

    let o = run(&["validate", "--config", dir.path().join("absent.toml").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let o = run(&["frobnicate"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn mnist_presets_need_their_files() {
    for name in ["mnist_class_gen_458.toml", "char3conv_mnist_base.toml"] {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_config(dir.path(), name, &fs::read_to_string(preset(name)).unwrap());
        let o = run(&["validate", "--config", cfg.to_str().unwrap()]);
        assert_eq!(code(&o), 2, "{name}");
        assert!(stderr(&o).contains("datasets.mnist"), "{}", stderr(&o));
    }
}

#[test]
fn synthetic_presets_validate() {
    for name in [
        "strokes_self_curve.toml",
        "strokes_rotated_matrix.toml",
        "glyph_subsample.toml",
    ] {
        let o = run(&["validate", "--config", preset(name).to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{name}: {}", stderr(&o));
    }
}

#[test]
fn digest_ignores_key_order_and_tracks_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let a = write_config(dir.path(), "a.toml", TINY);
    let reordered = TINY.replace(
        "lr0 = 0.001\nmomentum_range = [0.5, 0.9]",
        "momentum_range = [0.5, 0.9]\nlr0 = 0.001",
    );
    assert_ne!(reordered, TINY);
    let b = write_config(dir.path(), "b.toml", &reordered);
    let digest = |args: &[&str]| String::from_utf8(run(args).stdout).unwrap();
    let da = digest(&["validate", "--config", a.to_str().unwrap()]);
    assert!(da.starts_with("ok curve "));
    assert_eq!(da, digest(&["validate", "--config", b.to_str().unwrap()]));
    assert_ne!(
        da,
        digest(&["validate", "--config", a.to_str().unwrap(), "--seeds", "1,2,3"])
    );
    assert_ne!(
        da,
        digest(&["validate", "--config", a.to_str().unwrap(), "--precision", "f64"])
    );
    assert_eq!(
        da,
        digest(&["validate", "--config", a.to_str().unwrap(), "--workers", "3"])
    );
}

#[test]
fn run_rerun_export_and_filters() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.toml", TINY);
    let out = dir.path().join("out");
    let args = [
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--workers",
        "2",
    ];
    let o = run(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let first = generality::experiment::read_manifest(&out).unwrap();
    assert!(first.jobs_executed > 0);
    assert!(!first.full_cache_hit);
    let curve = fs::read(out.join("results/curve.csv")).unwrap();

    let o = run(&args);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("full cache hit"));
    let second = generality::experiment::read_manifest(&out).unwrap();
    assert_eq!(second.jobs_executed, 0);
    assert!(second.full_cache_hit);
    assert_eq!(second.config_digest, first.config_digest);
    assert_eq!(fs::read(out.join("results/curve.csv")).unwrap(), curve);

    let o = run(&["export", "--out", out.to_str().unwrap(), "--what", "curve"]);
    assert_eq!(code(&o), 0);
    let text = fs::read_to_string(out.join("plots/curve.csv")).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "base,retrain,k,g_mean,g_min,g_max,psi_reference"
    );
    assert_eq!(text.lines().count(), 3);

    let o = run(&["export", "--out", out.to_str().unwrap(), "--what", "errors-vs-epoch"]);
    assert_eq!(code(&o), 0);
    let text = fs::read_to_string(out.join("plots/errors.csv")).unwrap();
    // 2 bases + 4 retrains, 2 epochs each.
    assert_eq!(text.lines().count(), 1 + 6 * 2);

    let o = run(&["export", "--out", out.to_str().unwrap(), "--what", "subsample"]);
    assert_eq!(code(&o), 1);

    let ckpt = second.artifacts.iter().find(|a| a.ends_with(".ckpt")).unwrap();
    let ckpt = out.join(ckpt);
    let pgm = dir.path().join("filters.pgm");
    let o = run(&[
        "filters",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--layer",
        "0",
        "--out",
        pgm.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("20 tiles of 5x5"));
    assert!(fs::read(&pgm).unwrap().starts_with(b"P5\n"));
    let o = run(&[
        "filters",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--layer",
        "1",
        "--out",
        pgm.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("not a convolution"));
}

#[test]
fn default_out_uses_env_root() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "tiny.toml",
        &TINY
            .replace("ks = [0, 3]", "ks = [0]")
            .replace("seeds = [1, 2]", "seeds = [1]"),
    );
    let root = dir.path().join("root");
    let o = bin()
        .args(["run", "--config", cfg.to_str().unwrap()])
        .env("GENERALITY_OUT", &root)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let runs: Vec<_> = fs::read_dir(&root).unwrap().collect();
    assert_eq!(runs.len(), 1);
    assert!(runs[0].as_ref().unwrap().path().join("manifest.json").is_file());
}

/// Writes a small 28x28, 10-class stand-in for the MNIST IDX files.
fn fake_mnist(dir: &Path) {
    let b = make_synthetic(
        Family::Strokes,
        SyntheticSizes {
            train: 700,
            valid: 10,
            test: 200,
        },
        9,
    )
    .unwrap();
    fs::create_dir_all(dir).unwrap();
    write_idx(
        &b.train,
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
    )
    .unwrap();
    write_idx(
        &b.test,
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
    )
    .unwrap();
}

#[test]
fn class_gen_preset_produces_grid() {
    let dir = tempfile::tempdir().unwrap();
    fake_mnist(&dir.path().join("data/mnist"));
    let presets = dir.path().join("presets");
    fs::create_dir_all(&presets).unwrap();
    let text = fs::read_to_string(preset("mnist_class_gen_458.toml"))
        .unwrap()
        .replace("valid_count = 10000", "valid_count = 60")
        .replace("max_epochs = 200", "max_epochs = 1")
        .replace("batch_size = 500", "batch_size = 50")
        .replace("seeds = [1, 2, 3]", "seeds = [1]");
    let cfg = write_config(&presets, "mnist_class_gen_458.toml", &text);
    let out = dir.path().join("out");
    let o = run(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = run(&["export", "--out", out.to_str().unwrap(), "--what", "subsample"]);
    assert_eq!(code(&o), 0);
    let csv = fs::read_to_string(out.join("plots/subsample.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "p,init,k,accuracy");
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    // Per p: one random-init row plus one prejudiced row per k in 0..=3.
    assert_eq!(rows.len(), 7 * 5);
    let ps: Vec<&str> = rows
        .iter()
        .filter(|r| r[1] == "random")
        .map(|r| r[0].as_str())
        .collect();
    assert_eq!(ps, ["1", "3", "5", "10", "20", "30", "50"]);
    let json: serde_json::Value =
        serde_json::from_slice(&fs::read(out.join("results/subsample.json")).unwrap()).unwrap();
    assert_eq!(json["n"], 3);
}
