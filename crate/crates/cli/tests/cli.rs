use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn small_config(root: &Path, k: usize) -> String {
    format!(
        r#"seed = 3

[phantom]
num_cases = 24
val_fraction = 0.25
test_fraction = 0.25

[vqvae.arch]
d_enc = 16
hidden = [8, 8]

[vqvae.train]
epochs = 3
batch_size = 256
max_training_curves = 512

[graphs]
k = {k}

[model]
hidden = 16

[train]
epochs = 3
patience = 2

[evaluation]
bootstrap_resamples = 50

[paths]
data_root = "{root}/data"
cache_dir = "{root}/cache"
output_dir = "{root}/out"
"#,
        root = root.display()
    )
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new(k: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let w = Self { dir };
        w.write_config(k);
        w
    }

    fn root(&self) -> &Path {
        self.dir.path()
    }

    fn config(&self) -> PathBuf {
        self.root().join("run.toml")
    }

    fn write_config(&self, k: usize) {
        fs::write(self.config(), small_config(self.root(), k)).unwrap();
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_hipergraph"))
            .args(args)
            .arg("--config")
            .arg(self.config())
            .env_remove("HIPERGRAPH_CACHE")
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    }
}

fn stages(out: &Output) -> Vec<Value> {
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn run_all_is_idempotent_and_detects_stale_graphs() {
    let ws = Workspace::new(5);
    let first = ws.run(&["run-all"]);
    assert_eq!(first.status.code(), Some(0), "{}", stderr(&first));
    let s1 = stages(&first);
    let names: Vec<&str> = s1.iter().map(|s| s["stage"].as_str().unwrap()).collect();
    assert_eq!(
        names,
        ["generate-phantom", "train-vqvae", "build-graphs", "train-hgnn", "evaluate", "saliency"]
    );
    assert!(s1.iter().all(|s| s["skipped"] == false));

    let out = ws.root().join("out");
    let metrics = fs::read_to_string(out.join("evaluation/metrics.json")).unwrap();
    assert!(out.join("resolved_config.toml").exists());
    assert!(out.join("checkpoints/hgnn.hgar").exists());
    let saliency: Vec<String> = fs::read_dir(out.join("saliency"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert!(saliency.iter().any(|n| n.starts_with("saliency_case_") && n.ends_with(".nii.gz")));
    assert!(saliency.iter().any(|n| n.ends_with(".png")));

    let second = ws.run(&["run-all"]);
    assert_eq!(second.status.code(), Some(0), "{}", stderr(&second));
    let s2 = stages(&second);
    assert!(s2.iter().all(|s| s["skipped"] == true), "{s2:?}");
    for (a, b) in s1.iter().zip(&s2) {
        assert_eq!(a["details"], b["details"]);
    }
    assert_eq!(fs::read_to_string(out.join("evaluation/metrics.json")).unwrap(), metrics);

    // Changing k invalidates the built graphs.
    ws.write_config(4);
    let stale = ws.run(&["build-graphs"]);
    assert_eq!(stale.status.code(), Some(2));
    assert!(stderr(&stale).contains("stale"), "{}", stderr(&stale));
    let forced = ws.run(&["build-graphs", "--force"]);
    assert_eq!(forced.status.code(), Some(0), "{}", stderr(&forced));
    assert_eq!(stages(&forced)[0]["skipped"], false);
    let again = ws.run(&["build-graphs"]);
    assert_eq!(stages(&again)[0]["skipped"], true);
}

#[test]
fn evaluate_without_checkpoint_names_the_missing_stage() {
    let ws = Workspace::new(5);
    let out = ws.run(&["evaluate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("generate-phantom"), "{}", stderr(&out));
    let gen = ws.run(&["generate-phantom"]);
    assert_eq!(gen.status.code(), Some(0), "{}", stderr(&gen));
    let out = ws.run(&["evaluate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("train-hgnn"), "{}", stderr(&out));
}

#[test]
fn usage_and_configuration_errors_exit_one() {
    let ws = Workspace::new(5);
    assert_eq!(ws.run(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(ws.run(&["run-all", "--jobs", "many"]).status.code(), Some(1));
    fs::write(ws.config(), "[graphs]\nneighbours = 3\n").unwrap();
    let bad = ws.run(&["generate-phantom"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stderr(&bad).contains("neighbours"), "{}", stderr(&bad));
    fs::write(ws.config(), "[model]\nnum_classes = 3\n").unwrap();
    assert_eq!(ws.run(&["generate-phantom"]).status.code(), Some(1));
    let help = Command::new(env!("CARGO_BIN_EXE_hipergraph")).arg("--help").output().unwrap();
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("run-all"));
}

#[test]
fn cache_directory_follows_the_environment() {
    let ws = Workspace::new(5);
    let cache = ws.root().join("elsewhere");
    assert_eq!(ws.run(&["generate-phantom"]).status.code(), Some(0));
    let out = Command::new(env!("CARGO_BIN_EXE_hipergraph"))
        .args(["train-vqvae", "--config"])
        .arg(ws.config())
        .env("HIPERGRAPH_CACHE", &cache)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(cache.join("vqvae/model.hgar").exists());
    assert!(!ws.root().join("cache/vqvae").exists());
}
