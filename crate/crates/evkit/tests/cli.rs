//! Black-box tests of the `evkit` binary: verb flows, overrides and exit
//! codes (0 success, 1 configuration problems, 2 runtime failures).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn evkit(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evkit"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const RUN_TOML: &str = r#"
manifest = "data/manifest.csv"
registry = "data/backbones/backbones.toml"
out_dir = "out"
seed = 5

[[features]]
kind = "global_intermediate"
backbone = "demo_a"

[[classifiers]]
family = "extra_trees"

[[classifiers]]
family = "knn"
k = 2
metric = "l2"
"#;

struct CliFixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

/// A small corpus generated through the `synth` verb plus a ready run config.
fn cli_fixture() -> &'static CliFixture {
    static FIXTURE: OnceLock<CliFixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = tempfile::tempdir().expect("tempdir");
        let root = dir.path().to_path_buf();
        let out = evkit(
            &[
                "synth",
                "--out",
                "data",
                "--events",
                "2",
                "--train-per-event",
                "3",
                "--test-per-event",
                "2",
                "--seed",
                "9",
            ],
            &root,
        );
        assert!(out.status.success(), "synth failed: {}", stderr(&out));
        assert!(root.join("data/manifest.csv").is_file());
        assert!(root.join("data/backbones/backbones.toml").is_file());
        fs::write(root.join("run.toml"), RUN_TOML).expect("config");
        CliFixture { _dir: dir, root }
    })
}

#[test]
fn help_lists_every_verb() {
    let dir = tempfile::tempdir().expect("tempdir");
    let out = evkit(&["--help"], dir.path());
    assert!(out.status.success());
    let text = stdout(&out);
    for verb in ["extract", "train", "eval", "grid", "synth"] {
        assert!(text.contains(verb), "help must mention `{verb}`:\n{text}");
    }
}

#[test]
fn extract_train_eval_flow_succeeds() {
    let root = &cli_fixture().root;

    let out = evkit(&["extract", "-c", "run.toml"], root);
    assert!(out.status.success(), "extract failed: {}", stderr(&out));
    assert!(stdout(&out).contains("computed"), "{}", stdout(&out));

    let out = evkit(&["train", "-c", "run.toml"], root);
    assert!(out.status.success(), "train failed: {}", stderr(&out));
    let containers: Vec<_> = fs::read_dir(root.join("out/models"))
        .expect("models dir")
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "evcm"))
        .collect();
    assert_eq!(containers.len(), 2, "one container per classifier");

    let out = evkit(&["eval", "-c", "run.toml"], root);
    assert!(out.status.success(), "eval failed: {}", stderr(&out));
    assert!(stdout(&out).contains("AUC"), "{}", stdout(&out));
    assert!(root.join("out/report.json").is_file());
}

#[test]
fn grid_with_feature_override_synthesizes_the_spec() {
    let root = &cli_fixture().root;
    let out = evkit(
        &["grid", "-c", "run.toml", "--features", "global_output", "--out", "out_override"],
        root,
    );
    assert!(out.status.success(), "grid failed: {}", stderr(&out));
    assert!(stdout(&out).contains("cells with a defined AUC"), "{}", stdout(&out));
    let csv = fs::read_to_string(root.join("out_override/grid.csv")).expect("grid csv");
    assert!(csv.contains("global_output@demo_a"), "override must retarget the feature:\n{csv}");
}

#[test]
fn missing_config_file_exits_1() {
    let dir = tempfile::tempdir().expect("tempdir");
    let out = evkit(&["eval", "-c", "no_such.toml"], dir.path());
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    assert!(stderr(&out).starts_with("error:"), "{}", stderr(&out));
}

#[test]
fn invalid_classifier_family_exits_1() {
    let root = &cli_fixture().root;
    let body = RUN_TOML.replace("extra_trees", "boosted_stumps");
    fs::write(root.join("bad.toml"), body).expect("config");
    let out = evkit(&["train", "-c", "bad.toml"], root);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    assert!(stderr(&out).starts_with("error:"), "{}", stderr(&out));
}

#[test]
fn duplicate_feature_spec_exits_1() {
    let root = &cli_fixture().root;
    let body = format!(
        "{RUN_TOML}\n[[features]]\nkind = \"global_intermediate\"\nbackbone = \"demo_a\"\n"
    );
    fs::write(root.join("dup.toml"), body).expect("config");
    let out = evkit(&["train", "-c", "dup.toml", "--out", "out_dup"], root);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    assert!(
        stderr(&out).contains("duplicate feature spec"),
        "{}",
        stderr(&out)
    );
}

#[test]
fn eval_with_cold_cache_exits_2() {
    let root = &cli_fixture().root;
    // Train first so models exist, then evaluate into a fresh output
    // directory: its cache is empty, which is a runtime (not config) error.
    let out = evkit(&["train", "-c", "run.toml", "--out", "out_pretrain"], root);
    assert!(out.status.success(), "train failed: {}", stderr(&out));
    fs::create_dir_all(root.join("out_cold/models")).expect("dirs");
    for entry in fs::read_dir(root.join("out_pretrain/models")).expect("models") {
        let path = entry.expect("entry").path();
        fs::copy(&path, root.join("out_cold/models").join(path.file_name().unwrap()))
            .expect("copy model");
    }
    let out = evkit(&["eval", "-c", "run.toml", "--out", "out_cold"], root);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("extract"), "{}", stderr(&out));
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().expect("tempdir");
    let out = evkit(&["extract"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(!stderr(&out).is_empty());
}
