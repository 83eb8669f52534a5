use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fsied(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fsied"))
        .current_dir(dir)
        .args(args)
        .env_remove("FSIED_SEED")
        .output()
        .unwrap()
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

const DESK: &str = "\
corpus.path = corpus.jsonl
frames.path = frames.jsonl
frames.curated_map = curated_map.tsv
dataset.dir = data
dataset.base_classes = 0
dataset.base_train = 0
dataset.base_eval = 0
dataset.round_eval = 10
dataset.ood_classes = 7
dataset.ood_eval = 15
model.d_ctx = 12
model.d = 12
train.epochs = 2
output.dir = run
";

/// Synthetic corpus, config file and built dataset in a fresh directory.
fn workspace() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    ok(fsied(dir.path(), &["generate-synthetic", "--out", ".", "--classes", "32", "--per-class", "40", "--seed", "3"]));
    let config = dir.path().join("desk.conf");
    fs::write(&config, DESK).unwrap();
    ok(fsied(dir.path(), &["-c", "desk.conf", "build-dataset"]));
    (dir, config)
}

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/reference_f1_matrices.json")
}

#[test]
fn missing_corpus_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = fsied(dir.path(), &["--set", "corpus.path=absent.jsonl", "build-dataset"]);
    assert_eq!(out.status.code(), Some(2));
    let out = fsied(dir.path(), &["--set", "loss.delta=1", "build-dataset"]);
    assert_eq!(out.status.code(), Some(2));
    let out = fsied(dir.path(), &["train"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn dataset_build_is_reproducible() {
    let (dir, _) = workspace();
    let first = fs::read(dir.path().join("data/manifest.json")).unwrap();
    let stats = fs::read_to_string(dir.path().join("data/statistics.txt")).unwrap();
    assert!(stats.contains("c_ood"), "{stats}");
    ok(fsied(dir.path(), &["-c", "desk.conf", "build-dataset"]));
    assert_eq!(first, fs::read(dir.path().join("data/manifest.json")).unwrap());
}

#[test]
fn ingest_writes_a_mapping() {
    let (dir, _) = workspace();
    ok(fsied(dir.path(), &["-c", "desk.conf", "ingest-frames"]));
    let mapping = fs::read_to_string(dir.path().join("run/frames/mapping.tsv")).unwrap();
    assert!(mapping.lines().any(|l| l.contains("synth_frame_")));
}

#[test]
fn train_checkpoints_ablates_and_resumes() {
    let (dir, _) = workspace();
    let out = ok(fsied(dir.path(), &["-c", "desk.conf", "train"]));
    assert!(out.contains("ifsed-k"), "{out}");
    for r in 1..=5 {
        assert!(dir.path().join(format!("run/checkpoints/round_{r}.json")).exists());
    }
    assert!(dir.path().join("run/report/summary.txt").exists());
    let checksum = fs::read_to_string(dir.path().join("run/session.sha256")).unwrap();
    let session = fs::read(dir.path().join("run/session.json")).unwrap();

    ok(fsied(dir.path(), &["-c", "desk.conf", "train", "--resume", "2"]));
    assert_eq!(checksum, fs::read_to_string(dir.path().join("run/session.sha256")).unwrap());
    assert_eq!(session, fs::read(dir.path().join("run/session.json")).unwrap());

    let out = fsied(dir.path(), &["-c", "desk.conf", "train", "--resume", "9"]);
    assert_eq!(out.status.code(), Some(2));

    ok(fsied(dir.path(), &["-c", "desk.conf", "--set", "output.dir=ablated", "train", "--ablate", "no-ek"]));
    let config = fs::read_to_string(dir.path().join("ablated/config.txt")).unwrap();
    assert!(config.lines().any(|l| l.trim() == "ablation.external_knowledge = false"), "{config}");
    let out = fsied(dir.path(), &["-c", "desk.conf", "train", "--ablate", "no-xx"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn env_overrides_file_and_set_overrides_env() {
    let (dir, _) = workspace();
    let run = |set: &[&str], env: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_fsied"));
        cmd.current_dir(dir.path()).args(["-c", "desk.conf"]).args(set).arg("ingest-frames");
        if let Some(v) = env {
            cmd.env("FSIED_OUTPUT_DIR", v);
        }
        assert!(cmd.output().unwrap().status.success());
    };
    run(&[], Some("from-env"));
    assert!(dir.path().join("from-env/frames/config.txt").exists());
    run(&["--set", "output.dir=from-set"], Some("from-env2"));
    assert!(dir.path().join("from-set/frames/config.txt").exists());
    assert!(!dir.path().join("from-env2").exists());
}

#[test]
fn evaluate_reference_matrices() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("eval");
    let text = ok(fsied(dir.path(), &["evaluate", fixture().to_str().unwrap(), "--out", "eval"]));
    assert!(text.contains("70.33"), "{text}");
    assert!(text.contains("22.54"), "{text}");
    let summary = fs::read(out_dir.join("summary.json")).unwrap();
    assert!(out_dir.join("curves.svg").exists());
    ok(fsied(dir.path(), &["evaluate", fixture().to_str().unwrap(), "--out", "eval"]));
    assert_eq!(summary, fs::read(out_dir.join("summary.json")).unwrap());

    fs::write(dir.path().join("empty.json"), "").unwrap();
    assert_eq!(fsied(dir.path(), &["evaluate", "empty.json"]).status.code(), Some(3));
    fs::write(dir.path().join("bad.json"), r#"{"rounds": 3}"#).unwrap();
    assert_eq!(fsied(dir.path(), &["evaluate", "bad.json"]).status.code(), Some(3));
}

#[test]
fn evaluate_a_trained_session() {
    let (dir, _) = workspace();
    ok(fsied(dir.path(), &["-c", "desk.conf", "--set", "train.epochs=1", "train"]));
    let text = ok(fsied(dir.path(), &["evaluate", "run/session.json", "--out", "ev"]));
    assert!(dir.path().join("ev/ood.txt").exists(), "{text}");
    assert!(dir.path().join("ev/matrix.txt").exists());
}

#[test]
fn retained_sweep_draws_one_curve_per_setting() {
    let (dir, _) = workspace();
    ok(fsied(
        dir.path(),
        &["-c", "desk.conf", "--set", "train.epochs=1", "sweep", "--axis", "retained", "--values", "0,1,2"],
    ));
    let svg = fs::read_to_string(dir.path().join("run/sweep/retained.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 3);
    assert!(!dir.path().join("run/sweep/failures.txt").exists());
    let out = fsied(dir.path(), &["-c", "desk.conf", "sweep", "--axis", "depth", "--values", "1"]);
    assert_eq!(out.status.code(), Some(2));
}
