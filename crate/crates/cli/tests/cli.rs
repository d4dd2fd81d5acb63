use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cyclingnet::pipeline::synthetic::write_static_clip;
use cyclingnet::pipeline::SyntheticCorpus;

fn run(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cyclingnet")).current_dir(cwd).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

/// A small synthetic corpus plus a shrunken-model config pointing at it.
struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new(train_clips: usize, val_clips: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let corpus = SyntheticCorpus { train_clips, val_clips, test_clips: 1, ..Default::default() };
        corpus.write(dir.path()).unwrap();
        let config = "preset = \"shrunken\"\n\
             paths.manifest = \"manifest.txt\"\n\
             paths.flow_cache = \"cache\"\n\
             paths.output_dir = \"out\"\n\
             train.max_epochs = 3\n\
             train.early_stop_patience = 2\n\
             train.batch_size = 8\n";
        std::fs::write(dir.path().join("run.toml"), config).unwrap();
        Self { dir }
    }

    fn path(&self) -> &Path {
        self.dir.path()
    }

    fn run(&self, args: &[&str]) -> Output {
        let mut all = vec!["--config", "run.toml"];
        all.extend_from_slice(args);
        run(self.path(), &all)
    }

    fn cache_files(&self, clip: &str) -> Vec<PathBuf> {
        let root = self.path().join("cache").join(clip);
        let key_dir = std::fs::read_dir(&root).unwrap().next().unwrap().unwrap().path();
        let mut files: Vec<PathBuf> = std::fs::read_dir(key_dir).unwrap().map(|e| e.unwrap().path()).collect();
        files.sort();
        files
    }
}

#[test]
fn summary_golden_passes_on_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["summary", "--golden"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("trainable_params=4383902"), "{out}");
    assert!(out.contains("non_trainable_params=456"), "{out}");
    assert!(dir.path().join("out/resolved-summary.toml").is_file());
}

#[test]
fn summary_golden_mismatch_lists_diff() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["summary", "--golden", "--set", "model.lstm_hidden=128"]);
    assert_eq!(code(&o), 4);
    let out = stdout(&o);
    assert!(out.contains("golden mismatch: bidirectional_1: params 263168"), "{out}");
}

#[test]
fn summary_cnn_has_no_recurrent_rows() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["summary", "--set", "model.variant=cnn"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    assert!(!out.contains("attention") && !out.contains("bidirectional") && !out.contains("lstm"), "{out}");
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "flow.window = 3\n").unwrap();
    let o = run(dir.path(), &["--config", "bad.toml", "summary"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("window"), "{}", stderr(&o));
    assert_eq!(code(&run(dir.path(), &["summary", "--set", "model.dropout=1.5"])), 2);
    assert_eq!(code(&run(dir.path(), &["--config", "missing.toml", "summary"])), 2);
}

#[test]
fn flow_is_idempotent_and_training_needs_it() {
    let ws = Workspace::new(1, 1);
    let o = ws.run(&["train"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("run the `flow` command first"), "{}", stderr(&o));

    let o = ws.run(&["flow"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("square_00: 7 flows computed, 0 reused"), "{}", stdout(&o));
    let files = ws.cache_files("square_00");
    assert_eq!(files.len(), 7);
    let before: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(f).unwrap()).collect();

    let o = ws.run(&["flow"]);
    assert!(stdout(&o).contains("square_00: 0 flows computed, 7 reused"), "{}", stdout(&o));
    let after: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(f).unwrap()).collect();
    assert_eq!(before, after);

    let o = ws.run(&["fuse", "--clip", "square_01", "--limit", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(ws.path().join("out/fused/square_01/fused_000005.png").is_file());
    assert_eq!(code(&ws.run(&["fuse", "--clip", "nope"])), 3);
}

#[test]
fn static_clip_colors_are_black() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_static_clip(dir.path(), "still", 6, 24, 32).unwrap();
    let m = manifest.to_str().unwrap();
    let o = run(dir.path(), &["flow", "--manifest", m, "--emit-color", "--set", "preset=shrunken"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for i in 1..6 {
        let img = image::open(dir.path().join(format!("out/flow_color/still/flow_{i:06}.png"))).unwrap().to_rgb8();
        assert!(img.pixels().all(|p| p.0 == [0, 0, 0]));
    }
}

#[test]
fn training_is_seed_deterministic_and_echo_reproduces() {
    let ws = Workspace::new(2, 1);
    assert_eq!(code(&ws.run(&["flow"])), 0);
    let train = |extra: &[&str]| {
        let mut args = vec!["--threads", "1", "--seed", "3", "train"];
        args.extend_from_slice(extra);
        let o = ws.run(&args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(stdout(&o).contains("validation: threshold=0.50"), "{}", stdout(&o));
        std::fs::read_to_string(ws.path().join("out/history.csv")).unwrap()
    };
    let first = train(&[]);
    assert_eq!(first.lines().count(), 4, "{first}");
    assert!(first.starts_with("epoch,train_loss,train_acc,val_loss,val_acc"));
    assert_eq!(first, train(&[]));
    assert!(ws.path().join("out/weights.cynw").is_file());
    assert!(ws.path().join("out/validation_metrics.toml").is_file());

    let echoed = ws.path().join("echo.toml");
    std::fs::copy(ws.path().join("out/resolved-train.toml"), &echoed).unwrap();
    let o = run(ws.path(), &["--threads", "1", "--config", "echo.toml", "train"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(first, std::fs::read_to_string(ws.path().join("out/history.csv")).unwrap());

    let o = ws.run(&["eval", "--split", "val", "--sweep"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let sweep = std::fs::read_to_string(ws.path().join("out/sweep_val.csv")).unwrap();
    let recalls: Vec<f64> = sweep.lines().skip(1).map(|l| l.split(',').nth(3).unwrap().parse().unwrap()).collect();
    assert_eq!(recalls.len(), 19);
    assert!(recalls.windows(2).all(|w| w[1] <= w[0]), "{recalls:?}");
    let preds = std::fs::read_to_string(ws.path().join("out/predictions_val.csv")).unwrap();
    assert_eq!(preds.lines().next().unwrap(), "clip_id,frame_index,probability,predicted,label");
    assert_eq!(preds.lines().count(), 1 + 4);

    let o = ws.run(&["eval", "--split", "val", "--set", "model.variant=cnn"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn predict_on_frame_directory() {
    let ws = Workspace::new(1, 1);
    assert_eq!(code(&ws.run(&["flow"])), 0);
    assert_eq!(code(&ws.run(&["train"])), 0);
    write_static_clip(ws.path(), "still", 10, 24, 32).unwrap();
    let o = ws.run(&["predict", "frames/still"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("still: 10 frames, 6 predictions"), "{out}");
    assert!(out.contains("predicted near-miss intervals"), "{out}");
    let preds = std::fs::read_to_string(ws.path().join("out/predictions_still.csv")).unwrap();
    let indices: Vec<&str> = preds.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(indices, ["4", "5", "6", "7", "8", "9"]);

    write_static_clip(ws.path(), "short", 4, 24, 32).unwrap();
    let o = ws.run(&["predict", "frames/short"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains("at least 5 are needed"), "{}", stderr(&o));
    let preds = std::fs::read_to_string(ws.path().join("out/predictions_short.csv")).unwrap();
    assert_eq!(preds.lines().count(), 1);
}

#[test]
fn selftest_names_a_perturbed_op() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["selftest", "--seeds", "1", "--perturb", "conv2d"]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("FAIL grad/conv2d"), "{out}");
    assert!(out.contains("PASS grad/dense"), "{out}");
    assert!(stderr(&o).contains("grad/conv2d"), "{}", stderr(&o));
}
