//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! fails. Runs without the test harness so the lines always reach the
//! `cargo test` output.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use cyclingnet::flow::FlowParams;
use cyclingnet::network::{Model, ModelConfig, Variant};
use cyclingnet::pipeline::{load_manifest, Dataset, DatasetOptions, FlowCache, Split, SplitPolicy, SyntheticCorpus};
use cyclingnet::selftest::{self, SelftestOptions, LAYER_CHECKS};
use cyclingnet::trainer::{drive_epochs, evaluate, train_epoch, Adam, EpochRecord, TrainConfig};

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self { passed, detail: detail.into() }
    }
}

fn cyclingnet(cwd: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_cyclingnet")).current_dir(cwd).args(args).output().expect("binary runs")
}

fn within(elapsed: Duration, limit: Duration) -> bool {
    elapsed < limit
}

fn golden_table() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let o = cyclingnet(dir.path(), &["summary", "--golden"]);
    let elapsed = start.elapsed();
    let out = String::from_utf8_lossy(&o.stdout);
    let totals = out.contains("trainable_params=4383902\n") && out.contains("non_trainable_params=456\n");
    Outcome::new(
        o.status.success() && totals && within(elapsed, Duration::from_secs(1)),
        format!("summary --golden exit {:?}, totals 4383902/456 {totals}, {elapsed:.2?} (< 1 s)", o.status.code()),
    )
}

fn gradients() -> Outcome {
    let opts = SelftestOptions::default();
    let start = Instant::now();
    let mut failed = Vec::new();
    for name in LAYER_CHECKS {
        let r = selftest::gradient_check(name, &opts).unwrap();
        println!("    {r}");
        if !r.passed {
            failed.push(r.name);
        }
    }
    let elapsed = start.elapsed();
    Outcome::new(
        failed.is_empty() && within(elapsed, Duration::from_secs(300)),
        format!("{} checks x {} seeds, failures {failed:?}, {elapsed:.1?} (< 5 min)", LAYER_CHECKS.len(), opts.seeds),
    )
}

fn flow_oracle() -> Outcome {
    let start = Instant::now();
    let results = selftest::flow_checks().unwrap();
    let elapsed = start.elapsed();
    for r in &results {
        println!("    {r}");
    }
    Outcome::new(
        results.iter().all(|r| r.passed) && within(elapsed, Duration::from_secs(30)),
        format!("{} checks, {elapsed:.1?} (< 30 s)", results.len()),
    )
}

fn fusion() -> Outcome {
    let r = selftest::fusion_check(1000, 2024).unwrap();
    Outcome::new(r.passed, r.detail)
}

fn metrics() -> Outcome {
    let r = selftest::metric_check();
    Outcome::new(r.passed, r.detail)
}

struct History {
    text: String,
    train_acc: Vec<f64>,
}

fn read_history(path: &Path) -> History {
    let text = std::fs::read_to_string(path).unwrap();
    let train_acc = text.lines().skip(1).map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
    History { text, train_acc }
}

/// Writes the 8 + 2 clip corpus, caches its flows with the CLI and trains
/// twice with the same seed.
fn synthetic_overfit(root: &Path) -> Outcome {
    let manifest = SyntheticCorpus::default().write(root).unwrap();
    let clips = load_manifest(&manifest).unwrap();
    let train_clips = clips.iter().filter(|c| c.split == Some(Split::Train)).count();
    std::fs::write(
        root.join("overfit.toml"),
        "preset = \"shrunken\"\n\
         paths.manifest = \"manifest.txt\"\n\
         paths.flow_cache = \"cache\"\n\
         paths.output_dir = \"out\"\n\
         train.max_epochs = 200\n\
         train.batch_size = 8\n\
         train.augment = false\n\
         data.memoize = true\n",
    )
    .unwrap();
    let start = Instant::now();
    let flow = cyclingnet(root, &["--config", "overfit.toml", "flow"]);
    if !flow.status.success() {
        return Outcome::new(false, format!("flow failed: {}", String::from_utf8_lossy(&flow.stderr)));
    }
    let mut runs = Vec::new();
    for _ in 0..2 {
        let o = cyclingnet(root, &["--config", "overfit.toml", "--threads", "1", "--seed", "5", "train"]);
        if !o.status.success() {
            return Outcome::new(false, format!("train failed: {}", String::from_utf8_lossy(&o.stderr)));
        }
        let stdout = String::from_utf8_lossy(&o.stdout);
        let samples = stdout.lines().find(|l| l.starts_with("samples:")).unwrap_or_default().to_owned();
        runs.push((read_history(&root.join("out/history.csv")), samples));
    }
    let elapsed = start.elapsed();
    let (history, samples) = &runs[0];
    let best = history.train_acc.iter().copied().fold(0.0, f64::max);
    let first = history.train_acc.iter().position(|&a| a >= 0.95).map(|i| i + 1);
    let reproducible = runs[0].0.text == runs[1].0.text;
    Outcome::new(
        train_clips == 8
            && samples.starts_with("samples: 32 train")
            && best >= 0.95
            && reproducible
            && within(elapsed, Duration::from_secs(1800)),
        format!(
            "{train_clips} train clips, {samples}; best train accuracy {best:.3} (first >= 0.95 at epoch {first:?}) \
             over {} epochs; identical history on rerun {reproducible}; {elapsed:.1?} for flow + 2 runs",
            history.train_acc.len()
        ),
    )
}

fn record(epoch: usize, loss: f64) -> EpochRecord {
    EpochRecord { epoch, train_loss: loss, train_acc: 0.5, val_loss: loss, val_acc: 0.5 }
}

fn early_stopping() -> Outcome {
    let config = TrainConfig::default();
    let flat = drive_epochs(&config, |e| Ok(record(e, 0.7)), |_| Ok(())).unwrap();
    let falling = drive_epochs(&config, |e| Ok(record(e, 1.0 / e as f64)), |_| Ok(())).unwrap();
    Outcome::new(
        flat.epoch == 21 && falling.epoch == config.max_epochs,
        format!(
            "constant loss stops at epoch {}, strictly improving loss runs {} of {} epochs",
            flat.epoch, falling.epoch, config.max_epochs
        ),
    )
}

/// Every variant trains one epoch on the cached synthetic corpus.
fn variants(root: &Path) -> Outcome {
    let clips = load_manifest(&root.join("manifest.txt")).unwrap();
    let cache = FlowCache::new(root.join("cache"), FlowParams::default(), (24, 32)).unwrap();
    let options = DatasetOptions { batch_size: 8, frame_size: (24, 32), augment: true, memoize: true, seed: 1 };
    let dataset = Dataset::build(clips, cache, &SplitPolicy::default(), options).unwrap();
    let config = TrainConfig { batch_size: 8, ..Default::default() };
    let mut parts = Vec::new();
    let mut passed = true;
    for variant in Variant::ALL {
        let mut model = Model::<f32>::new(ModelConfig::shrunken().with_variant(variant)).unwrap();
        let mut adam = Adam::new(config.adam(), &model.params).unwrap();
        let (train_loss, _) = train_epoch(&mut model, &mut adam, &dataset, &config, 1).unwrap();
        let val_loss = evaluate(&model, &dataset, Split::Val, 0.5).unwrap().metrics.loss;
        passed &= train_loss.is_finite() && val_loss.is_finite();
        parts.push(format!("{variant} {train_loss:.4}/{val_loss:.4}"));
    }
    Outcome::new(
        passed,
        format!(
            "one epoch train/val loss: {}; full-corpus scores are out of scope without the original recordings",
            parts.join(", ")
        ),
    )
}

type Criterion<'a> = Box<dyn Fn() -> Outcome + 'a>;

fn main() -> ExitCode {
    let corpus = tempfile::tempdir().unwrap();
    let criteria: Vec<(&str, Criterion)> = vec![
        ("1 layer table golden", Box::new(golden_table)),
        ("2 gradient correctness", Box::new(gradients)),
        ("3 optical-flow oracle", Box::new(flow_oracle)),
        ("4 fusion exactness", Box::new(fusion)),
        ("5 metric identities", Box::new(metrics)),
        ("6 synthetic overfit", Box::new(|| synthetic_overfit(corpus.path()))),
        ("7 early-stopping contract", Box::new(early_stopping)),
        ("8 architecture variants", Box::new(|| variants(corpus.path()))),
    ];
    let mut failures = 0;
    for (name, check) in criteria {
        let outcome = check();
        println!("{} {name}: {}", if outcome.passed { "PASS" } else { "FAIL" }, outcome.detail);
        failures += usize::from(!outcome.passed);
    }
    println!("acceptance: {failures} failing criteria");
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
