use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use cyclingnet::flow::flow_to_color;
use cyclingnet::network::{golden_diff, load_weights, save_weights, Model, Summary};
use cyclingnet::pipeline::manifest::find_frame;
use cyclingnet::pipeline::{
    fuse_clip_frame, load_manifest, save_png, usable_frames, ClipManifest, CorpusStats, Dataset, DatasetOptions,
    FlowCache, Split,
};
use cyclingnet::selftest::{self, SelftestOptions};
use cyclingnet::trainer::{
    format_intervals, predict_clip, predicted_intervals, threshold_sweep, train, write_history, write_predictions,
};
use log::{info, warn};

use crate::config::RunConfig;
use crate::CliError;

fn cache_for(config: &RunConfig) -> Result<FlowCache, CliError> {
    Ok(FlowCache::new(&config.paths.flow_cache, config.flow.clone(), config.frame_size())?)
}

fn output_file(config: &RunConfig, name: impl AsRef<Path>) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(&config.paths.output_dir).map_err(cyclingnet::Error::from)?;
    Ok(config.paths.output_dir.join(name))
}

fn dataset(config: &RunConfig) -> Result<Dataset, CliError> {
    let clips = load_manifest(&config.paths.manifest)?;
    let stats = CorpusStats::of(&clips);
    info!("{} clips, {} frames, {:.1}% positive", stats.clips, stats.frames, stats.positive_rate() * 100.0);
    let options = DatasetOptions {
        batch_size: config.train.batch_size,
        frame_size: config.frame_size(),
        augment: config.train.augment,
        memoize: config.data.memoize,
        seed: config.train.seed,
    };
    Ok(Dataset::build(clips, cache_for(config)?, &config.split_policy(), options)?)
}

fn trained_model(config: &RunConfig) -> Result<Model<f32>, CliError> {
    let mut model = Model::<f32>::new(config.model.clone())?;
    load_weights(&mut model, &config.weights_path())?;
    Ok(model)
}

pub fn flow(config: &RunConfig, emit_color: bool) -> Result<(), CliError> {
    let clips = load_manifest(&config.paths.manifest)?;
    let cache = cache_for(config)?;
    let mut failed = Vec::new();
    for clip in &clips {
        let result = cache.fill_clip(clip).and_then(|report| {
            if emit_color {
                let dir = config.paths.output_dir.join("flow_color").join(&clip.clip_id);
                for index in 1..clip.frame_count {
                    let color = flow_to_color(&cache.read(&clip.clip_id, index)?);
                    save_png(&dir.join(format!("flow_{index:06}.png")), &color)?;
                }
            }
            Ok(report)
        });
        match result {
            Ok(r) => println!("{}: {} flows computed, {} reused", clip.clip_id, r.computed, r.reused),
            Err(e) => {
                eprintln!("{}: {e}", clip.clip_id);
                failed.push(clip.clip_id.clone());
            }
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Data(format!("flow extraction failed for {} clip(s): {}", failed.len(), failed.join(", "))))
    }
}

pub fn fuse(config: &RunConfig, clip_filter: Option<&str>, limit: Option<usize>) -> Result<(), CliError> {
    let clips = load_manifest(&config.paths.manifest)?;
    let cache = cache_for(config)?;
    let mut written = 0;
    for clip in clips.iter().filter(|c| clip_filter.is_none_or(|id| c.clip_id == id)) {
        let dir = config.paths.output_dir.join("fused").join(&clip.clip_id);
        for index in usable_frames(clip.frame_count).take(limit.unwrap_or(usize::MAX)) {
            save_png(&dir.join(format!("fused_{index:06}.png")), &fuse_clip_frame(clip, &cache, index)?)?;
            written += 1;
        }
    }
    if let Some(id) = clip_filter {
        if written == 0 && !clips.iter().any(|c| c.clip_id == id) {
            return Err(CliError::Data(format!("clip {id} is not in {}", config.paths.manifest.display())));
        }
    }
    println!("{written} fused composites written to {}", config.paths.output_dir.join("fused").display());
    Ok(())
}

pub fn train_cmd(config: &RunConfig) -> Result<(), CliError> {
    let dataset = dataset(config)?;
    println!(
        "samples: {} train, {} val, {} test",
        dataset.split.train.len(),
        dataset.split.val.len(),
        dataset.split.test.len()
    );
    let mut model = Model::<f32>::new(config.model.clone())?;
    let outcome = train(&mut model, &dataset, &config.train, |r| {
        println!(
            "epoch {:>3}  loss {:.4}  acc {:.4}  val_loss {:.4}  val_acc {:.4}",
            r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc
        );
    })?;
    let state = &outcome.state;
    if let Some(best) = state.stopper.best_epoch {
        println!("stopped after {} epochs; best epoch {best} ({:.4})", state.epoch, state.stopper.best);
    }
    let weights = config.weights_path();
    if let Some(parent) = weights.parent() {
        std::fs::create_dir_all(parent).map_err(cyclingnet::Error::from)?;
    }
    save_weights(&model, &weights)?;
    write_history(&output_file(config, "history.csv")?, &state.history)?;
    let metrics_path = output_file(config, "validation_metrics.toml")?;
    std::fs::write(&metrics_path, toml::to_string(&outcome.validation).expect("metrics serialize"))
        .map_err(cyclingnet::Error::from)?;
    println!("validation: {}", outcome.validation);
    println!("weights written to {}", weights.display());
    Ok(())
}

pub fn eval(config: &RunConfig, split: Split, sweep: bool) -> Result<(), CliError> {
    let model = trained_model(config)?;
    let dataset = dataset(config)?;
    if dataset.split.keys(split).is_empty() {
        return Err(CliError::Data(format!("the {split} split has no samples")));
    }
    let evaluation = cyclingnet::trainer::evaluate(&model, &dataset, split, config.train.threshold)?;
    println!("{split}: {}", evaluation.metrics);
    write_predictions(&output_file(config, format!("predictions_{split}.csv"))?, &evaluation.records)?;
    if sweep {
        let rows = threshold_sweep(&evaluation.probabilities, &evaluation.labels, evaluation.metrics.loss);
        let mut csv = String::from("threshold,accuracy,precision,recall,false_positive_rate,f1\n");
        for m in &rows {
            println!("{m}");
            writeln!(
                csv,
                "{:.2},{:.6},{:.6},{:.6},{:.6},{:.6}",
                m.threshold, m.accuracy, m.precision, m.recall, m.false_positive_rate, m.f1
            )
            .expect("string write");
        }
        std::fs::write(output_file(config, format!("sweep_{split}.csv"))?, csv).map_err(cyclingnet::Error::from)?;
    }
    Ok(())
}

/// Manifest entry for a bare frame directory: frames counted from
/// `000000`, labels unknown.
fn clip_from_dir(dir: &Path) -> Result<ClipManifest, CliError> {
    if !dir.is_dir() {
        return Err(CliError::Data(format!("{} is not a directory", dir.display())));
    }
    let frame_count = (0..).take_while(|&i| find_frame(dir, i).is_some()).count();
    let clip_id = dir
        .canonicalize()
        .ok()
        .and_then(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .unwrap_or_else(|| "clip".into());
    Ok(ClipManifest {
        clip_id,
        frame_directory: dir.to_path_buf(),
        frame_count,
        labels: vec![0; frame_count],
        split: None,
        fps: None,
    })
}

pub fn predict(config: &RunConfig, clip_dir: &Path) -> Result<(), CliError> {
    let model = trained_model(config)?;
    let clip = clip_from_dir(clip_dir)?;
    if clip.frame_count == 0 {
        warn!("{}: no frames named 000000.<ext> found", clip_dir.display());
    }
    let cache = cache_for(config)?;
    let records = predict_clip(&model, &clip, &cache, config.train.threshold, config.train.batch_size, false)?;
    let out = output_file(config, format!("predictions_{}.csv", clip.clip_id))?;
    write_predictions(&out, &records)?;
    println!(
        "{}: {} frames, {} predictions written to {}",
        clip.clip_id,
        clip.frame_count,
        records.len(),
        out.display()
    );
    println!("{}", format_intervals(&predicted_intervals(&records)));
    Ok(())
}

pub fn summary(config: &RunConfig, golden: bool) -> Result<(), CliError> {
    let model = Model::<f32>::new(config.model.clone())?;
    let summary = Summary::of(&model);
    println!("{summary}");
    print!("{}", summary.totals());
    if golden {
        let diff = golden_diff(&summary);
        if !diff.is_empty() {
            for line in &diff {
                println!("golden mismatch: {line}");
            }
            return Err(CliError::Check(format!("{} golden mismatch(es)", diff.len())));
        }
        println!("golden: all layer shapes and parameter counts match");
    }
    Ok(())
}

pub fn selftest(opts: &SelftestOptions) -> Result<(), CliError> {
    let results = selftest::run(opts, |r| println!("{r}"))?;
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    println!("{}/{} checks passed", results.len() - failed.len(), results.len());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Check(format!("failed checks: {}", failed.join(", "))))
    }
}
