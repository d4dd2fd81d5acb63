//! Clip manifests.
//!
//! One record per line; blank lines and lines starting with `#` are skipped.
//! A record is a whitespace-separated list of `key=value` fields:
//!
//! ```text
//! clip=ride_017 dir=frames/ride_017 frames=120 labels=0x40,1x30,0x50 split=train fps=30
//! ```
//!
//! | key      | required | value                                                      |
//! |----------|----------|------------------------------------------------------------|
//! | `clip`   | yes      | unique clip id (no whitespace or `/`)                      |
//! | `dir`    | yes      | frame directory, relative paths resolve against the manifest |
//! | `frames` | yes      | frame count `N`; files `000000.<ext>` … `N-1` must exist      |
//! | `labels` | yes      | run-length labels `<0|1>x<count>`, comma separated, summing to `N` |
//! | `split`  | no       | `train`, `val` or `test`                                   |
//! | `fps`    | no       | frame rate, informational only                             |
//!
//! Any other key is rejected.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Extensions accepted for frame files, tried in order.
pub const FRAME_EXTENSIONS: [&str; 6] = ["png", "ppm", "pgm", "pnm", "jpg", "jpeg"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?} (expected train, val or test)")),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipManifest {
    pub clip_id: String,
    pub frame_directory: PathBuf,
    pub frame_count: usize,
    pub labels: Vec<u8>,
    pub split: Option<Split>,
    pub fps: Option<f64>,
}

impl ClipManifest {
    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    /// Number of maximal runs of positive frames.
    pub fn events(&self) -> usize {
        count_events(&self.labels)
    }

    /// Path of frame `index`, probing the accepted extensions.
    pub fn frame_path(&self, index: usize) -> Result<PathBuf> {
        find_frame(&self.frame_directory, index).ok_or_else(|| {
            Error::Dataset(format!(
                "clip {}: frame {index} not found in {}",
                self.clip_id,
                self.frame_directory.display()
            ))
        })
    }

    /// Renders the record in manifest syntax.
    pub fn to_record(&self) -> String {
        let mut s = format!(
            "clip={} dir={} frames={} labels={}",
            self.clip_id,
            self.frame_directory.display(),
            self.frame_count,
            encode_labels(&self.labels)
        );
        if let Some(split) = self.split {
            s.push_str(&format!(" split={split}"));
        }
        if let Some(fps) = self.fps {
            s.push_str(&format!(" fps={fps}"));
        }
        s
    }
}

pub fn count_events(labels: &[u8]) -> usize {
    labels.iter().enumerate().filter(|&(i, &l)| l == 1 && (i == 0 || labels[i - 1] == 0)).count()
}

pub fn find_frame(dir: &Path, index: usize) -> Option<PathBuf> {
    FRAME_EXTENSIONS.iter().map(|ext| dir.join(format!("{index:06}.{ext}"))).find(|p| p.is_file())
}

pub fn encode_labels(labels: &[u8]) -> String {
    let mut runs: Vec<(u8, usize)> = Vec::new();
    for &l in labels {
        match runs.last_mut() {
            Some((v, n)) if *v == l => *n += 1,
            _ => runs.push((l, 1)),
        }
    }
    runs.iter().map(|(v, n)| format!("{v}x{n}")).collect::<Vec<_>>().join(",")
}

pub fn decode_labels(rle: &str) -> Result<Vec<u8>, String> {
    let mut out = Vec::new();
    for run in rle.split(',') {
        let (label, count) = run.split_once('x').ok_or_else(|| format!("label run {run:?} is not <label>x<count>"))?;
        let label: u8 = match label {
            "0" => 0,
            "1" => 1,
            other => return Err(format!("label {other:?} must be 0 or 1")),
        };
        let count: usize = count.parse().map_err(|_| format!("bad run length in {run:?}"))?;
        if count == 0 {
            return Err(format!("empty run {run:?}"));
        }
        out.extend(std::iter::repeat_n(label, count));
    }
    Ok(out)
}

fn parse_record(line: &str, base: &Path) -> Result<ClipManifest, String> {
    let (mut clip, mut dir, mut frames, mut labels, mut split, mut fps) = (None, None, None, None, None, None);
    let mut seen = HashSet::new();
    for field in line.split_whitespace() {
        let (key, value) = field.split_once('=').ok_or_else(|| format!("field {field:?} is not key=value"))?;
        if !seen.insert(key) {
            return Err(format!("duplicate field {key:?}"));
        }
        match key {
            "clip" => {
                if value.is_empty() || value.contains('/') || value.contains('\\') {
                    return Err(format!("invalid clip id {value:?}"));
                }
                clip = Some(value.to_owned());
            }
            "dir" => dir = Some(base.join(value)),
            "frames" => frames = Some(value.parse::<usize>().map_err(|_| format!("bad frame count {value:?}"))?),
            "labels" => labels = Some(decode_labels(value)?),
            "split" => split = Some(value.parse::<Split>()?),
            "fps" => {
                let v: f64 = value.parse().map_err(|_| format!("bad fps {value:?}"))?;
                if !(v > 0.0 && v.is_finite()) {
                    return Err(format!("fps must be positive, got {value}"));
                }
                fps = Some(v);
            }
            other => return Err(format!("unknown field {other:?}")),
        }
    }
    let clip_id = clip.ok_or("missing clip=")?;
    let frame_directory = dir.ok_or("missing dir=")?;
    let frame_count = frames.ok_or("missing frames=")?;
    let labels = labels.ok_or("missing labels=")?;
    if labels.len() != frame_count {
        return Err(format!("clip {clip_id}: {} labels for {frame_count} frames", labels.len()));
    }
    Ok(ClipManifest { clip_id, frame_directory, frame_count, labels, split, fps })
}

/// Parses manifest text without touching the filesystem.
pub fn parse_manifest(text: &str, base: &Path, origin: &Path) -> Result<Vec<ClipManifest>> {
    let mut clips = Vec::new();
    let mut ids = HashSet::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let clip = parse_record(line, base).map_err(|message| Error::Manifest {
            path: origin.to_path_buf(),
            message: format!("line {}: {message}", no + 1),
        })?;
        if !ids.insert(clip.clip_id.clone()) {
            return Err(Error::Manifest {
                path: origin.to_path_buf(),
                message: format!("line {}: duplicate clip id {}", no + 1, clip.clip_id),
            });
        }
        clips.push(clip);
    }
    Ok(clips)
}

/// Reads, parses and validates a manifest, checking that every frame file
/// exists.
pub fn load_manifest(path: &Path) -> Result<Vec<ClipManifest>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Manifest { path: path.to_path_buf(), message: e.to_string() })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let clips = parse_manifest(&text, base, path)?;
    for clip in &clips {
        for i in 0..clip.frame_count {
            if find_frame(&clip.frame_directory, i).is_none() {
                return Err(Error::Manifest {
                    path: path.to_path_buf(),
                    message: format!(
                        "clip {}: missing frame file {i:06}.* in {}",
                        clip.clip_id,
                        clip.frame_directory.display()
                    ),
                });
            }
        }
    }
    Ok(clips)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorpusStats {
    pub clips: usize,
    pub frames: usize,
    pub positives: usize,
}

impl CorpusStats {
    pub fn of(clips: &[ClipManifest]) -> Self {
        Self {
            clips: clips.len(),
            frames: clips.iter().map(|c| c.frame_count).sum(),
            positives: clips.iter().map(ClipManifest::positives).sum(),
        }
    }

    pub fn positive_rate(&self) -> f64 {
        if self.frames == 0 {
            0.0
        } else {
            self.positives as f64 / self.frames as f64
        }
    }
}
