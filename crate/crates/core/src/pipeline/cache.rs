//! On-disk flow cache.
//!
//! File layout (all little-endian):
//!
//! | offset | size | field                     |
//! |--------|------|---------------------------|
//! | 0      | 4    | magic `CYFL`              |
//! | 4      | 4    | width (u32)               |
//! | 8      | 4    | height (u32)              |
//! | 12     | 4    | format version (u32) = 1  |
//! | 16     | 8·W·H| interleaved `(u, v)` f32  |
//!
//! Files live at `<root>/<clip_id>/<key>/flow_<index>.bin`, where `key` hashes
//! the flow parameters and the frame size, and `index` is the later frame of
//! the pair.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::debug;

use super::frames::load_frame;
use super::manifest::ClipManifest;
use crate::error::{Error, Result};
use crate::flow::{estimate_flow, FlowField, FlowParams, GrayFrame};

pub const FLOW_MAGIC: [u8; 4] = *b"CYFL";
pub const FLOW_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;

pub fn encode_flow(flow: &FlowField) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + flow.u.len() * 8);
    out.extend_from_slice(&FLOW_MAGIC);
    out.extend_from_slice(&(flow.width as u32).to_le_bytes());
    out.extend_from_slice(&(flow.height as u32).to_le_bytes());
    out.extend_from_slice(&FLOW_VERSION.to_le_bytes());
    for (u, v) in flow.u.iter().zip(&flow.v) {
        out.extend_from_slice(&u.to_le_bytes());
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_flow(bytes: &[u8]) -> Result<FlowField> {
    if bytes.len() < HEADER_LEN || bytes[..4] != FLOW_MAGIC {
        return Err(Error::FlowCache("bad magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (width, height, version) = (word(4), word(8), word(12));
    if version as u32 != FLOW_VERSION {
        return Err(Error::FlowCache(format!("unsupported version {version}")));
    }
    let expected = HEADER_LEN + width * height * 8;
    if bytes.len() != expected {
        return Err(Error::FlowCache(format!(
            "{width}x{height} field needs {expected} bytes, file has {}",
            bytes.len()
        )));
    }
    let mut flow = FlowField::zeros(width, height);
    for (i, pair) in bytes[HEADER_LEN..].chunks_exact(8).enumerate() {
        flow.u[i] = f32::from_le_bytes(pair[..4].try_into().expect("4 bytes"));
        flow.v[i] = f32::from_le_bytes(pair[4..].try_into().expect("4 bytes"));
    }
    Ok(flow)
}

#[derive(Clone, Debug)]
pub struct FlowCache {
    root: PathBuf,
    key: String,
    pub params: FlowParams,
    pub frame_size: (usize, usize),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CacheReport {
    pub computed: usize,
    pub reused: usize,
}

impl FlowCache {
    pub fn new(root: impl Into<PathBuf>, params: FlowParams, frame_size: (usize, usize)) -> Result<Self> {
        params.validate()?;
        let key = format!("{:016x}-{}x{}", params.fingerprint(), frame_size.0, frame_size.1);
        Ok(Self { root: root.into(), key, params, frame_size })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn clip_dir(&self, clip_id: &str) -> PathBuf {
        self.root.join(clip_id).join(&self.key)
    }

    /// Flow between frames `index - 1` and `index`.
    pub fn path(&self, clip_id: &str, index: usize) -> PathBuf {
        self.clip_dir(clip_id).join(format!("flow_{index:06}.bin"))
    }

    pub fn contains(&self, clip_id: &str, index: usize) -> bool {
        self.read(clip_id, index).is_ok()
    }

    /// Cheap presence check: the entry exists and has the expected length.
    pub fn check(&self, clip_id: &str, index: usize) -> Result<()> {
        let path = self.path(clip_id, index);
        let expected = (HEADER_LEN + self.frame_size.0 * self.frame_size.1 * 8) as u64;
        match fs::metadata(&path) {
            Ok(m) if m.len() == expected => Ok(()),
            Ok(m) => Err(Error::FlowCache(format!(
                "clip {clip_id} frame {index}: {} has {} bytes, expected {expected}; run the `flow` command first",
                path.display(),
                m.len()
            ))),
            Err(_) => Err(Error::FlowCache(format!(
                "clip {clip_id} frame {index}: missing flow {}; run the `flow` command first",
                path.display()
            ))),
        }
    }

    pub fn read(&self, clip_id: &str, index: usize) -> Result<FlowField> {
        let path = self.path(clip_id, index);
        let bytes = fs::read(&path).map_err(|e| {
            Error::FlowCache(format!(
                "clip {clip_id} frame {index}: cannot read {} ({e}); run the `flow` command first",
                path.display()
            ))
        })?;
        let flow = decode_flow(&bytes).map_err(|e| Error::FlowCache(format!("clip {clip_id} frame {index}: {e}")))?;
        if (flow.height, flow.width) != self.frame_size {
            return Err(Error::FlowCache(format!(
                "clip {clip_id} frame {index}: cached field is {}x{}, expected {}x{}",
                flow.height, flow.width, self.frame_size.0, self.frame_size.1
            )));
        }
        Ok(flow)
    }

    pub fn write(&self, clip_id: &str, index: usize, flow: &FlowField) -> Result<()> {
        let path = self.path(clip_id, index);
        let dir = path.parent().expect("cache path has a parent");
        fs::create_dir_all(dir)?;
        let tmp = dir.join(format!(".flow_{index:06}.tmp"));
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&encode_flow(flow))?;
        f.sync_all()?;
        fs::rename(&tmp, &path)?;
        Ok(())
    }

    /// Computes every missing flow of `clip` (indices `1..frame_count`);
    /// existing valid entries are left untouched.
    pub fn fill_clip(&self, clip: &ClipManifest) -> Result<CacheReport> {
        let mut report = CacheReport::default();
        let load_gray = |i: usize| -> Result<GrayFrame> {
            GrayFrame::from_rgb(&load_frame(&clip.frame_path(i)?, self.frame_size)?)
        };
        let mut last: Option<(usize, GrayFrame)> = None;
        for index in 1..clip.frame_count {
            if self.contains(&clip.clip_id, index) {
                report.reused += 1;
                continue;
            }
            let before = match last.take() {
                Some((i, g)) if i == index - 1 => g,
                _ => load_gray(index - 1)?,
            };
            let after = load_gray(index)?;
            let flow = estimate_flow(&before, &after, &self.params)?;
            self.write(&clip.clip_id, index, &flow)?;
            report.computed += 1;
            last = Some((index, after));
        }
        debug!("clip {}: {report:?}", clip.clip_id);
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codec_roundtrip_and_rejects() {
        let mut flow = FlowField::zeros(3, 2);
        flow.u[1] = 1.5;
        flow.v[4] = -2.25;
        let bytes = encode_flow(&flow);
        assert_eq!(bytes.len(), 16 + 6 * 8);
        assert_eq!(&bytes[..4], b"CYFL");
        assert_eq!(decode_flow(&bytes).unwrap(), flow);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_flow(&bad).is_err());
        assert!(decode_flow(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn key_depends_on_params_and_size() {
        let a = FlowCache::new("/c", FlowParams::default(), (240, 320)).unwrap();
        let b = FlowCache::new("/c", FlowParams { iterations: 4, ..Default::default() }, (240, 320)).unwrap();
        let c = FlowCache::new("/c", FlowParams::default(), (24, 32)).unwrap();
        assert_ne!(a.path("x", 1), b.path("x", 1));
        assert_ne!(a.path("x", 1), c.path("x", 1));
    }
}
