//! Datasets on disk: one ATNS file per clip and a `manifest.txt` with one
//! `path class_id fps` line per clip. Paths are relative to the manifest.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::prior::VideoClip;
use crate::scalar::Scalar;
use crate::tensor::atns;

pub const MANIFEST: &str = "manifest.txt";

/// Write `clips` into `dir` (created if missing). Returns the manifest path.
pub fn write_dataset<T: Scalar>(clips: &[VideoClip<T>], dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (i, clip) in clips.iter().enumerate() {
        let name = format!("clip_{i:05}.atns");
        atns::save(dir.join(&name), &clip.latent)?;
        writeln!(manifest, "{name} {} {}", clip.condition_id, clip.fps).expect("string write");
    }
    let path = dir.join(MANIFEST);
    std::fs::write(&path, manifest)?;
    Ok(path)
}

/// Read a dataset from a manifest file or from a directory holding one.
pub fn read_dataset<T: Scalar>(path: impl AsRef<Path>) -> Result<Vec<VideoClip<T>>> {
    let path = path.as_ref();
    let manifest = if path.is_dir() { path.join(MANIFEST) } else { path.to_path_buf() };
    let root = manifest.parent().unwrap_or(Path::new("."));
    let text = std::fs::read_to_string(&manifest)?;
    let mut clips = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |what: &str| Error::Format(format!("{}:{}: {what} in `{line}`", manifest.display(), i + 1));
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [file, class, fps] = fields[..] else {
            return Err(bad("expected `path class_id fps`"));
        };
        let class = class.parse().map_err(|_| bad("bad class id"))?;
        let fps = fps.parse().map_err(|_| bad("bad fps"))?;
        clips.push(VideoClip::new(atns::load(root.join(file))?, fps, class)?);
    }
    if clips.is_empty() {
        return Err(Error::Format(format!("{} lists no clips", manifest.display())));
    }
    Ok(clips)
}
