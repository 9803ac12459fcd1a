//! On-disk dataset: `<dir>/manifest.json` plus one raw little-endian `f32`
//! file per frame, C-order `[3, H, W]`, no header.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{clip_seed, make_sample, Sample, SceneConfig};
use crate::assignment::AnnotationSet;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::model::EgoMotionRecord;

pub const MANIFEST_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: usize,
    pub clip_seed: u64,
    /// Frame files relative to the dataset directory, oldest first.
    pub frames: Vec<String>,
    pub timestamps: Vec<f64>,
    pub egos: Vec<EgoMotionRecord>,
    pub future_frame: String,
    pub future_timestamp: f64,
    /// Future-frame annotations, normalized `cxcywh` and class id.
    pub annotations: AnnotationSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub split: String,
    pub config: SceneConfig,
    pub samples: Vec<SampleRecord>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn config(&self) -> &SceneConfig {
        &self.manifest.config
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// SHA-256 over the manifest and every frame file, in manifest order.
    pub fn content_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        let manifest = self.dir.join(MANIFEST);
        h.update(fs::read(&manifest).map_err(|e| Error::io(&manifest, e))?);
        for r in &self.manifest.samples {
            for f in r.frames.iter().chain(std::iter::once(&r.future_frame)) {
                let p = self.dir.join(f);
                h.update(fs::read(&p).map_err(|e| Error::io(&p, e))?);
            }
        }
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }
}

fn frame_name(id: usize, k: Option<usize>) -> String {
    match k {
        Some(k) => format!("frames/{id:06}_{k}.f32"),
        None => format!("frames/{id:06}_future.f32"),
    }
}

fn write_frame(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_frame(path: &Path, shape: [usize; 3]) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let want = 4 * shape.iter().product::<usize>();
    if bytes.len() != want {
        return Err(Error::Format {
            file: path.to_path_buf(),
            offset: bytes.len().min(want) as u64,
            message: format!("expected {want} bytes for shape {shape:?}, found {}", bytes.len()),
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Generates `n_samples` clips of `split` into `dir` (created if needed).
pub fn make_dataset(config: &SceneConfig, n_samples: usize, split: &str, dir: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    let frames_dir = dir.join("frames");
    fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    let records = (0..n_samples)
        .into_par_iter()
        .map(|id| {
            let s = make_sample(config, id, clip_seed(config.seed, split, id as u64))?;
            let mut frames = Vec::with_capacity(s.frames.len());
            for (k, f) in s.frames.iter().enumerate() {
                let name = frame_name(id, Some(k));
                write_frame(&dir.join(&name), f)?;
                frames.push(name);
            }
            let future_frame = frame_name(id, None);
            write_frame(&dir.join(&future_frame), &s.future_frame)?;
            Ok(SampleRecord {
                id,
                clip_seed: s.clip_seed,
                frames,
                timestamps: s.timestamps,
                egos: s.egos,
                future_frame,
                future_timestamp: s.future_timestamp,
                annotations: s.annotations,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        split: split.to_string(),
        config: config.clone(),
        samples: records,
    };
    let path = dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn byte_offset(text: &str, line: usize, column: usize) -> u64 {
    let start: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    (start + column.saturating_sub(1)) as u64
}

/// Reads a dataset written by [`make_dataset`].
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        file: path.clone(),
        offset: byte_offset(&text, e.line(), e.column()),
        message: e.to_string(),
    })?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Format {
            file: path,
            offset: 0,
            message: format!("unsupported manifest version {}", manifest.version),
        });
    }
    let c = &manifest.config;
    let shape = [3, c.image_height, c.image_width];
    let samples = manifest
        .samples
        .par_iter()
        .map(|r| {
            if r.frames.len() != r.timestamps.len() || r.frames.len() != r.egos.len() {
                return Err(Error::Format {
                    file: path.clone(),
                    offset: 0,
                    message: format!("sample {} has mismatched frame/timestamp/ego counts", r.id),
                });
            }
            let frames = r
                .frames
                .iter()
                .map(|f| read_frame(&dir.join(f), shape))
                .collect::<Result<_>>()?;
            Ok(Sample {
                id: r.id,
                clip_seed: r.clip_seed,
                frames,
                timestamps: r.timestamps.clone(),
                egos: r.egos.clone(),
                future_frame: read_frame(&dir.join(&r.future_frame), shape)?,
                future_timestamp: r.future_timestamp,
                annotations: r.annotations.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        dir: dir.to_path_buf(),
        manifest,
        samples,
    })
}
