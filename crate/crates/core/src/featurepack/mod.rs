//! On-disk feature container.
//!
//! A pack is a directory holding `manifest.json` plus one headerless file per
//! array (row-major, little-endian IEEE-754 `f32`). The manifest carries the
//! pack metadata, the query → video pairing table and one entry per array
//! giving its id, relative path, shape and dtype (`"f32le"`).
//!
//! Reading is strict: any shape, byte-count, finiteness or pairing problem is
//! an error.

mod synthetic;

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use synthetic::{
    generate_synthetic, generate_synthetic_traced, MomentSource, SyntheticPacks, SyntheticSpec, SyntheticTrace,
};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DTYPE: &str = "f32le";
const FORMAT: &str = "prvr-featurepack";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackMeta {
    pub feature_dim_video: usize,
    pub feature_dim_text: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub video_id: String,
    /// `T_f_raw × feature_dim_video`
    pub frames: Array2<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryRecord {
    pub query_id: String,
    /// `N × feature_dim_text`
    pub words: Array2<f32>,
}

/// Half-open frame range `[start, end)`. Diagnostic only: training never
/// reads it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MomentSpan {
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairingEntry {
    pub video_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moment_span: Option<MomentSpan>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePack {
    pub meta: PackMeta,
    pub videos: Vec<VideoRecord>,
    pub queries: Vec<QueryRecord>,
    pub pairing: BTreeMap<String, PairingEntry>,
    /// Auxiliary named arrays. Synthetic packs store the text ↔ video basis
    /// map here under [`TEXT_MAP_ID`].
    pub extras: BTreeMap<String, Array2<f32>>,
}

/// Orthogonal map taking a video-basis vector to the text basis
/// (`text = video · M`), stored by the synthetic generator.
pub const TEXT_MAP_ID: &str = "text_map";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArrayEntry {
    id: String,
    path: String,
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    meta: PackMeta,
    pairing: BTreeMap<String, PairingEntry>,
    videos: Vec<ArrayEntry>,
    queries: Vec<ArrayEntry>,
    #[serde(default)]
    extras: Vec<ArrayEntry>,
}

impl FeaturePack {
    pub fn video_index(&self) -> BTreeMap<&str, usize> {
        self.videos
            .iter()
            .enumerate()
            .map(|(i, v)| (v.video_id.as_str(), i))
            .collect()
    }

    /// `(query index, video index)` for every query, in query order.
    pub fn query_targets(&self) -> Result<Vec<(usize, usize)>> {
        let index = self.video_index();
        self.queries
            .iter()
            .enumerate()
            .map(|(qi, q)| {
                let entry = self
                    .pairing
                    .get(&q.query_id)
                    .ok_or_else(|| Error::Validation(format!("query `{}` has no pairing entry", q.query_id)))?;
                let vi = index.get(entry.video_id.as_str()).ok_or_else(|| {
                    Error::Validation(format!(
                        "query `{}` is paired with unknown video `{}`",
                        q.query_id, entry.video_id
                    ))
                })?;
                Ok((qi, *vi))
            })
            .collect()
    }

    /// Checks every structural invariant of the pack.
    pub fn validate(&self) -> Result<()> {
        let PackMeta {
            feature_dim_video,
            feature_dim_text,
            ..
        } = self.meta;
        if feature_dim_video == 0 || feature_dim_text == 0 {
            return Err(Error::Validation("feature dimensions must be positive".into()));
        }
        let mut seen = HashSet::new();
        for v in &self.videos {
            if !seen.insert(v.video_id.as_str()) {
                return Err(Error::Validation(format!("duplicate video id `{}`", v.video_id)));
            }
            check_array(&v.video_id, &v.frames, feature_dim_video, "frame")?;
        }
        let mut seen = HashSet::new();
        for q in &self.queries {
            if !seen.insert(q.query_id.as_str()) {
                return Err(Error::Validation(format!("duplicate query id `{}`", q.query_id)));
            }
            check_array(&q.query_id, &q.words, feature_dim_text, "word")?;
        }
        let videos: BTreeMap<&str, &VideoRecord> = self.videos.iter().map(|v| (v.video_id.as_str(), v)).collect();
        for (qid, entry) in &self.pairing {
            if !seen.contains(qid.as_str()) {
                return Err(Error::Validation(format!("pairing references unknown query `{qid}`")));
            }
            let video = videos.get(entry.video_id.as_str()).ok_or_else(|| {
                Error::Validation(format!(
                    "pairing of `{qid}` references unknown video `{}`",
                    entry.video_id
                ))
            })?;
            if let Some(span) = entry.moment_span {
                let frames = video.frames.nrows();
                if span.start >= span.end || span.end > frames {
                    return Err(Error::Validation(format!(
                        "moment span [{}, {}) of `{qid}` is outside 0..{frames}",
                        span.start, span.end
                    )));
                }
            }
        }
        for q in &self.queries {
            if !self.pairing.contains_key(&q.query_id) {
                return Err(Error::Validation(format!(
                    "query `{}` has no pairing entry",
                    q.query_id
                )));
            }
        }
        for (id, arr) in &self.extras {
            if arr.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("extra array `{id}` has non-finite entries")));
            }
        }
        Ok(())
    }
}

fn check_array(id: &str, arr: &Array2<f32>, dim: usize, what: &str) -> Result<()> {
    if arr.nrows() == 0 {
        return Err(Error::Validation(format!("`{id}` has no {what} rows")));
    }
    if arr.ncols() != dim {
        return Err(Error::Validation(format!(
            "`{id}` has {what} dimension {} but the pack declares {dim}",
            arr.ncols()
        )));
    }
    if arr.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation(format!("`{id}` contains NaN or Inf")));
    }
    Ok(())
}

/// Writes `pack` into `dir` (created if missing). The pack is validated first.
pub fn write_pack(pack: &FeaturePack, dir: &Path) -> Result<()> {
    pack.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut videos = Vec::with_capacity(pack.videos.len());
    for (i, v) in pack.videos.iter().enumerate() {
        let rel = format!("videos/{i:06}.f32");
        write_array(dir, &rel, &v.frames)?;
        videos.push(entry(&v.video_id, rel, &v.frames));
    }
    let mut queries = Vec::with_capacity(pack.queries.len());
    for (i, q) in pack.queries.iter().enumerate() {
        let rel = format!("queries/{i:06}.f32");
        write_array(dir, &rel, &q.words)?;
        queries.push(entry(&q.query_id, rel, &q.words));
    }
    let mut extras = Vec::with_capacity(pack.extras.len());
    for (i, (id, arr)) in pack.extras.iter().enumerate() {
        let rel = format!("extras/{i:03}.f32");
        write_array(dir, &rel, arr)?;
        extras.push(entry(id, rel, arr));
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        meta: pack.meta.clone(),
        pairing: pack.pairing.clone(),
        videos,
        queries,
        extras,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Loads and validates the pack stored in `dir`.
pub fn read_pack(dir: &Path) -> Result<FeaturePack> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Manifest {
        path: path.clone(),
        message: e.to_string(),
    })?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::Manifest {
            path,
            message: format!(
                "unsupported format {} v{} (expected {FORMAT} v{VERSION})",
                manifest.format, manifest.version
            ),
        });
    }
    let videos = manifest
        .videos
        .iter()
        .map(|e| {
            Ok(VideoRecord {
                video_id: e.id.clone(),
                frames: read_entry(dir, e)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let queries = manifest
        .queries
        .iter()
        .map(|e| {
            Ok(QueryRecord {
                query_id: e.id.clone(),
                words: read_entry(dir, e)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let extras = manifest
        .extras
        .iter()
        .map(|e| Ok((e.id.clone(), read_entry(dir, e)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let pack = FeaturePack {
        meta: manifest.meta,
        videos,
        queries,
        pairing: manifest.pairing,
        extras,
    };
    pack.validate()?;
    Ok(pack)
}

fn entry(id: &str, path: String, arr: &Array2<f32>) -> ArrayEntry {
    ArrayEntry {
        id: id.to_string(),
        path,
        shape: vec![arr.nrows(), arr.ncols()],
        dtype: DTYPE.into(),
    }
}

/// Serialises `arr` as headerless row-major `f32le` at `dir/rel`.
pub(crate) fn write_array(dir: &Path, rel: &str, arr: &Array2<f32>) -> Result<()> {
    let path = dir.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut bytes = Vec::with_capacity(arr.len() * 4);
    for v in arr.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
}

/// Reads a headerless `f32le` array of the given shape from `dir/rel`.
pub(crate) fn read_array(dir: &Path, rel: &str, shape: &[usize]) -> Result<Array2<f32>> {
    let path: PathBuf = dir.join(rel);
    if shape.len() != 2 {
        return Err(Error::ShapeMismatch {
            what: path.display().to_string(),
            message: format!("expected a 2-d shape, got {shape:?}"),
        });
    }
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let expected = 4 * shape[0] * shape[1];
    if bytes.len() != expected {
        return Err(Error::ShapeMismatch {
            what: path.display().to_string(),
            message: format!(
                "shape {shape:?} needs {expected} bytes but the file holds {}",
                bytes.len()
            ),
        });
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Array2::from_shape_vec((shape[0], shape[1]), data).expect("length checked"))
}

fn read_entry(dir: &Path, e: &ArrayEntry) -> Result<Array2<f32>> {
    if e.dtype != DTYPE {
        return Err(Error::Manifest {
            path: dir.join(MANIFEST_FILE),
            message: format!("array `{}` has dtype `{}`, expected `{DTYPE}`", e.id, e.dtype),
        });
    }
    read_array(dir, &e.path, &e.shape)
}
