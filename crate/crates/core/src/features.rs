//! Feature matrices, the `MFE1` binary feature format and JSON-Lines manifests.
//!
//! An `MFE1` file is a 12-byte header followed by a row-major `f32` payload:
//!
//! ```text
//! bytes 0..4   ASCII "MFE1"
//! bytes 4..8   u32 LE  T (snippets)
//! bytes 8..12  u32 LE  D (feature dim)
//! bytes 12..   T*D f32 LE, snippet-major
//! ```

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::{Error, Result, FRAMES_PER_SNIPPET};

pub const FEATURE_MAGIC: &[u8; 4] = b"MFE1";
pub const HEADER_LEN: usize = 12;

/// A `T x D` matrix of snippet features for one modality of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    data: Array2<f32>,
}

impl FeatureSequence {
    pub fn new(data: Array2<f32>) -> Result<Self> {
        let (t, d) = data.dim();
        if t == 0 || d == 0 {
            return Err(Error::Contract(format!(
                "feature sequence must be non-empty, got {t}x{d}"
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Contract(format!(
                "non-finite feature value at flat index {pos}"
            )));
        }
        Ok(Self { data })
    }

    pub fn from_f64(data: &Array2<f64>) -> Result<Self> {
        Self::new(data.mapv(|v| v as f32))
    }

    /// Snippet count `T`.
    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &Array2<f32> {
        &self.data
    }

    pub fn to_f64(&self) -> Array2<f64> {
        self.data.mapv(f64::from)
    }
}

/// Serializes `seq` into `MFE1` bytes.
pub fn encode_features(seq: &FeatureSequence) -> Vec<u8> {
    let (t, d) = seq.data.dim();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * t * d);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for v in seq.data.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses `MFE1` bytes. `path` is only used in error messages.
pub fn decode_features(bytes: &[u8], path: &Path) -> Result<FeatureSequence> {
    let format_err = |field: &'static str, message: String| Error::Format {
        path: path.to_path_buf(),
        field,
        message,
    };
    if bytes.len() < HEADER_LEN {
        return Err(format_err(
            "header",
            format!("truncated header: {} of {HEADER_LEN} bytes", bytes.len()),
        ));
    }
    if &bytes[0..4] != FEATURE_MAGIC {
        return Err(format_err("magic", "bad magic".to_string()));
    }
    let t = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if t == 0 {
        return Err(format_err("T", "snippet count must be >= 1".to_string()));
    }
    if d == 0 {
        return Err(format_err("D", "feature dimension must be >= 1".to_string()));
    }
    let expected = t
        .checked_mul(d)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| format_err("payload", format!("T*D overflows: {t}x{d}")))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        let kind = if payload.len() < expected {
            "truncated payload"
        } else {
            "trailing bytes after payload"
        };
        return Err(format_err(
            "payload",
            format!("{kind}: expected {expected} bytes for {t}x{d}, found {}", payload.len()),
        ));
    }
    let mut values = Vec::with_capacity(t * d);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(format_err(
                "payload",
                format!("non-finite value at row {}, column {}", i / d, i % d),
            ));
        }
        values.push(v);
    }
    let data = Array2::from_shape_vec((t, d), values).expect("length checked above");
    Ok(FeatureSequence { data })
}

pub fn write_feature_file(seq: &FeatureSequence, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_features(seq)).map_err(|e| Error::io(path, e))
}

pub fn read_feature_file(path: impl AsRef<Path>) -> Result<FeatureSequence> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes, path)
}

/// One audio-visual video with its weak label and optional frame-level ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub id: String,
    pub audio: FeatureSequence,
    pub visual: FeatureSequence,
    /// Video-level label, 0 or 1.
    pub label: u8,
    pub num_frames: usize,
    /// Inclusive `[start_frame, end_frame]` intervals of violence.
    pub violent_intervals: Option<Vec<[usize; 2]>>,
}

impl VideoRecord {
    /// Snippet count shared by both modalities.
    pub fn len(&self) -> usize {
        self.audio.len()
    }

    pub fn is_empty(&self) -> bool {
        self.audio.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |message: String| Error::Manifest {
            id: self.id.clone(),
            message,
        };
        if self.audio.len() != self.visual.len() {
            return Err(err(format!(
                "snippet count mismatch: audio T={}, visual T={}",
                self.audio.len(),
                self.visual.len()
            )));
        }
        if self.label > 1 {
            return Err(err(format!("label must be 0 or 1, got {}", self.label)));
        }
        let t = self.len();
        let min_frames = FRAMES_PER_SNIPPET * (t - 1) + 1;
        let max_frames = FRAMES_PER_SNIPPET * t + FRAMES_PER_SNIPPET - 1;
        if self.num_frames < min_frames || self.num_frames > max_frames {
            return Err(err(format!(
                "num_frames {} inconsistent with T={t} (allowed {min_frames}..={max_frames})",
                self.num_frames
            )));
        }
        if let Some(intervals) = &self.violent_intervals {
            let mut sorted = intervals.clone();
            sorted.sort_unstable();
            for [start, end] in &sorted {
                if start > end || *end >= self.num_frames {
                    return Err(err(format!(
                        "illegal interval [{start}, {end}] for {} frames",
                        self.num_frames
                    )));
                }
            }
            for pair in sorted.windows(2) {
                if pair[1][0] <= pair[0][1] {
                    return Err(err(format!(
                        "illegal interval: [{}, {}] overlaps [{}, {}]",
                        pair[0][0], pair[0][1], pair[1][0], pair[1][1]
                    )));
                }
            }
            if (self.label == 1) != !intervals.is_empty() {
                return Err(err(format!(
                    "label {} disagrees with {} violent intervals",
                    self.label,
                    intervals.len()
                )));
            }
        }
        Ok(())
    }

    /// Per-frame binary ground truth, when intervals are present.
    pub fn frame_labels(&self) -> Option<Vec<u8>> {
        let intervals = self.violent_intervals.as_ref()?;
        let mut labels = vec![0u8; self.num_frames];
        for &[start, end] in intervals {
            labels[start..=end].iter_mut().for_each(|l| *l = 1);
        }
        Some(labels)
    }

    /// Snippet `t` is positive iff any frame it covers is positive.
    pub fn snippet_labels(&self) -> Option<Vec<u8>> {
        let frames = self.frame_labels()?;
        let t = self.len();
        let mut labels = vec![0u8; t];
        for (f, &l) in frames.iter().enumerate() {
            if l == 1 {
                labels[snippet_of_frame(f, t)] = 1;
            }
        }
        Some(labels)
    }
}

/// Snippet covering frame `frame`; tail frames fold into the last snippet.
pub fn snippet_of_frame(frame: usize, t: usize) -> usize {
    (frame / FRAMES_PER_SNIPPET).min(t - 1)
}

/// Inclusive frame range covered by `snippet` in a video of `t` snippets and `num_frames` frames.
pub fn snippet_frame_range(snippet: usize, t: usize, num_frames: usize) -> [usize; 2] {
    let start = snippet * FRAMES_PER_SNIPPET;
    let end = if snippet + 1 == t {
        num_frames - 1
    } else {
        start + FRAMES_PER_SNIPPET - 1
    };
    [start, end]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    /// A manifest whose file stem ends in `test` is a test split; anything else trains.
    pub fn from_path(path: &Path) -> Self {
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().to_ascii_lowercase())
            .unwrap_or_default();
        if stem.ends_with("test") {
            Split::Test
        } else {
            Split::Train
        }
    }
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub audio: String,
    pub visual: String,
    pub label: u8,
    pub num_frames: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub violent_intervals: Option<Vec<[usize; 2]>>,
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub split: Split,
    pub entries: Vec<ManifestEntry>,
    pub records: Vec<VideoRecord>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Loads and validates a JSON-Lines manifest; feature paths resolve against `root_dir`.
pub fn load_manifest(path: impl AsRef<Path>, root_dir: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let root_dir = root_dir.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry =
            serde_json::from_str(&line).map_err(|e| Error::ManifestSyntax {
                line: lineno + 1,
                message: e.to_string(),
            })?;
        if !seen.insert(entry.id.clone()) {
            return Err(Error::Manifest {
                id: entry.id,
                message: "duplicate id".to_string(),
            });
        }
        let load = |rel: &str| {
            read_feature_file(root_dir.join(rel)).map_err(|e| Error::Manifest {
                id: entry.id.clone(),
                message: e.to_string(),
            })
        };
        let record = VideoRecord {
            id: entry.id.clone(),
            audio: load(&entry.audio)?,
            visual: load(&entry.visual)?,
            label: entry.label,
            num_frames: entry.num_frames,
            violent_intervals: entry.violent_intervals.clone(),
        };
        record.validate()?;
        entries.push(entry);
        records.push(record);
    }
    Ok(Manifest {
        split: Split::from_path(path),
        entries,
        records,
    })
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for entry in entries {
        serde_json::to_writer(&mut out, entry)?;
        out.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Writes each record's feature files under `root_dir/features/` and a manifest at `manifest_path`.
pub fn write_records(
    records: &[VideoRecord],
    root_dir: impl AsRef<Path>,
    manifest_path: impl AsRef<Path>,
) -> Result<Vec<ManifestEntry>> {
    let root_dir = root_dir.as_ref();
    let feature_dir = root_dir.join("features");
    fs::create_dir_all(&feature_dir).map_err(|e| Error::io(&feature_dir, e))?;
    let mut entries = Vec::with_capacity(records.len());
    for record in records {
        let audio: PathBuf = ["features", &format!("{}_audio.mfe", record.id)].iter().collect();
        let visual: PathBuf = ["features", &format!("{}_visual.mfe", record.id)].iter().collect();
        write_feature_file(&record.audio, root_dir.join(&audio))?;
        write_feature_file(&record.visual, root_dir.join(&visual))?;
        entries.push(ManifestEntry {
            id: record.id.clone(),
            audio: audio.to_string_lossy().into_owned(),
            visual: visual.to_string_lossy().into_owned(),
            label: record.label,
            num_frames: record.num_frames,
            violent_intervals: record.violent_intervals.clone(),
        });
    }
    write_manifest(manifest_path, &entries)?;
    Ok(entries)
}
