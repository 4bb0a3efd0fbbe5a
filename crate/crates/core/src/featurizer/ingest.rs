//! External I/Q capture ingestion (layout-driven).

use byteorder::{LittleEndian, ReadBytesExt};
use serde::{Deserialize, Serialize};
use std::io::BufReader;
use std::path::Path;

use super::FeatError;
use crate::sigmodel::{FrameMeta, IqFrame};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleEncoding {
    /// Interleaved little-endian f32 pairs: I0 Q0 I1 Q1 ...
    InterleavedF32,
    /// Interleaved little-endian i16 pairs, scaled by 1/32768.
    InterleavedI16,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelRule {
    /// Every frame in the file carries this label.
    PerFile(u32),
    /// JSON sidecar: array of {"file": ..., "label": ...}; the entry whose
    /// `file` matches the capture's file name supplies the label.
    Manifest(String),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IngestLayout {
    pub encoding: SampleEncoding,
    pub frame_len: usize,
    pub label: LabelRule,
}

#[derive(Deserialize)]
struct SidecarEntry {
    file: String,
    label: Option<u32>,
}

fn resolve_label(path: &Path, rule: &LabelRule) -> Result<u32, FeatError> {
    match rule {
        LabelRule::PerFile(l) => Ok(*l),
        LabelRule::Manifest(manifest_path) => {
            let text = std::fs::read_to_string(manifest_path)?;
            let entries: Vec<SidecarEntry> =
                serde_json::from_str(&text).map_err(|e| FeatError::Ingest {
                    path: manifest_path.clone(),
                    reason: format!("bad manifest json: {e}"),
                    offset: 0,
                })?;
            let name = path
                .file_name()
                .map(|n| n.to_string_lossy().to_string())
                .unwrap_or_default();
            let entry = entries
                .iter()
                .find(|e| e.file == name || e.file == path.to_string_lossy())
                .ok_or_else(|| FeatError::Ingest {
                    path: path.display().to_string(),
                    reason: "no manifest entry for file".into(),
                    offset: 0,
                })?;
            entry.label.ok_or_else(|| FeatError::Ingest {
                path: path.display().to_string(),
                reason: "manifest entry has no label".into(),
                offset: 0,
            })
        }
    }
}

/// Read uniform-length labeled frames from a raw capture file.
/// Trailing partial frames are an error (reported with the byte offset).
pub fn ingest_iq(path: &Path, layout: &IngestLayout) -> Result<Vec<IqFrame>, FeatError> {
    if layout.frame_len == 0 {
        return Err(FeatError::BadParams("frame_len must be >= 1".into()));
    }
    let label = resolve_label(path, &layout.label)?;
    let file = std::fs::File::open(path)?;
    let total = file.metadata()?.len();
    let mut r = BufReader::new(file);

    let sample_bytes = match layout.encoding {
        SampleEncoding::InterleavedF32 => 8u64, // one I/Q pair
        SampleEncoding::InterleavedI16 => 4u64,
    };
    let frame_bytes = sample_bytes * layout.frame_len as u64;
    if total % frame_bytes != 0 {
        return Err(FeatError::Ingest {
            path: path.display().to_string(),
            reason: format!("file truncated mid-frame ({total} bytes, frame is {frame_bytes})"),
            offset: total - total % frame_bytes,
        });
    }
    let count = (total / frame_bytes) as usize;
    let mut frames = Vec::with_capacity(count);
    for fi in 0..count {
        let mut i = Vec::with_capacity(layout.frame_len);
        let mut q = Vec::with_capacity(layout.frame_len);
        for _ in 0..layout.frame_len {
            match layout.encoding {
                SampleEncoding::InterleavedF32 => {
                    i.push(r.read_f32::<LittleEndian>()? as f64);
                    q.push(r.read_f32::<LittleEndian>()? as f64);
                }
                SampleEncoding::InterleavedI16 => {
                    i.push(r.read_i16::<LittleEndian>()? as f64 / 32768.0);
                    q.push(r.read_i16::<LittleEndian>()? as f64 / 32768.0);
                }
            }
        }
        frames.push(IqFrame {
            i,
            q,
            label,
            meta: FrameMeta {
                seed: fi as u64,
                ..FrameMeta::default()
            },
        });
    }
    Ok(frames)
}
