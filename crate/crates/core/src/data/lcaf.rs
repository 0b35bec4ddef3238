//! `LCAF` feature files: precomputed feature maps with labels.
//!
//! Layout (little-endian): `"LCAF" | u32 version=1 | u32 N | u32 C | u32 H |
//! u32 W | N·C·H·W × f32 | N × u32 labels`.

use std::fs;
use std::path::Path;

use crate::data::{Dataset, SampleKind};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LCAF";
pub const VERSION: u32 = 1;

pub fn write_feature_file(dataset: &Dataset) -> Vec<u8> {
    let [c, h, w] = dataset.sample_shape;
    let mut out = Vec::with_capacity(24 + dataset.data.len() * 4 + dataset.len() * 4);
    out.extend_from_slice(MAGIC);
    for v in [VERSION, dataset.len() as u32, c as u32, h as u32, w as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in &dataset.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &l in &dataset.labels {
        out.extend_from_slice(&(l as u32).to_le_bytes());
    }
    out
}

/// Class count is inferred as `max(label) + 1`; names are the indices.
pub fn read_feature_file(bytes: &[u8]) -> Result<Dataset> {
    let bad = |msg: String| Error::format("LCAF feature file", msg);
    if bytes.len() < 24 {
        return Err(bad(format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(bad(format!("bad magic {:?}", &bytes[..4])));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let version = word(0) as u32;
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            what: "LCAF",
            version,
        });
    }
    let (n, c, h, w) = (word(1), word(2), word(3), word(4));
    if n == 0 || c == 0 || h == 0 || w == 0 {
        return Err(bad(format!("empty dimensions N={n} C={c} H={h} W={w}")));
    }
    let floats = n * c * h * w;
    let need = 24 + 4 * floats + 4 * n;
    if bytes.len() != need {
        return Err(bad(format!(
            "payload is {} bytes, header N={n} C={c} H={h} W={w} needs {need}",
            bytes.len()
        )));
    }
    let body = &bytes[24..];
    let data: Vec<f32> = body[..4 * floats]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(bad("non-finite feature value".into()));
    }
    let labels: Vec<usize> = body[4 * floats..]
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
        .collect();
    let k = labels.iter().max().map_or(0, |m| m + 1);
    Ok(Dataset {
        kind: SampleKind::Features,
        sample_shape: [c, h, w],
        data,
        labels,
        class_names: (0..k).map(|i| i.to_string()).collect(),
    })
}

pub fn load_feature_file(path: &Path) -> Result<Dataset> {
    read_feature_file(&fs::read(path)?)
}
