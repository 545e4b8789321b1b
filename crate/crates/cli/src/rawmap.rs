//! Raw anomaly maps: little-endian `f64` values in row-major order
//! (`<stem>.f64`) next to a JSON sidecar (`<stem>.json`).

use std::fs;
use std::path::{Path, PathBuf};

use adps_core::Tensor;
use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

pub const DTYPE: &str = "f64le";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub height: usize,
    pub width: usize,
    pub dtype: String,
    /// Image-level anomaly score.
    pub score: f64,
    pub source: String,
}

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Writes a `1×H×W×1` map and its sidecar.
pub fn write(stem: &Path, map: &Tensor, score: f64, source: &str) -> Result<()> {
    if map.n() != 1 || map.c() != 1 {
        bail!("raw map must be 1×H×W×1, got {:?}", map.shape());
    }
    if let Some(dir) = stem.parent() {
        fs::create_dir_all(dir)?;
    }
    let bytes: Vec<u8> = map.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(with_ext(stem, "f64"), bytes)?;
    let meta = Sidecar {
        height: map.h(),
        width: map.w(),
        dtype: DTYPE.into(),
        score,
        source: source.into(),
    };
    fs::write(with_ext(stem, "json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn read(stem: &Path) -> Result<(Tensor, Sidecar)> {
    let side = with_ext(stem, "json");
    let meta: Sidecar = serde_json::from_str(
        &fs::read_to_string(&side).with_context(|| format!("reading {}", side.display()))?,
    )
    .with_context(|| format!("parsing {}", side.display()))?;
    if meta.dtype != DTYPE {
        bail!("{}: unsupported dtype {}", side.display(), meta.dtype);
    }
    let bin = with_ext(stem, "f64");
    let bytes = fs::read(&bin).with_context(|| format!("reading {}", bin.display()))?;
    if bytes.len() != meta.height * meta.width * 8 {
        bail!("{}: {} bytes for a {}×{} map", bin.display(), bytes.len(), meta.height, meta.width);
    }
    let data = bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
        .collect();
    Ok((Tensor::from_vec([1, meta.height, meta.width, 1], data)?, meta))
}

/// Map location for a test image: `<parent dir name>/<file stem>`, which
/// keeps MVTec defect folders apart.
pub fn key(source: &Path) -> PathBuf {
    let stem = source.file_stem().unwrap_or_default();
    match source.parent().and_then(|p| p.file_name()) {
        Some(parent) => Path::new(parent).join(stem),
        None => PathBuf::from(stem),
    }
}
