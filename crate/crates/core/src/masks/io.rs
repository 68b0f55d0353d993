//! Mask files: a PGM raster (DC-centered) plus a JSON sidecar next to it.
//!
//! Binary masks are 8-bit with 255 for sampled points. Probability masks
//! are 16-bit, scaled by 65535.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::BinaryMask;
use crate::error::{Error, Result};
use crate::pgm::Pgm;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSidecar {
    pub height: usize,
    pub width: usize,
    pub alpha: f64,
    pub achieved_sparsity: f64,
    pub kind: String,
    pub seed: Option<u64>,
}

/// `mask.pgm` → `mask.json`.
pub fn sidecar_path(pgm: &Path) -> PathBuf {
    pgm.with_extension("json")
}

fn write_sidecar(pgm: &Path, sidecar: &MaskSidecar) -> Result<()> {
    let path = sidecar_path(pgm);
    let mut text = serde_json::to_string_pretty(sidecar).map_err(|e| Error::json(&path, e))?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_sidecar(pgm: &Path) -> Result<MaskSidecar> {
    let path = sidecar_path(pgm);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(&path, e))
}

pub fn write_binary_mask(path: &Path, mask: &BinaryMask, alpha: f64, kind: &str, seed: Option<u64>) -> Result<()> {
    let pgm = Pgm {
        width: mask.width(),
        height: mask.height(),
        maxval: 255,
        samples: mask.values().iter().map(|&b| b as u16 * 255).collect(),
    };
    pgm.write(path)?;
    write_sidecar(
        path,
        &MaskSidecar {
            height: mask.height(),
            width: mask.width(),
            alpha,
            achieved_sparsity: mask.achieved_sparsity(),
            kind: kind.to_string(),
            seed,
        },
    )
}

/// Reads an 8-bit mask; any nonzero sample counts as sampled.
pub fn read_binary_mask(path: &Path) -> Result<BinaryMask> {
    let pgm = Pgm::read(path)?;
    if pgm.maxval > 255 {
        return Err(Error::format(path, "binary masks must be 8-bit PGM"));
    }
    BinaryMask::new(
        pgm.height,
        pgm.width,
        pgm.samples.iter().map(|&s| u8::from(s > 0)).collect(),
    )
}

/// Writes probabilities in `[0, 1]` as a 16-bit PGM.
pub fn write_prob_mask<T: Real>(path: &Path, probs: &Tensor<T>, alpha: f64, kind: &str, seed: Option<u64>) -> Result<()> {
    let [h, w] = probs.shape() else {
        return Err(Error::shape("probability mask", format!("expected [H, W], got {:?}", probs.shape())));
    };
    let samples = probs
        .data()
        .iter()
        .map(|v| (v.as_f64().clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    Pgm {
        width: *w,
        height: *h,
        maxval: 65535,
        samples,
    }
    .write(path)?;
    write_sidecar(
        path,
        &MaskSidecar {
            height: *h,
            width: *w,
            alpha,
            achieved_sparsity: probs.mean_f64(),
            kind: kind.to_string(),
            seed,
        },
    )
}

pub fn read_prob_mask(path: &Path) -> Result<Tensor<f64>> {
    let pgm = Pgm::read(path)?;
    let scale = pgm.maxval as f64;
    Tensor::new(
        vec![pgm.height, pgm.width],
        pgm.samples.iter().map(|&s| s as f64 / scale).collect(),
    )
}
