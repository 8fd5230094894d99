//! 8-bit grayscale PNG export.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{invalid, shape_err, Error, Result};
use crate::numerics::Tensor;

/// Maps `[lo, hi]` linearly to `0..=255`, clipping outside values.
pub fn to_gray8(x: &Tensor, lo: f64, hi: f64) -> Result<Vec<u8>> {
    if !(hi > lo) {
        return invalid(format!("display range [{lo}, {hi}] is empty"));
    }
    Ok(x
        .data()
        .iter()
        .map(|v| (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect())
}

/// Writes an `[H, W]` tensor or a `[k, H, W]` stack laid out side by side.
pub fn write_png(path: &Path, x: &Tensor, lo: f64, hi: f64) -> Result<()> {
    let (k, h, w) = match *x.shape() {
        [h, w] => (1, h, w),
        [k, h, w] => (k, h, w),
        _ => return shape_err(format!("png export expects [H, W] or [k, H, W], got {:?}", x.shape())),
    };
    let gray = to_gray8(x, lo, hi)?;
    let mut row_major = vec![0u8; k * h * w];
    for p in 0..k {
        for i in 0..h {
            for j in 0..w {
                row_major[i * k * w + p * w + j] = gray[p * h * w + i * w + j];
            }
        }
    }
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, (k * w) as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::Format(e.to_string()))?;
    writer
        .write_image_data(&row_major)
        .map_err(|e| Error::Format(e.to_string()))?;
    writer.finish().map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}
