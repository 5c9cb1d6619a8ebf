//! 8-bit PNG composites and raw float sidecars for inspection.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Viridis anchors at evenly spaced positions; colors in between are interpolated.
pub const VIRIDIS: [[u8; 3]; 9] = [
    [68, 1, 84],
    [71, 44, 122],
    [59, 81, 139],
    [44, 113, 142],
    [33, 144, 141],
    [39, 173, 129],
    [92, 200, 99],
    [170, 220, 50],
    [253, 231, 37],
];

pub fn colormap(t: f64) -> [u8; 3] {
    let t = if t.is_nan() { 0.0 } else { t.clamp(0.0, 1.0) };
    let pos = t * (VIRIDIS.len() - 1) as f64;
    let i = (pos.floor() as usize).min(VIRIDIS.len() - 2);
    let f = pos - i as f64;
    std::array::from_fn(|k| {
        let (a, b) = (VIRIDIS[i][k] as f64, VIRIDIS[i + 1][k] as f64);
        (a + (b - a) * f).round() as u8
    })
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub enum Stretch {
    /// Each band's own minimum maps to 0 and maximum to 255.
    MinMax,
    Fixed { lo: f64, hi: f64 },
}

#[derive(Serialize)]
struct CompositeSidecar {
    bands: [usize; 3],
    min: [f64; 3],
    max: [f64; 3],
    width: usize,
    height: usize,
}

fn to_io(e: png::EncodingError) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn write_png(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(to_io)?;
    writer.write_image_data(rgb).map_err(to_io)?;
    writer.finish().map_err(to_io)
}

fn quantize(v: f64, lo: f64, hi: f64) -> u8 {
    if !(hi > lo) {
        return 0;
    }
    ((v - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Write three bands of item 0 as an RGB PNG, with the stretch used recorded
/// next to it as `<path>.json`.
pub fn write_rgb<T: Real>(path: &Path, image: &Tensor<T>, bands: [usize; 3], stretch: Stretch) -> Result<()> {
    let s = image.shape();
    if let Some(&b) = bands.iter().find(|&&b| b >= s.c) {
        return Err(Error::config(format!("band {b} out of range for {} bands", s.c)));
    }
    let planes: Vec<Vec<f64>> = bands
        .iter()
        .map(|&b| {
            image.item(0)[b * s.plane()..(b + 1) * s.plane()]
                .iter()
                .map(|v| v.to_f64().unwrap_or(0.0))
                .collect()
        })
        .collect();
    let mut min = [0.0; 3];
    let mut max = [0.0; 3];
    for k in 0..3 {
        (min[k], max[k]) = match stretch {
            Stretch::MinMax => planes[k]
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v))),
            Stretch::Fixed { lo, hi } => (lo, hi),
        };
    }
    let mut rgb = Vec::with_capacity(3 * s.plane());
    for p in 0..s.plane() {
        for k in 0..3 {
            rgb.push(quantize(planes[k][p], min[k], max[k]));
        }
    }
    write_png(path, s.w, s.h, &rgb)?;
    let sidecar = CompositeSidecar {
        bands,
        min,
        max,
        width: s.w,
        height: s.h,
    };
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)? + "\n")?;
    Ok(())
}

/// Color-map a single plane with `lo` at the bottom of the scale and `hi` at the top.
pub fn write_heatmap(path: &Path, plane: &[f64], height: usize, width: usize, lo: f64, hi: f64) -> Result<()> {
    if plane.len() != height * width {
        return Err(Error::config(format!("heatmap plane of {} values is not {height}x{width}", plane.len())));
    }
    let rgb: Vec<u8> = plane.iter().flat_map(|&v| colormap((v - lo) / (hi - lo))).collect();
    write_png(path, width, height, &rgb)
}

#[derive(Serialize)]
struct RawSidecar<'a> {
    shape: [usize; 4],
    dtype: &'static str,
    endianness: &'static str,
    #[serde(flatten)]
    extra: &'a serde_json::Value,
}

/// Little-endian float dump plus a JSON description at `<path>.json`.
pub fn write_raw<T: Real>(path: &Path, t: &Tensor<T>, extra: &serde_json::Value) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let bytes: Vec<u8> = t
        .data()
        .iter()
        .flat_map(|v| (v.to_f32().unwrap_or(f32::NAN)).to_le_bytes())
        .collect();
    fs::write(path, bytes)?;
    let side = RawSidecar {
        shape: t.shape().dims(),
        dtype: "f32",
        endianness: "little",
        extra,
    };
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&side)? + "\n")?;
    Ok(())
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    os.into()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colormap_ends() {
        assert_eq!(colormap(0.0), VIRIDIS[0]);
        assert_eq!(colormap(1.0), VIRIDIS[8]);
        assert_eq!(colormap(2.0), VIRIDIS[8]);
        assert_eq!(colormap(0.5), VIRIDIS[4]);
    }

    #[test]
    fn flat_band_is_black() {
        assert_eq!(quantize(0.0, 0.0, 0.0), 0);
        assert_eq!(quantize(0.5, 0.0, 1.0), 128);
    }
}
