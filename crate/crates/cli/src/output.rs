//! Artifact plumbing: output-root resolution, run directories, CSV / JSON /
//! PNG writers, contact sheets, and image metrics.
//!
//! CSV files are written with a header row and RFC-4180 quoting; floats use
//! the shortest round-trip decimal form, so a `(config, seed)` pair always
//! reproduces byte-identical files.

use crate::run::Failure;
use image::{GrayImage, Luma};
use serde::Serialize;
use std::path::{Path, PathBuf};

/// Environment variable naming the artifact root when `--out` is absent.
pub const OUT_ENV: &str = "ESMLAB_OUT";

/// Resolution order: explicit flag, then `$ESMLAB_OUT`, then `./runs`.
pub fn out_root(flag: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(env) = std::env::var_os(OUT_ENV) {
        if !env.is_empty() {
            return PathBuf::from(env);
        }
    }
    PathBuf::from("runs")
}

/// Creates (or reuses) the run directory `<root>/<name>`.
pub fn run_dir(root: &Path, name: &str) -> Result<PathBuf, Failure> {
    if name.is_empty() || name.contains('/') || name.contains("..") {
        return Err(Failure::Config(format!(
            "run_name '{name}' must be a plain directory name"
        )));
    }
    let dir = root.join(name);
    std::fs::create_dir_all(&dir)
        .map_err(|e| Failure::Config(format!("creating {}: {e}", dir.display())))?;
    Ok(dir)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Failure::Config(format!("encoding {}: {e}", path.display())))?;
    text.push('\n');
    std::fs::write(path, text)
        .map_err(|e| Failure::Config(format!("writing {}: {e}", path.display())))
}

/// Serializes `rows` to CSV with a header derived from the row type.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), Failure> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Failure::Config(format!("opening {}: {e}", path.display())))?;
    for row in rows {
        w.serialize(row)
            .map_err(|e| Failure::Config(format!("writing {}: {e}", path.display())))?;
    }
    w.flush()
        .map_err(|e| Failure::Config(format!("flushing {}: {e}", path.display())))
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a flat `side × side` grayscale image (values in [0, 1]) as 8-bit PNG.
pub fn write_png(path: &Path, pixels: &[f32], side: usize) -> Result<(), Failure> {
    if pixels.len() != side * side {
        return Err(Failure::Config(format!(
            "png {}: {} pixels vs side {side}",
            path.display(),
            pixels.len()
        )));
    }
    let img = GrayImage::from_fn(side as u32, side as u32, |x, y| {
        Luma([to_u8(pixels[y as usize * side + x as usize])])
    });
    img.save(path)
        .map_err(|e| Failure::Config(format!("writing {}: {e}", path.display())))
}

/// Tiles images into a grid PNG (row-major, `cols` per row) with a 2-pixel
/// separator. Missing tiles (failed runs) come out black.
pub fn write_contact_sheet(
    path: &Path,
    tiles: &[Option<Vec<f32>>],
    side: usize,
    cols: usize,
) -> Result<(), Failure> {
    if tiles.is_empty() || cols == 0 {
        return Err(Failure::Config("contact sheet needs at least one tile".into()));
    }
    let rows = tiles.len().div_ceil(cols);
    let pad = 2usize;
    let width = cols * side + (cols + 1) * pad;
    let height = rows * side + (rows + 1) * pad;
    let mut img = GrayImage::from_pixel(width as u32, height as u32, Luma([255u8]));
    for (i, tile) in tiles.iter().enumerate() {
        let (row, col) = (i / cols, i % cols);
        let x0 = pad + col * (side + pad);
        let y0 = pad + row * (side + pad);
        for y in 0..side {
            for x in 0..side {
                let v = match tile {
                    Some(pixels) => to_u8(pixels[y * side + x]),
                    None => 0u8,
                };
                img.put_pixel((x0 + x) as u32, (y0 + y) as u32, Luma([v]));
            }
        }
    }
    img.save(path)
        .map_err(|e| Failure::Config(format!("writing {}: {e}", path.display())))
}

/// Over-smoothing proxy: the mean magnitude of first-order pixel differences
/// (horizontal and vertical neighbor pairs). Blurrier images score lower.
pub fn sharpness(pixels: &[f32], side: usize) -> f64 {
    if side < 2 || pixels.len() != side * side {
        return 0.0;
    }
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for row in 0..side {
        for col in 0..side {
            let v = pixels[row * side + col] as f64;
            if col + 1 < side {
                sum += (pixels[row * side + col + 1] as f64 - v).abs();
                count += 1;
            }
            if row + 1 < side {
                sum += (pixels[(row + 1) * side + col] as f64 - v).abs();
                count += 1;
            }
        }
    }
    sum / count as f64
}

/// Median of a sample (mean of the middle pair for even lengths).
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of an empty sample");
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("comparable values"));
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}
