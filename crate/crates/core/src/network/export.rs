//! Raw activation dumps for offline inspection.

use std::io::Write;
use std::path::{Path, PathBuf};

use super::{Scalar, Tensor};
use crate::datasetio::write_gray_png;
use crate::error::{Error, Result};
use crate::raster::Grid;

/// Writes a little-endian `f32` `.npy` (format 1.0) file.
pub fn write_npy<S: Scalar>(path: &Path, t: &Tensor<S>) -> Result<()> {
    let shape = match t.shape() {
        [n] => format!("({n},)"),
        s => format!("({})", s.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")),
    };
    let mut header = format!("{{'descr': '<f4', 'fortran_order': False, 'shape': {shape}, }}");
    // magic (6) + version (2) + length (2) + header + '\n' must be a multiple of 64
    while (10 + header.len() + 1) % 64 != 0 {
        header.push(' ');
    }
    header.push('\n');
    let mut out = Vec::with_capacity(10 + header.len() + 4 * t.len());
    out.extend_from_slice(b"\x93NUMPY\x01\x00");
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for v in t.data() {
        out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Dumps a `[N, C, H, W]` activation as `<name>.npy` plus one min-max
/// normalized grayscale tile sheet per frame (`<name>_<n>.png`, channels laid
/// out left to right in rows of 8). Returns the written paths.
pub fn export_activation<S: Scalar>(dir: &Path, name: &str, t: &Tensor<S>) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let npy = dir.join(format!("{name}.npy"));
    write_npy(&npy, t)?;
    written.push(npy);
    let s = t.shape();
    if s.len() != 4 {
        return Ok(written);
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let cols = c.min(8);
    let rows = c.div_ceil(8);
    for i in 0..n {
        let slab = t.slab(i);
        let range: Vec<(f64, f64)> = slab
            .chunks(h * w)
            .map(|p| {
                p.iter()
                    .map(|v| v.to_f64_lossy())
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
            })
            .collect();
        let sheet = Grid::from_fn(cols * w, rows * h, |x, y| {
            let ch = (y / h) * 8 + x / w;
            if ch >= c {
                return 0u8;
            }
            let (lo, hi) = range[ch];
            let v = slab[ch * h * w + (y % h) * w + x % w].to_f64_lossy();
            if hi > lo {
                ((v - lo) / (hi - lo) * 255.0).round() as u8
            } else {
                0
            }
        });
        let png = dir.join(format!("{name}_{i}.png"));
        write_gray_png(&png, &sheet)?;
        written.push(png);
    }
    Ok(written)
}
