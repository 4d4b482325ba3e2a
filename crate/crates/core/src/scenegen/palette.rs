//! The six fill palettes and hue-rotated texture sampling.
//!
//! Built-in palettes are tileable procedural images drawn from fixed seeds,
//! so they are part of the generator version rather than external data.

use std::path::Path;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::TextureSpec;
use crate::error::{Error, Result};
use crate::raster::RgbImage;

pub const PALETTE_COUNT: usize = 6;
pub const PALETTE_SIZE: usize = 128;
pub const PALETTE_NAMES: [&str; PALETTE_COUNT] =
    ["random_dot", "color_splash", "stripes", "checker", "clouds", "cells"];

#[derive(Clone, Debug)]
pub struct Palette {
    pub name: String,
    pub image: RgbImage,
}

#[derive(Clone, Debug)]
pub struct PaletteSet {
    palettes: Vec<Palette>,
}

impl PaletteSet {
    pub fn builtin() -> &'static PaletteSet {
        static BUILTIN: OnceLock<PaletteSet> = OnceLock::new();
        BUILTIN.get_or_init(|| PaletteSet {
            palettes: (0..PALETTE_COUNT).map(builtin_palette).collect(),
        })
    }

    /// Six RGB images, assigned ids in file-name order.
    pub fn load_dir(dir: &Path) -> Result<PaletteSet> {
        let mut files: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        files.sort();
        if files.len() != PALETTE_COUNT {
            return Err(Error::Config(format!(
                "palette directory {} must hold exactly {PALETTE_COUNT} PNGs, found {}",
                dir.display(),
                files.len()
            )));
        }
        let palettes = files
            .into_iter()
            .map(|f| {
                let img = image::open(&f)
                    .map_err(|source| Error::Image { path: f.clone(), source })?
                    .into_rgb8();
                let (w, h) = img.dimensions();
                let name = f.file_stem().and_then(|s| s.to_str()).unwrap_or("palette").to_string();
                Ok(Palette {
                    name,
                    image: RgbImage::from_vec(w as usize, h as usize, img.pixels().map(|p| p.0).collect()),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PaletteSet { palettes })
    }

    pub fn get(&self, id: u8) -> &Palette {
        &self.palettes[id as usize]
    }

    pub fn sampler(&self, texture: &TextureSpec) -> TextureSampler<'_> {
        TextureSampler::new(self.get(texture.palette_id), texture)
    }
}

/// Bilinear, wrap-around sampling of one palette with a fixed hue rotation.
pub struct TextureSampler<'a> {
    image: &'a RgbImage,
    origin: [f64; 2],
    hue: [[f64; 3]; 3],
}

impl<'a> TextureSampler<'a> {
    fn new(palette: &'a Palette, texture: &TextureSpec) -> Self {
        let (s, c) = texture.hue_shift.to_radians().sin_cos();
        let hue = [
            [0.213 + 0.787 * c - 0.213 * s, 0.715 - 0.715 * c - 0.715 * s, 0.072 - 0.072 * c + 0.928 * s],
            [0.213 - 0.213 * c + 0.143 * s, 0.715 + 0.285 * c + 0.140 * s, 0.072 - 0.072 * c - 0.283 * s],
            [0.213 - 0.213 * c - 0.787 * s, 0.715 - 0.715 * c + 0.715 * s, 0.072 + 0.928 * c + 0.072 * s],
        ];
        TextureSampler {
            image: &palette.image,
            origin: texture.sample_origin,
            hue,
        }
    }

    /// Color at texture coordinate `(u, v)` relative to the sample origin.
    pub fn sample(&self, u: f64, v: f64) -> [u8; 3] {
        let (w, h) = (self.image.width() as i64, self.image.height() as i64);
        let x = u + self.origin[0] - 0.5;
        let y = v + self.origin[1] - 0.5;
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let (x0, y0) = (x0 as i64, y0 as i64);
        let px = |xx: i64, yy: i64| self.image.get(xx.rem_euclid(w) as usize, yy.rem_euclid(h) as usize);
        let (a, b, c, d) = (px(x0, y0), px(x0 + 1, y0), px(x0, y0 + 1), px(x0 + 1, y0 + 1));
        let mut rgb = [0.0; 3];
        for ch in 0..3 {
            let top = a[ch] as f64 * (1.0 - fx) + b[ch] as f64 * fx;
            let bottom = c[ch] as f64 * (1.0 - fx) + d[ch] as f64 * fx;
            rgb[ch] = top * (1.0 - fy) + bottom * fy;
        }
        let mut out = [0u8; 3];
        for (o, row) in out.iter_mut().zip(self.hue.iter()) {
            let v = row[0] * rgb[0] + row[1] * rgb[1] + row[2] * rgb[2];
            *o = v.round().clamp(0.0, 255.0) as u8;
        }
        out
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random_range(0.0..255.0), rng.random_range(0.0..255.0), rng.random_range(0.0..255.0)]
}

fn to_rgb(c: [f64; 3]) -> [u8; 3] {
    c.map(|v| v.round().clamp(0.0, 255.0) as u8)
}

/// Shortest displacement on the palette torus.
fn wrap_delta(a: f64, b: f64) -> f64 {
    let n = PALETTE_SIZE as f64;
    let d = (a - b).rem_euclid(n);
    if d > n / 2.0 {
        d - n
    } else {
        d
    }
}

fn builtin_palette(id: usize) -> Palette {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED_0000 + id as u64);
    let n = PALETTE_SIZE;
    let image = match id {
        // i.i.d. per-pixel colors: no medium or large scale structure
        0 => RgbImage::from_fn(n, n, |_, _| to_rgb(random_color(&mut rng))),
        1 => {
            let splashes: Vec<([f64; 2], f64, [f64; 3])> = (0..48)
                .map(|_| {
                    (
                        [rng.random_range(0.0..n as f64), rng.random_range(0.0..n as f64)],
                        rng.random_range(4.0..14.0),
                        random_color(&mut rng),
                    )
                })
                .collect();
            RgbImage::from_fn(n, n, |x, y| {
                let mut acc = [20.0, 20.0, 30.0];
                for (c, r, col) in &splashes {
                    let dx = wrap_delta(x as f64 + 0.5, c[0]);
                    let dy = wrap_delta(y as f64 + 0.5, c[1]);
                    let w = (-(dx * dx + dy * dy) / (2.0 * r * r)).exp();
                    for ch in 0..3 {
                        acc[ch] = acc[ch] * (1.0 - w) + col[ch] * w;
                    }
                }
                to_rgb(acc)
            })
        }
        2 => {
            let colors: Vec<[f64; 3]> = (0..5).map(|_| random_color(&mut rng)).collect();
            let (fx, fy) = (rng.random_range(1..6) as f64, rng.random_range(2..9) as f64);
            let (gx, gy) = (rng.random_range(5..12) as f64, rng.random_range(0..4) as f64);
            RgbImage::from_fn(n, n, |x, y| {
                let (u, v) = (x as f64 / n as f64, y as f64 / n as f64);
                let phase = (fx * u + fy * v).fract() + 0.15 * (std::f64::consts::TAU * (gx * u + gy * v)).sin();
                let idx = ((phase.rem_euclid(1.0)) * colors.len() as f64) as usize % colors.len();
                to_rgb(colors[idx])
            })
        }
        3 => {
            let colors: Vec<[f64; 3]> = (0..3).map(|_| random_color(&mut rng)).collect();
            let line = random_color(&mut rng);
            RgbImage::from_fn(n, n, |x, y| {
                if x % 32 < 2 || y % 32 == 17 {
                    to_rgb(line)
                } else {
                    to_rgb(colors[(x / 8 + y / 8) % 2 + usize::from((x / 32 + y / 32) % 2 == 1)])
                }
            })
        }
        4 => {
            // tileable value noise, three octaves
            let octaves: Vec<(usize, Vec<f64>)> = [4usize, 8, 16]
                .iter()
                .map(|&g| (g, (0..g * g).map(|_| rng.random::<f64>()).collect()))
                .collect();
            let (c0, c1, c2) = (random_color(&mut rng), random_color(&mut rng), random_color(&mut rng));
            RgbImage::from_fn(n, n, |x, y| {
                let mut v = 0.0;
                let mut amp = 0.55;
                for (g, lattice) in &octaves {
                    let fx = x as f64 * *g as f64 / n as f64;
                    let fy = y as f64 * *g as f64 / n as f64;
                    let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
                    let (tx, ty) = (fx.fract(), fy.fract());
                    let (sx, sy) = (tx * tx * (3.0 - 2.0 * tx), ty * ty * (3.0 - 2.0 * ty));
                    let at = |i: usize, j: usize| lattice[(j % g) * g + (i % g)];
                    let top = at(ix, iy) * (1.0 - sx) + at(ix + 1, iy) * sx;
                    let bottom = at(ix, iy + 1) * (1.0 - sx) + at(ix + 1, iy + 1) * sx;
                    v += amp * (top * (1.0 - sy) + bottom * sy);
                    amp *= 0.5;
                }
                let v = (v / 0.9625).clamp(0.0, 1.0);
                let mix = |a: [f64; 3], b: [f64; 3], t: f64| [0, 1, 2].map(|i| a[i] * (1.0 - t) + b[i] * t);
                to_rgb(if v < 0.5 { mix(c0, c1, v * 2.0) } else { mix(c1, c2, v * 2.0 - 1.0) })
            })
        }
        _ => {
            let seeds: Vec<([f64; 2], [f64; 3])> = (0..36)
                .map(|_| {
                    (
                        [rng.random_range(0.0..n as f64), rng.random_range(0.0..n as f64)],
                        random_color(&mut rng),
                    )
                })
                .collect();
            RgbImage::from_fn(n, n, |x, y| {
                let best = seeds
                    .iter()
                    .map(|(c, col)| {
                        let dx = wrap_delta(x as f64 + 0.5, c[0]);
                        let dy = wrap_delta(y as f64 + 0.5, c[1]);
                        (dx * dx + dy * dy, col)
                    })
                    .min_by(|a, b| a.0.total_cmp(&b.0))
                    .unwrap();
                to_rgb(*best.1)
            })
        }
    };
    Palette {
        name: PALETTE_NAMES[id].to_string(),
        image,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_named_palettes() {
        let set = PaletteSet::builtin();
        let names: Vec<_> = (0..PALETTE_COUNT as u8).map(|i| set.get(i).name.clone()).collect();
        assert_eq!(names.len(), 6);
        assert!(names.contains(&"random_dot".to_string()));
        assert!(names.contains(&"color_splash".to_string()));
    }

    #[test]
    fn zero_hue_shift_at_pixel_center_is_identity() {
        let set = PaletteSet::builtin();
        let tex = TextureSpec {
            palette_id: 5,
            sample_origin: [0.0, 0.0],
            hue_shift: 0.0,
        };
        let s = set.sampler(&tex);
        let img = &set.get(5).image;
        for (x, y) in [(0usize, 0usize), (7, 3), (100, 64)] {
            let got = s.sample(x as f64 + 0.5, y as f64 + 0.5);
            let want = img.get(x, y);
            for ch in 0..3 {
                assert!((got[ch] as i32 - want[ch] as i32).abs() <= 1, "{got:?} vs {want:?}");
            }
        }
    }

    #[test]
    fn sampling_wraps() {
        let set = PaletteSet::builtin();
        let tex = TextureSpec {
            palette_id: 4,
            sample_origin: [3.0, 9.0],
            hue_shift: 120.0,
        };
        let s = set.sampler(&tex);
        assert_eq!(s.sample(10.25, 4.5), s.sample(10.25 + PALETTE_SIZE as f64, 4.5 - 2.0 * PALETTE_SIZE as f64));
    }
}
