//! Procedural silhouette families and loading of mask directories.
//!
//! Built-in families are drawn at a fixed native resolution from a handful of
//! randomized primitives, so every draw is a fresh instance of its family.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{GenConfig, ShapeAsset, ShapeSource};
use crate::error::{Error, Result};
use crate::raster::Mask;

const DIGIT_SIZE: usize = 28;
const SHAPE_SIZE: usize = 64;

#[derive(Clone, Debug, Default)]
pub struct ShapeLibrary {
    procedural: Vec<ShapeSource>,
    loaded: Vec<ShapeAsset>,
}

impl ShapeLibrary {
    /// All seven procedural families.
    pub fn builtin() -> Self {
        ShapeLibrary {
            procedural: ShapeSource::ALL.to_vec(),
            loaded: Vec::new(),
        }
    }

    pub fn procedural(sources: &[ShapeSource]) -> Self {
        ShapeLibrary {
            procedural: sources.to_vec(),
            loaded: Vec::new(),
        }
    }

    /// Uses `shape_dir` when configured, the procedural families otherwise.
    pub fn from_config(config: &GenConfig) -> Result<Self> {
        match &config.shape_dir {
            Some(dir) => Self::load_dir(dir),
            None => Ok(Self::procedural(&config.shape_sources)),
        }
    }

    /// Loads `<dir>/<source name>/*.png`; any nonzero pixel is foreground.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut loaded = Vec::new();
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut subdirs: Vec<_> = entries
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_dir())
            .collect();
        subdirs.sort();
        for sub in subdirs {
            let name = sub.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            let source = ShapeSource::from_name(&name)
                .ok_or_else(|| Error::Config(format!("unknown shape family directory {name:?}")))?;
            let mut files: Vec<_> = std::fs::read_dir(&sub)
                .map_err(|e| Error::io(&sub, e))?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
                .collect();
            files.sort();
            for f in files {
                let img = image::open(&f)
                    .map_err(|source| Error::Image { path: f.clone(), source })?
                    .into_luma8();
                let (w, h) = img.dimensions();
                let mask = Mask::from_vec(w as usize, h as usize, img.pixels().map(|p| p.0[0] > 0).collect());
                let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or("shape");
                let asset = ShapeAsset::new(format!("{name}/{stem}"), source, mask)
                    .map_err(|_| Error::InvalidData { path: f.clone(), reason: "mask has no foreground".into() })?;
                loaded.push(asset);
            }
        }
        Ok(ShapeLibrary {
            procedural: Vec::new(),
            loaded,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.procedural.is_empty() && self.loaded.is_empty()
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Result<ShapeAsset> {
        if !self.loaded.is_empty() {
            return Ok(self.loaded[rng.random_range(0..self.loaded.len())].clone());
        }
        if self.procedural.is_empty() {
            return Err(Error::Config("shape library is empty".into()));
        }
        let source = self.procedural[rng.random_range(0..self.procedural.len())];
        Ok(generate(source, rng))
    }
}

/// Draws one instance of a procedural family.
pub fn generate(source: ShapeSource, rng: &mut ChaCha8Rng) -> ShapeAsset {
    loop {
        let instance: u32 = rng.random();
        let (mask, label) = match source {
            ShapeSource::MnistDigit => {
                let d = rng.random_range(0..10usize);
                (digit(d, rng), format!("digit{d}"))
            }
            ShapeSource::Blob => (blob(rng), "blob".into()),
            ShapeSource::Vase => (vase(rng), "vase".into()),
            ShapeSource::Tree => (tree(rng), "tree".into()),
            ShapeSource::Clothes => (clothes(rng), "clothes".into()),
            ShapeSource::Car => (car(rng), "car".into()),
            ShapeSource::Droplet => (droplet(rng), "droplet".into()),
        };
        if let Ok(asset) = ShapeAsset::new(format!("{label}-{instance:08x}"), source, mask) {
            return asset;
        }
    }
}

fn paint(size: usize, inside: impl Fn(f64, f64) -> bool) -> Mask {
    Mask::from_fn(size, size, |x, y| {
        inside((x as f64 + 0.5) / size as f64, (y as f64 + 0.5) / size as f64)
    })
}

fn seg_dist(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a[0] + t * dx - p[0], a[1] + t * dy - p[1]);
    (cx * cx + cy * cy).sqrt()
}

fn in_polygon(p: [f64; 2], poly: &[[f64; 2]]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) && p[0] < (b[0] - a[0]) * (p[1] - a[1]) / (b[1] - a[1]) + a[0] {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn arc(cx: f64, cy: f64, rx: f64, ry: f64, from: f64, to: f64, n: usize) -> Vec<[f64; 2]> {
    (0..=n)
        .map(|i| {
            let a = from + (to - from) * i as f64 / n as f64;
            [cx + rx * a.cos(), cy + ry * a.sin()]
        })
        .collect()
}

/// Stroke skeletons of the ten digits in the unit square, y down.
fn digit_strokes(d: usize) -> Vec<Vec<[f64; 2]>> {
    use std::f64::consts::PI;
    match d {
        0 => vec![arc(0.5, 0.5, 0.22, 0.34, 0.0, 2.0 * PI, 24)],
        1 => vec![vec![[0.38, 0.28], [0.52, 0.16], [0.52, 0.84]]],
        2 => {
            let mut s = arc(0.5, 0.36, 0.2, 0.18, PI, 2.2 * PI, 12);
            s.extend([[0.28, 0.82], [0.74, 0.82]]);
            vec![s]
        }
        3 => vec![
            arc(0.48, 0.33, 0.2, 0.16, -0.8 * PI, 0.5 * PI, 12),
            arc(0.48, 0.66, 0.22, 0.17, -0.5 * PI, 0.8 * PI, 12),
        ],
        4 => vec![vec![[0.62, 0.84], [0.62, 0.16], [0.26, 0.6], [0.76, 0.6]]],
        5 => {
            let mut s = vec![[0.72, 0.18], [0.34, 0.18], [0.32, 0.46]];
            s.extend(arc(0.48, 0.63, 0.22, 0.2, -0.75 * PI, 0.8 * PI, 12));
            vec![s]
        }
        6 => {
            let mut s = vec![[0.66, 0.16], [0.4, 0.4]];
            s.extend(arc(0.5, 0.64, 0.2, 0.19, PI, 3.0 * PI, 20));
            vec![s]
        }
        7 => vec![vec![[0.26, 0.18], [0.74, 0.18], [0.44, 0.84]]],
        8 => vec![
            arc(0.5, 0.32, 0.17, 0.15, 0.0, 2.0 * PI, 18),
            arc(0.5, 0.66, 0.21, 0.18, 0.0, 2.0 * PI, 20),
        ],
        _ => {
            let mut s = arc(0.5, 0.36, 0.2, 0.19, 0.0, 2.0 * PI, 20);
            s.extend([[0.7, 0.36], [0.42, 0.84]]);
            vec![s]
        }
    }
}

/// Handwriting-like digit: jittered skeleton, random slant and stroke width.
fn digit(d: usize, rng: &mut ChaCha8Rng) -> Mask {
    let jitter = Normal::new(0.0, 0.025).unwrap();
    let slant = rng.random_range(-0.25..0.25);
    let thickness = rng.random_range(0.09..0.15);
    let strokes: Vec<Vec<[f64; 2]>> = digit_strokes(d)
        .into_iter()
        .map(|s| {
            s.into_iter()
                .map(|[x, y]| {
                    let x = x + slant * (0.5 - y) + jitter.sample(rng);
                    [x, y + jitter.sample(rng)]
                })
                .collect()
        })
        .collect();
    paint(DIGIT_SIZE, |x, y| {
        strokes
            .iter()
            .any(|s| s.windows(2).any(|w| seg_dist([x, y], w[0], w[1]) <= thickness / 2.0))
    })
}

fn blob(rng: &mut ChaCha8Rng) -> Mask {
    let r0 = rng.random_range(0.26..0.36);
    let harmonics: Vec<(f64, f64, f64)> = (2..=5)
        .map(|k| (k as f64, rng.random_range(-0.16..0.16) / (k as f64 / 2.0), rng.random_range(0.0..6.3)))
        .collect();
    paint(SHAPE_SIZE, |x, y| {
        let (dx, dy) = (x - 0.5, y - 0.5);
        let theta = dy.atan2(dx);
        let r = r0 * (1.0 + harmonics.iter().map(|(k, a, ph)| a * (k * theta + ph).cos()).sum::<f64>());
        (dx * dx + dy * dy).sqrt() < r
    })
}

fn vase(rng: &mut ChaCha8Rng) -> Mask {
    let belly = rng.random_range(0.18..0.32);
    let belly_at = rng.random_range(0.45..0.7);
    let neck = rng.random_range(0.05..0.1);
    let lip = neck + rng.random_range(0.02..0.08);
    let foot = rng.random_range(0.08..0.16);
    paint(SHAPE_SIZE, |x, y| {
        if !(0.08..=0.92).contains(&y) {
            return false;
        }
        let half = if y < 0.14 {
            lip
        } else if y < belly_at {
            let t = (y - 0.14) / (belly_at - 0.14);
            neck + (belly - neck) * (t * std::f64::consts::FRAC_PI_2).sin().powi(2)
        } else {
            let t = (y - belly_at) / (0.92 - belly_at);
            belly + (foot - belly) * t * t
        };
        (x - 0.5).abs() < half
    })
}

fn tree(rng: &mut ChaCha8Rng) -> Mask {
    let trunk = rng.random_range(0.04..0.08);
    let conifer = rng.random_bool(0.4);
    let crown_y = rng.random_range(0.3..0.42);
    let puffs: Vec<([f64; 2], f64)> = (0..rng.random_range(3..6))
        .map(|_| {
            (
                [0.5 + rng.random_range(-0.18..0.18), crown_y + rng.random_range(-0.14..0.14)],
                rng.random_range(0.12..0.2),
            )
        })
        .collect();
    let spread = rng.random_range(0.25..0.4);
    paint(SHAPE_SIZE, |x, y| {
        let in_trunk = (x - 0.5).abs() < trunk && (0.5..0.95).contains(&y);
        let in_crown = if conifer {
            in_polygon([x, y], &[[0.5, 0.05], [0.5 + spread, 0.72], [0.5 - spread, 0.72]])
        } else {
            puffs
                .iter()
                .any(|(c, r)| (x - c[0]).powi(2) + (y - c[1]).powi(2) < r * r)
        };
        in_trunk || in_crown
    })
}

fn clothes(rng: &mut ChaCha8Rng) -> Mask {
    let poly: Vec<[f64; 2]> = if rng.random_bool(0.5) {
        // shirt
        let w = rng.random_range(0.18..0.26);
        let sleeve = rng.random_range(0.12..0.22);
        let top = 0.15;
        let bottom = rng.random_range(0.8..0.92);
        vec![
            [0.5 - 0.07, top],
            [0.5 - w, top + 0.03],
            [0.5 - w - sleeve, top + 0.2],
            [0.5 - w - sleeve + 0.08, top + 0.28],
            [0.5 - w, top + 0.2],
            [0.5 - w, bottom],
            [0.5 + w, bottom],
            [0.5 + w, top + 0.2],
            [0.5 + w + sleeve - 0.08, top + 0.28],
            [0.5 + w + sleeve, top + 0.2],
            [0.5 + w, top + 0.03],
            [0.5 + 0.07, top],
            [0.5, top + 0.06],
        ]
    } else {
        // trousers
        let w = rng.random_range(0.16..0.24);
        let gap = rng.random_range(0.02..0.06);
        let flare = rng.random_range(0.0..0.05);
        vec![
            [0.5 - w, 0.1],
            [0.5 + w, 0.1],
            [0.5 + w + flare, 0.92],
            [0.5 + gap, 0.92],
            [0.5, 0.4],
            [0.5 - gap, 0.92],
            [0.5 - w - flare, 0.92],
        ]
    };
    paint(SHAPE_SIZE, |x, y| in_polygon([x, y], &poly))
}

fn car(rng: &mut ChaCha8Rng) -> Mask {
    let body_top = rng.random_range(0.42..0.5);
    let body_bottom = rng.random_range(0.62..0.68);
    let cabin_top = rng.random_range(0.26..0.34);
    let cabin_l = rng.random_range(0.22..0.34);
    let cabin_r = rng.random_range(0.62..0.76);
    let wheel_r = rng.random_range(0.08..0.11);
    let cabin = [
        [cabin_l - 0.06, body_top],
        [cabin_l + 0.04, cabin_top],
        [cabin_r - 0.06, cabin_top],
        [cabin_r + 0.06, body_top],
    ];
    paint(SHAPE_SIZE, |x, y| {
        let body = (0.06..0.94).contains(&x) && (body_top..body_bottom).contains(&y);
        let wheels = [0.26, 0.74]
            .iter()
            .any(|&wx| (x - wx).powi(2) + (y - body_bottom).powi(2) < wheel_r * wheel_r);
        body || wheels || in_polygon([x, y], &cabin)
    })
}

fn droplet(rng: &mut ChaCha8Rng) -> Mask {
    let r: f64 = rng.random_range(0.2..0.28);
    let cy = rng.random_range(0.6..0.68);
    let tip = rng.random_range(0.06..0.16);
    // tangent points of the tip lines on the circle
    let d = cy - tip;
    let alpha = (r / d).asin();
    let tx = r * alpha.cos();
    let ty = cy - r * alpha.sin();
    let cone = [[0.5, tip], [0.5 + tx, ty], [0.5 - tx, ty]];
    paint(SHAPE_SIZE, |x, y| {
        (x - 0.5).powi(2) + (y - cy).powi(2) < r * r || in_polygon([x, y], &cone)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn every_family_yields_nonempty_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for source in ShapeSource::ALL {
            for _ in 0..20 {
                let a = generate(source, &mut rng);
                assert!(a.mask.count() > 10, "{} too small", a.id);
                assert_eq!(a.source, source);
            }
        }
    }

    #[test]
    fn digits_use_mnist_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = generate(ShapeSource::MnistDigit, &mut rng);
        assert_eq!(a.mask.dims(), (28, 28));
    }

    #[test]
    fn loads_mask_directory() {
        let dir = tempfile::tempdir().unwrap();
        let sub = dir.path().join("blob");
        std::fs::create_dir(&sub).unwrap();
        let img = image::GrayImage::from_fn(8, 8, |x, y| image::Luma([if x > 2 && y > 2 { 255 } else { 0 }]));
        img.save(sub.join("a.png")).unwrap();
        let lib = ShapeLibrary::load_dir(dir.path()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = lib.sample(&mut rng).unwrap();
        assert_eq!(a.source, ShapeSource::Blob);
        assert_eq!(a.mask.count(), 25);
    }

    #[test]
    fn unknown_family_directory_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("spaceship")).unwrap();
        assert!(matches!(ShapeLibrary::load_dir(dir.path()), Err(Error::Config(_))));
    }
}
