//! Rasterization, compositing, camera shake and blur.
//!
//! Masks use nearest-neighbor inverse mapping: a frame pixel belongs to a
//! layer when its center, mapped back into asset space, lands on a set asset
//! pixel. Textures are sampled bilinearly in the layer's own frame so they
//! move rigidly with it.

use super::palette::TextureSampler;
use super::{BlurKernel, FrameSequence, ObjectLayer, PaletteSet, SceneSpec, ShapeAsset};
use crate::error::Result;
use crate::raster::{Grid, LabelMap, Mask, RgbImage};

/// Visibility sentinel for pixels where only the background shows.
pub const BACKGROUND: u16 = u16::MAX;

/// Per-pixel index of the frontmost covering layer, or [`BACKGROUND`].
pub type VisibilityMap = Grid<u16>;

/// Rigid similarity transform from centered asset coordinates to world.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub position: [f64; 2],
    pub angle: f64,
    pub scale: f64,
    cos: f64,
    sin: f64,
}

impl Pose {
    pub fn new(position: [f64; 2], angle: f64, scale: f64) -> Self {
        Pose {
            position,
            angle,
            scale,
            cos: angle.cos(),
            sin: angle.sin(),
        }
    }

    pub fn to_local(&self, p: [f64; 2]) -> [f64; 2] {
        let dx = p[0] - self.position[0];
        let dy = p[1] - self.position[1];
        [
            (self.cos * dx + self.sin * dy) / self.scale,
            (-self.sin * dx + self.cos * dy) / self.scale,
        ]
    }

    pub fn to_world(&self, q: [f64; 2]) -> [f64; 2] {
        [
            self.position[0] + self.scale * (self.cos * q[0] - self.sin * q[1]),
            self.position[1] + self.scale * (self.sin * q[0] + self.cos * q[1]),
        ]
    }
}

fn asset_hit(asset: &ShapeAsset, q: [f64; 2]) -> bool {
    let ax = q[0] + asset.mask.width() as f64 / 2.0;
    let ay = q[1] + asset.mask.height() as f64 / 2.0;
    if ax < 0.0 || ay < 0.0 {
        return false;
    }
    let (i, j) = (ax.floor() as usize, ay.floor() as usize);
    i < asset.mask.width() && j < asset.mask.height() && asset.mask.get(i, j)
}

/// Conservative frame-pixel bounds of a layer, clipped to `(h, w)`.
fn pixel_bounds(asset: &ShapeAsset, pose: &Pose, offset: [i32; 2], h: usize, w: usize) -> (usize, usize, usize, usize) {
    let hw = asset.mask.width() as f64 / 2.0;
    let hh = asset.mask.height() as f64 / 2.0;
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for q in [[-hw, -hh], [hw, -hh], [-hw, hh], [hw, hh]] {
        let p = pose.to_world(q);
        x0 = x0.min(p[0]);
        x1 = x1.max(p[0]);
        y0 = y0.min(p[1]);
        y1 = y1.max(p[1]);
    }
    let clip = |v: f64, off: i32, hi: usize| (v.floor() + off as f64).clamp(0.0, hi as f64) as usize;
    (
        clip(x0 - 1.0, offset[0], w),
        clip(y0 - 1.0, offset[1], h),
        clip(x1 + 2.0, offset[0], w),
        clip(y1 + 2.0, offset[1], h),
    )
}

/// Visits every in-frame pixel covered by `layer` at frame `t`, handing the
/// callback the pixel and its centered local coordinate.
fn for_each_covered(
    layer: &ObjectLayer,
    t: usize,
    size: (usize, usize),
    offset: [i32; 2],
    mut f: impl FnMut(usize, usize, [f64; 2]),
) {
    let (h, w) = size;
    let pose = layer.trajectory.pose(t);
    let (x0, y0, x1, y1) = pixel_bounds(&layer.shape, &pose, offset, h, w);
    for y in y0..y1 {
        for x in x0..x1 {
            let p = [
                x as f64 + 0.5 - offset[0] as f64,
                y as f64 + 0.5 - offset[1] as f64,
            ];
            let q = pose.to_local(p);
            if asset_hit(&layer.shape, q) {
                f(x, y, q);
            }
        }
    }
}

/// Every frame pixel covered by `layer`, including pixels outside the frame.
pub fn unclipped_footprint(layer: &ObjectLayer, t: usize, offset: [i32; 2]) -> Vec<(i64, i64)> {
    let pose = layer.trajectory.pose(t);
    let hw = layer.shape.mask.width() as f64 / 2.0;
    let hh = layer.shape.mask.height() as f64 / 2.0;
    let corners = [[-hw, -hh], [hw, -hh], [-hw, hh], [hw, hh]].map(|q| pose.to_world(q));
    let lo = |i: usize| corners.iter().map(|c| c[i]).fold(f64::MAX, f64::min).floor() as i64 - 1;
    let hi = |i: usize| corners.iter().map(|c| c[i]).fold(f64::MIN, f64::max).ceil() as i64 + 1;
    let mut out = Vec::new();
    for y in lo(1) + offset[1] as i64..=hi(1) + offset[1] as i64 {
        for x in lo(0) + offset[0] as i64..=hi(0) + offset[0] as i64 {
            let p = [x as f64 + 0.5 - offset[0] as f64, y as f64 + 0.5 - offset[1] as f64];
            if asset_hit(&layer.shape, pose.to_local(p)) {
                out.push((x, y));
            }
        }
    }
    out
}

/// Footprint of `layer` at frame `t` under camera offset `offset`.
pub fn layer_mask(layer: &ObjectLayer, t: usize, size: (usize, usize), offset: [i32; 2]) -> Mask {
    let mut mask = Mask::new(size.1, size.0, false);
    for_each_covered(layer, t, size, offset, |x, y, _| mask.set(x, y, true));
    mask
}

/// Mask and texture of one layer; `color` is black outside `mask`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerRaster {
    pub mask: Mask,
    pub color: RgbImage,
}

struct LayerPainter<'a> {
    host: TextureSampler<'a>,
    stickers: Vec<(TextureSampler<'a>, Pose, &'a ShapeAsset, f64)>,
    tex_scale: f64,
}

impl<'a> LayerPainter<'a> {
    fn new(layer: &'a ObjectLayer, palettes: &'a PaletteSet) -> Self {
        let tex_scale = layer.trajectory.scale[0];
        let stickers = layer
            .stickers
            .iter()
            .map(|s| {
                (
                    palettes.sampler(&s.texture),
                    Pose::new(s.offset, s.angle, s.scale),
                    &s.shape,
                    s.scale * tex_scale,
                )
            })
            .collect();
        LayerPainter {
            host: palettes.sampler(&layer.texture),
            stickers,
            tex_scale,
        }
    }

    fn color(&self, q: [f64; 2]) -> [u8; 3] {
        // later stickers sit on top of earlier ones
        for (sampler, pose, shape, scale) in self.stickers.iter().rev() {
            let qs = pose.to_local(q);
            if asset_hit(shape, qs) {
                return sampler.sample(qs[0] * scale, qs[1] * scale);
            }
        }
        self.host.sample(q[0] * self.tex_scale, q[1] * self.tex_scale)
    }
}

/// Rasterizes one layer without camera shake.
pub fn rasterize_layer(layer: &ObjectLayer, t: usize, size: (usize, usize), palettes: &PaletteSet) -> LayerRaster {
    rasterize_layer_at(layer, t, size, [0, 0], palettes)
}

pub(crate) fn rasterize_layer_at(
    layer: &ObjectLayer,
    t: usize,
    size: (usize, usize),
    offset: [i32; 2],
    palettes: &PaletteSet,
) -> LayerRaster {
    let painter = LayerPainter::new(layer, palettes);
    let mut mask = Mask::new(size.1, size.0, false);
    let mut color = RgbImage::new(size.1, size.0, [0, 0, 0]);
    for_each_covered(layer, t, size, offset, |x, y, q| {
        mask.set(x, y, true);
        color.set(x, y, painter.color(q));
    });
    LayerRaster { mask, color }
}

pub(crate) fn scene_palettes(scene: &SceneSpec) -> Result<std::borrow::Cow<'static, PaletteSet>> {
    Ok(match &scene.palette_dir {
        Some(dir) => std::borrow::Cow::Owned(PaletteSet::load_dir(dir)?),
        None => std::borrow::Cow::Borrowed(PaletteSet::builtin()),
    })
}

/// Composited frame before blur.
pub(crate) fn composite_frame(scene: &SceneSpec, t: usize, palettes: &PaletteSet) -> RgbImage {
    let offset = scene.shake(t);
    let bg = palettes.sampler(&scene.background);
    let mut frame = RgbImage::from_fn(scene.width, scene.height, |x, y| {
        bg.sample(x as f64 + 0.5 - offset[0] as f64, y as f64 + 0.5 - offset[1] as f64)
    });
    for layer in &scene.layers {
        let painter = LayerPainter::new(layer, palettes);
        for_each_covered(layer, t, scene.size(), offset, |x, y, q| frame.set(x, y, painter.color(q)));
    }
    frame
}

/// Renders every frame: background, layers back to front, camera shake,
/// then the frame's blur kernel. Luma is derived from the final RGB.
pub fn render_frames(scene: &SceneSpec) -> Result<FrameSequence> {
    scene.validate()?;
    let palettes = scene_palettes(scene)?;
    let rgb = (0..scene.frames)
        .map(|t| apply_blur(&composite_frame(scene, t, &palettes), scene.blur_schedule[t]))
        .collect();
    Ok(FrameSequence::from_rgb(rgb))
}

/// Topmost layer per pixel at frame `t`, before any blur.
pub fn layer_visibility(scene: &SceneSpec, t: usize) -> VisibilityMap {
    let mut vis = VisibilityMap::new(scene.width, scene.height, BACKGROUND);
    let offset = scene.shake(t);
    for (i, layer) in scene.layers.iter().enumerate() {
        for_each_covered(layer, t, scene.size(), offset, |x, y, _| vis.set(x, y, i as u16));
    }
    vis
}

fn kernel_weights(kernel: BlurKernel) -> Option<(Vec<i32>, i32)> {
    match kernel {
        BlurKernel::None => None,
        BlurKernel::Box3 => Some((vec![1; 3], 3)),
        BlurKernel::Box5 => Some((vec![1; 5], 5)),
        BlurKernel::Gaussian3 => Some((vec![1, 2, 1], 4)),
        BlurKernel::Gaussian5 => Some((vec![1, 4, 6, 4, 1], 16)),
    }
}

/// 2-D convolution with a separable integer kernel, edge-replicated borders
/// and round-half-up on the exact rational result.
pub fn apply_blur(img: &RgbImage, kernel: BlurKernel) -> RgbImage {
    let Some((taps, norm)) = kernel_weights(kernel) else {
        return img.clone();
    };
    let r = (taps.len() / 2) as i64;
    let (w, h) = (img.width() as i64, img.height() as i64);
    let denom = norm * norm;
    RgbImage::from_fn(img.width(), img.height(), |x, y| {
        let mut acc = [0i32; 3];
        for (j, wy) in taps.iter().enumerate() {
            let yy = (y as i64 + j as i64 - r).clamp(0, h - 1) as usize;
            for (i, wx) in taps.iter().enumerate() {
                let xx = (x as i64 + i as i64 - r).clamp(0, w - 1) as usize;
                let p = img.get(xx, yy);
                for ch in 0..3 {
                    acc[ch] += wx * wy * p[ch] as i32;
                }
            }
        }
        acc.map(|a| ((a + denom / 2) / denom) as u8)
    })
}

/// `round(0.299 R + 0.587 G + 0.114 B)`, halves rounded up.
pub fn luma_of(img: &RgbImage) -> LabelMap {
    img.map(|[r, g, b]| ((299 * r as u32 + 587 * g as u32 + 114 * b as u32 + 500) / 1000) as u8)
}
