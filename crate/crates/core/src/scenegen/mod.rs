//! Layered 2-D scene sampling and rasterization.
//!
//! A [`SceneSpec`] fully describes a scene: every random choice is resolved at
//! sampling time, so rendering and ground-truth extraction are pure functions
//! of the scene description. Layers are composited back to front over a textured
//! background; a global integer camera shake moves everything together and a
//! per-frame blur kernel is applied last.

mod palette;
mod render;
mod shapes;

use std::f64::consts::PI;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{LabelMap, Mask, RgbImage};

pub use palette::{Palette, PaletteSet, PALETTE_COUNT, PALETTE_NAMES};
pub use render::{
    apply_blur, layer_mask, layer_visibility, luma_of, rasterize_layer, render_frames,
    unclipped_footprint, LayerRaster, Pose, VisibilityMap, BACKGROUND,
};
pub use shapes::ShapeLibrary;

/// Bumped whenever sampling or rendering changes output for a fixed seed.
pub const GENERATOR_VERSION: &str = "1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeSource {
    MnistDigit,
    Blob,
    Vase,
    Tree,
    Clothes,
    Car,
    Droplet,
}

impl ShapeSource {
    pub const ALL: [ShapeSource; 7] = [
        ShapeSource::MnistDigit,
        ShapeSource::Blob,
        ShapeSource::Vase,
        ShapeSource::Tree,
        ShapeSource::Clothes,
        ShapeSource::Car,
        ShapeSource::Droplet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeSource::MnistDigit => "mnist_digit",
            ShapeSource::Blob => "blob",
            ShapeSource::Vase => "vase",
            ShapeSource::Tree => "tree",
            ShapeSource::Clothes => "clothes",
            ShapeSource::Car => "car",
            ShapeSource::Droplet => "droplet",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.name() == name)
    }
}

/// A silhouette at its native resolution.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeAsset {
    pub id: String,
    pub source: ShapeSource,
    #[serde(with = "packed_mask")]
    pub mask: Mask,
}

impl ShapeAsset {
    pub fn new(id: impl Into<String>, source: ShapeSource, mask: Mask) -> Result<Self> {
        let id = id.into();
        if mask.count() == 0 {
            return Err(Error::Config(format!("shape asset {id} has an empty mask")));
        }
        Ok(ShapeAsset { id, source, mask })
    }

    /// Foreground bounding box in asset pixels, `(x0, y0, x1, y1)` half-open.
    pub fn bbox(&self) -> (usize, usize, usize, usize) {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.mask.height() {
            for x in 0..self.mask.width() {
                if self.mask.get(x, y) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        (x0, y0, x1, y1)
    }

    /// Centroid of the foreground in centered local coordinates.
    pub fn centroid(&self) -> [f64; 2] {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
        for y in 0..self.mask.height() {
            for x in 0..self.mask.width() {
                if self.mask.get(x, y) {
                    sx += x as f64 + 0.5;
                    sy += y as f64 + 0.5;
                    n += 1.0;
                }
            }
        }
        [
            sx / n - self.mask.width() as f64 / 2.0,
            sy / n - self.mask.height() as f64 / 2.0,
        ]
    }

    pub fn bbox_diagonal(&self) -> f64 {
        let (x0, y0, x1, y1) = self.bbox();
        (((x1 - x0) as f64).powi(2) + ((y1 - y0) as f64).powi(2)).sqrt()
    }
}

/// Fill texture: a window into one of the six palettes, hue rotated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextureSpec {
    pub palette_id: u8,
    pub sample_origin: [f64; 2],
    /// Degrees in `[0, 360)`.
    pub hue_shift: f64,
}

/// Per-frame rigid pose of a layer. Positions are sub-pixel centers in
/// camera-free (world) coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub position: Vec<[f64; 2]>,
    pub angle: Vec<f64>,
    pub scale: Vec<f64>,
    pub stationary: bool,
}

impl Trajectory {
    pub fn stationary(position: [f64; 2], angle: f64, scale: f64, frames: usize) -> Self {
        Trajectory {
            position: vec![position; frames],
            angle: vec![angle; frames],
            scale: vec![scale; frames],
            stationary: true,
        }
    }

    /// Constant linear and angular velocity with multiplicative scale drift.
    pub fn linear(
        start: [f64; 2],
        velocity: [f64; 2],
        angle: f64,
        angular_velocity: f64,
        scale: f64,
        scale_drift: f64,
        frames: usize,
    ) -> Self {
        let position = (0..frames)
            .map(|t| [start[0] + velocity[0] * t as f64, start[1] + velocity[1] * t as f64])
            .collect();
        let angle = (0..frames).map(|t| angle + angular_velocity * t as f64).collect();
        let scale = (0..frames).map(|t| scale * (1.0 + scale_drift).powi(t as i32)).collect();
        Trajectory {
            position,
            angle,
            scale,
            stationary: false,
        }
    }

    pub fn len(&self) -> usize {
        self.position.len()
    }

    pub fn is_empty(&self) -> bool {
        self.position.is_empty()
    }

    pub fn pose(&self, t: usize) -> Pose {
        Pose::new(self.position[t], self.angle[t], self.scale[t])
    }
}

/// A secondary shape glued onto its host's texture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sticker {
    pub shape: ShapeAsset,
    pub texture: TextureSpec,
    /// Center in the host's centered local coordinates.
    pub offset: [f64; 2],
    /// Sticker pixels per host asset pixel.
    pub scale: f64,
    pub angle: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectLayer {
    pub shape: ShapeAsset,
    pub texture: TextureSpec,
    pub trajectory: Trajectory,
    /// 0 is the backmost non-background layer; larger is nearer.
    pub depth: u32,
    #[serde(default)]
    pub stickers: Vec<Sticker>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlurKernel {
    None,
    Box3,
    Box5,
    Gaussian3,
    Gaussian5,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlurShape {
    #[default]
    Box,
    Gaussian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub generator_version: String,
    pub seed: u64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub background: TextureSpec,
    /// Sorted by ascending depth.
    pub layers: Vec<ObjectLayer>,
    /// Global per-frame `(dx, dy)` camera offsets.
    pub camera_shake: Vec<[i32; 2]>,
    pub blur_schedule: Vec<BlurKernel>,
    /// Directory of palette PNGs; built-in palettes when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub palette_dir: Option<PathBuf>,
}

impl SceneSpec {
    /// A scene with a background only, no shake and no blur.
    pub fn empty(seed: u64, frames: usize, height: usize, width: usize, background: TextureSpec) -> Self {
        SceneSpec {
            generator_version: GENERATOR_VERSION.to_string(),
            seed,
            frames,
            height,
            width,
            background,
            layers: Vec::new(),
            camera_shake: vec![[0, 0]; frames],
            blur_schedule: vec![BlurKernel::None; frames],
            palette_dir: None,
        }
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn shake(&self, t: usize) -> [i32; 2] {
        self.camera_shake[t]
    }

    /// Checks the structural invariants that rendering relies on.
    pub fn validate(&self) -> Result<()> {
        let t = self.frames;
        if t == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config("scene must have frames and a nonzero size".into()));
        }
        if self.camera_shake.len() != t || self.blur_schedule.len() != t {
            return Err(Error::Config("shake/blur schedules must have one entry per frame".into()));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            let tr = &layer.trajectory;
            if tr.position.len() != t || tr.angle.len() != t || tr.scale.len() != t {
                return Err(Error::Config(format!("layer {i} trajectory length differs from frame count")));
            }
            if tr.scale.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
                return Err(Error::Config(format!("layer {i} has a non-positive scale")));
            }
            if i > 0 && self.layers[i - 1].depth >= layer.depth {
                return Err(Error::Config("layer depths must be unique and ascending".into()));
            }
        }
        Ok(())
    }

    /// Whether layer `a` occludes `b`; the background is behind everything.
    pub fn is_in_front(&self, a: usize, b: u16) -> bool {
        b == BACKGROUND || self.layers[a].depth > self.layers[b as usize].depth
    }

    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene spec serializes")
    }
}

/// Rendered video: RGB plus its luma channel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameSequence {
    pub rgb: Vec<RgbImage>,
    pub luma: Vec<LabelMap>,
}

impl FrameSequence {
    pub fn from_rgb(rgb: Vec<RgbImage>) -> Self {
        let luma = rgb.iter().map(luma_of).collect();
        FrameSequence { rgb, luma }
    }

    pub fn len(&self) -> usize {
        self.rgb.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rgb.is_empty()
    }

    pub fn size(&self) -> (usize, usize) {
        self.rgb.first().map(|f| f.dims()).unwrap_or((0, 0))
    }
}

/// Knobs for [`sample_scene`]. Ranges are inclusive `[min, max]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub layers: [usize; 2],
    /// Palette ids that may be drawn for objects and background.
    pub palettes: Vec<u8>,
    pub palette_dir: Option<PathBuf>,
    pub shape_sources: Vec<ShapeSource>,
    /// Directory with one subdirectory of mask PNGs per shape source.
    pub shape_dir: Option<PathBuf>,
    /// Longest object side as a fraction of the shorter frame side.
    pub object_size: [f64; 2],
    pub stationary_prob: f64,
    /// Pixels per frame.
    pub speed: [f64; 2],
    pub rotate_prob: f64,
    /// Radians per frame.
    pub max_angular_speed: f64,
    pub scale_drift_prob: f64,
    /// Relative scale change per frame.
    pub max_scale_drift: f64,
    pub sticker_prob: f64,
    pub max_stickers: usize,
    pub shake_prob: f64,
    pub shake_step: i32,
    /// Per-frame probability of a blur kernel.
    pub blur_prob: f64,
    pub blur_shape: BlurShape,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            frames: 15,
            height: 256,
            width: 256,
            layers: [2, 6],
            palettes: (0..PALETTE_COUNT as u8).collect(),
            palette_dir: None,
            shape_sources: ShapeSource::ALL.to_vec(),
            shape_dir: None,
            object_size: [0.2, 0.55],
            stationary_prob: 0.3,
            speed: [1.0, 4.0],
            rotate_prob: 0.5,
            max_angular_speed: 0.05,
            scale_drift_prob: 0.3,
            max_scale_drift: 0.01,
            sticker_prob: 0.3,
            max_stickers: 2,
            shake_prob: 0.3,
            shake_step: 3,
            blur_prob: 0.3,
            blur_shape: BlurShape::Box,
        }
    }
}

impl GenConfig {
    /// Small scenes for laptop-scale experiments.
    pub fn desk() -> Self {
        GenConfig {
            height: 64,
            width: 64,
            layers: [1, 4],
            object_size: [0.3, 0.6],
            speed: [0.75, 2.0],
            ..GenConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config("frames, height and width must be positive".into()));
        }
        if self.layers[0] > self.layers[1] {
            return Err(Error::Config("layer range is empty".into()));
        }
        if self.palettes.is_empty() || self.palettes.iter().any(|&p| p as usize >= PALETTE_COUNT) {
            return Err(Error::Config(format!("palettes must be a nonempty subset of 0..{PALETTE_COUNT}")));
        }
        if self.object_size[0] <= 0.0 || self.object_size[0] > self.object_size[1] {
            return Err(Error::Config("object_size range invalid".into()));
        }
        if self.speed[0] < 0.0 || self.speed[0] > self.speed[1] {
            return Err(Error::Config("speed range invalid".into()));
        }
        for p in [
            self.stationary_prob,
            self.rotate_prob,
            self.scale_drift_prob,
            self.sticker_prob,
            self.shake_prob,
            self.blur_prob,
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("probability {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

fn random_texture(rng: &mut ChaCha8Rng, palettes: &[u8]) -> TextureSpec {
    TextureSpec {
        palette_id: palettes[rng.random_range(0..palettes.len())],
        sample_origin: [rng.random_range(0.0..palette::PALETTE_SIZE as f64), rng.random_range(0.0..palette::PALETTE_SIZE as f64)],
        hue_shift: rng.random_range(0.0..360.0),
    }
}

/// Samples a fully resolved scene. Every random choice is drawn from a
/// ChaCha stream seeded by `seed`, so the result is a pure function of
/// `(seed, config, library, GENERATOR_VERSION)`.
pub fn sample_scene(seed: u64, config: &GenConfig, library: &ShapeLibrary) -> Result<SceneSpec> {
    config.validate()?;
    if library.is_empty() {
        return Err(Error::Config("shape library is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = config.frames;
    let (h, w) = (config.height as f64, config.width as f64);
    let short_side = h.min(w);
    let mid = (frames as f64 - 1.0) / 2.0;

    let background = random_texture(&mut rng, &config.palettes);
    let n_layers = rng.random_range(config.layers[0]..=config.layers[1]);
    let mut layers = Vec::with_capacity(n_layers);
    for depth in 0..n_layers {
        let shape = library.sample(&mut rng)?;
        let texture = random_texture(&mut rng, &config.palettes);
        let (bw, bh) = {
            let (x0, y0, x1, y1) = shape.bbox();
            ((x1 - x0) as f64, (y1 - y0) as f64)
        };
        let size = rng.random_range(config.object_size[0]..=config.object_size[1]) * short_side;
        let scale = size / bw.max(bh);
        let angle0 = rng.random_range(0.0..2.0 * PI);
        let center_mid = [rng.random_range(0.1 * w..=0.9 * w), rng.random_range(0.1 * h..=0.9 * h)];
        let stationary = rng.random_bool(config.stationary_prob);
        let trajectory = if stationary {
            Trajectory::stationary(center_mid, angle0, scale, frames)
        } else {
            let speed = rng.random_range(config.speed[0]..=config.speed[1]);
            let heading = rng.random_range(0.0..2.0 * PI);
            let v = [speed * heading.cos(), speed * heading.sin()];
            let omega = if rng.random_bool(config.rotate_prob) {
                rng.random_range(-config.max_angular_speed..=config.max_angular_speed)
            } else {
                0.0
            };
            let drift = if rng.random_bool(config.scale_drift_prob) {
                rng.random_range(-config.max_scale_drift..=config.max_scale_drift)
            } else {
                0.0
            };
            let start = [center_mid[0] - v[0] * mid, center_mid[1] - v[1] * mid];
            Trajectory::linear(start, v, angle0 - omega * mid, omega, scale, drift, frames)
        };
        let mut stickers = Vec::new();
        if config.max_stickers > 0 && rng.random_bool(config.sticker_prob) {
            let n = rng.random_range(1..=config.max_stickers);
            let (x0, y0, x1, y1) = shape.bbox();
            let hw = shape.mask.width() as f64 / 2.0;
            let hh = shape.mask.height() as f64 / 2.0;
            for _ in 0..n {
                let st_shape = library.sample(&mut rng)?;
                let st_texture = random_texture(&mut rng, &config.palettes);
                let (sx0, sy0, sx1, sy1) = st_shape.bbox();
                let st_extent = ((sx1 - sx0).max(sy1 - sy0)) as f64;
                let host_extent = bw.max(bh);
                let st_scale = rng.random_range(0.25..=0.45) * host_extent / st_extent;
                let offset = [
                    rng.random_range(x0 as f64..x1 as f64) - hw,
                    rng.random_range(y0 as f64..y1 as f64) - hh,
                ];
                stickers.push(Sticker {
                    shape: st_shape,
                    texture: st_texture,
                    offset,
                    scale: st_scale,
                    angle: rng.random_range(0.0..2.0 * PI),
                });
            }
        }
        layers.push(ObjectLayer {
            shape,
            texture,
            trajectory,
            depth: depth as u32,
            stickers,
        });
    }

    let mut camera_shake = vec![[0i32, 0i32]; frames];
    if config.shake_step > 0 && rng.random_bool(config.shake_prob) {
        let mut cur = [0i32, 0i32];
        for slot in camera_shake.iter_mut().skip(1) {
            cur[0] += rng.random_range(-config.shake_step..=config.shake_step);
            cur[1] += rng.random_range(-config.shake_step..=config.shake_step);
            *slot = cur;
        }
    }
    let blur_schedule = (0..frames)
        .map(|_| {
            if config.blur_prob > 0.0 && rng.random_bool(config.blur_prob) {
                let big = rng.random_bool(0.5);
                match (config.blur_shape, big) {
                    (BlurShape::Box, false) => BlurKernel::Box3,
                    (BlurShape::Box, true) => BlurKernel::Box5,
                    (BlurShape::Gaussian, false) => BlurKernel::Gaussian3,
                    (BlurShape::Gaussian, true) => BlurKernel::Gaussian5,
                }
            } else {
                BlurKernel::None
            }
        })
        .collect();

    Ok(SceneSpec {
        generator_version: GENERATOR_VERSION.to_string(),
        seed,
        frames,
        height: config.height,
        width: config.width,
        background,
        layers,
        camera_shake,
        blur_schedule,
        palette_dir: config.palette_dir.clone(),
    })
}

mod packed_mask {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::raster::Mask;

    #[derive(Serialize, Deserialize)]
    struct Packed {
        width: usize,
        height: usize,
        bits: String,
    }

    pub fn serialize<S: Serializer>(mask: &Mask, s: S) -> Result<S::Ok, S::Error> {
        let mut bytes = vec![0u8; mask.data().len().div_ceil(8)];
        for (i, &b) in mask.data().iter().enumerate() {
            if b {
                bytes[i / 8] |= 0x80 >> (i % 8);
            }
        }
        Packed {
            width: mask.width(),
            height: mask.height(),
            bits: STANDARD.encode(bytes),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Mask, D::Error> {
        let p = Packed::deserialize(d)?;
        let bytes = STANDARD.decode(p.bits).map_err(serde::de::Error::custom)?;
        let n = p.width * p.height;
        if bytes.len() != n.div_ceil(8) {
            return Err(serde::de::Error::custom("packed mask length mismatch"));
        }
        let data = (0..n).map(|i| bytes[i / 8] & (0x80 >> (i % 8)) != 0).collect();
        Ok(Mask::from_vec(p.width, p.height, data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_scene_has_paper_dimensions() {
        let lib = ShapeLibrary::builtin();
        let s = sample_scene(7, &GenConfig::default(), &lib).unwrap();
        assert_eq!(s.frames, 15);
        assert_eq!((s.height, s.width), (256, 256));
        s.validate().unwrap();
    }

    #[test]
    fn sampling_is_deterministic() {
        let lib = ShapeLibrary::builtin();
        let a = sample_scene(7, &GenConfig::default(), &lib).unwrap();
        let b = sample_scene(7, &GenConfig::default(), &lib).unwrap();
        assert_eq!(a.to_canonical_json(), b.to_canonical_json());
    }

    #[test]
    fn zero_layer_range_gives_background_only() {
        let lib = ShapeLibrary::builtin();
        let cfg = GenConfig {
            layers: [0, 0],
            ..GenConfig::default()
        };
        let s = sample_scene(7, &cfg, &lib).unwrap();
        assert!(s.layers.is_empty());
    }

    #[test]
    fn empty_library_is_a_config_error() {
        let cfg = GenConfig {
            shape_sources: vec![],
            ..GenConfig::default()
        };
        let lib = ShapeLibrary::from_config(&cfg).unwrap();
        let err = sample_scene(1, &cfg, &lib).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn spec_json_round_trips() {
        let lib = ShapeLibrary::builtin();
        let s = sample_scene(11, &GenConfig::desk(), &lib).unwrap();
        let json = s.to_canonical_json();
        let back: SceneSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_canonical_json(), json);
    }

    #[test]
    fn layer_count_within_range() {
        let lib = ShapeLibrary::builtin();
        let cfg = GenConfig {
            layers: [2, 3],
            ..GenConfig::desk()
        };
        for seed in 0..20 {
            let s = sample_scene(seed, &cfg, &lib).unwrap();
            assert!((2..=3).contains(&s.layers.len()));
        }
    }
}
