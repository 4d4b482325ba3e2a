//! Spatio-temporal attention cues for one target layer.
//!
//! Cues follow the target's rigid motion whether or not it is visible:
//! they are computed from the full footprint geometry, never from the
//! visibility map, so occluders cannot change them.

use std::collections::BTreeSet;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Heatmap;
use crate::scenegen::{unclipped_footprint, SceneSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    Center,
    Constellation,
    Both,
}

impl AttentionMode {
    pub const ALL: [AttentionMode; 3] = [AttentionMode::Center, AttentionMode::Constellation, AttentionMode::Both];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionSequence {
    pub heat: Vec<Heatmap>,
    pub mode: AttentionMode,
    pub target_layer: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    /// Left and right halves.
    Vertical,
    /// Top and bottom halves.
    Horizontal,
    /// Halves on either side of the main diagonal.
    Diagonal,
    /// Halves on either side of the anti-diagonal.
    AntiDiagonal,
    Quadrants,
}

/// Anchor points in the target's centered local frame, one per bounding-box
/// segment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Constellation {
    pub points: Vec<[f64; 2]>,
    pub split: SplitKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JitterConfig {
    /// Standard deviation of per-frame position noise, pixels.
    pub position_sigma: f64,
    /// Gaussian widths are scaled by `1 + U(-scale_jitter, scale_jitter)`.
    pub scale_jitter: f64,
}

impl Default for JitterConfig {
    fn default() -> Self {
        JitterConfig {
            position_sigma: 2.0,
            scale_jitter: 0.2,
        }
    }
}

impl JitterConfig {
    pub fn none() -> Self {
        JitterConfig {
            position_sigma: 0.0,
            scale_jitter: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionConfig {
    /// Relative weights of center, constellation and both.
    pub mode_weights: [f64; 3],
    /// Center gaussian sigma as a fraction of the bounding-box diagonal.
    pub center_sigma_factor: f64,
    pub constellation_sigma: f64,
    /// Inclusive range of constellation sizes.
    pub constellation_points: [usize; 2],
    pub jitter: JitterConfig,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            mode_weights: [1.0, 1.0, 1.0],
            center_sigma_factor: 0.25,
            constellation_sigma: 3.0,
            constellation_points: [2, 4],
            jitter: JitterConfig::default(),
        }
    }
}

impl AttentionConfig {
    /// Always the given mode.
    pub fn pinned(mode: AttentionMode) -> Self {
        let mut weights = [0.0; 3];
        weights[AttentionMode::ALL.iter().position(|&m| m == mode).unwrap()] = 1.0;
        AttentionConfig {
            mode_weights: weights,
            ..AttentionConfig::default()
        }
    }
}

fn check_target(scene: &SceneSpec, target: usize) -> Result<()> {
    if target >= scene.layers.len() {
        return Err(Error::InvalidLayer {
            index: target,
            count: scene.layers.len(),
        });
    }
    Ok(())
}

/// Peak-normalized maximum of isotropic gaussians sampled at pixel centers.
fn render_gaussians(width: usize, height: usize, blobs: &[([f64; 2], f64)]) -> Heatmap {
    let mut heat = Heatmap::from_fn(width, height, |x, y| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        blobs
            .iter()
            .map(|(c, s)| (-((px - c[0]).powi(2) + (py - c[1]).powi(2)) / (2.0 * s * s)).exp())
            .fold(0.0f64, f64::max) as f32
    });
    normalize_peak(&mut heat);
    heat
}

fn normalize_peak(heat: &mut Heatmap) {
    let peak = heat.data().iter().copied().fold(0.0f32, f32::max);
    if peak > 0.0 {
        for v in heat.data_mut() {
            *v = (*v / peak).min(1.0);
        }
    }
}

struct Jitter {
    position: Option<Normal<f64>>,
    scale: f64,
}

impl Jitter {
    fn new(cfg: &JitterConfig) -> Self {
        Jitter {
            position: (cfg.position_sigma > 0.0).then(|| Normal::new(0.0, cfg.position_sigma).unwrap()),
            scale: cfg.scale_jitter,
        }
    }

    fn apply(&self, rng: &mut ChaCha8Rng, center: [f64; 2], sigma: f64) -> ([f64; 2], f64) {
        let center = match &self.position {
            Some(n) => [center[0] + n.sample(rng), center[1] + n.sample(rng)],
            None => center,
        };
        let sigma = if self.scale > 0.0 {
            sigma * (1.0 + rng.random_range(-self.scale..=self.scale))
        } else {
            sigma
        };
        (center, sigma)
    }
}

/// Frame-`t` position of the target's full-footprint centroid, camera shake
/// included.
pub fn target_centroid(scene: &SceneSpec, target: usize, t: usize) -> [f64; 2] {
    let layer = &scene.layers[target];
    let p = layer.trajectory.pose(t).to_world(layer.shape.centroid());
    let s = scene.shake(t);
    [p[0] + s[0] as f64, p[1] + s[1] as f64]
}

fn center_blobs(
    scene: &SceneSpec,
    target: usize,
    sigma_factor: f64,
    jitter: &JitterConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<([f64; 2], f64)> {
    let layer = &scene.layers[target];
    let diag = layer.shape.bbox_diagonal();
    let jit = Jitter::new(jitter);
    (0..scene.frames)
        .map(|t| {
            let sigma = (sigma_factor * diag * layer.trajectory.scale[t]).max(0.5);
            jit.apply(rng, target_centroid(scene, target, t), sigma)
        })
        .collect()
}

/// One scaled gaussian per frame at the target's centroid.
pub fn center_attention(
    scene: &SceneSpec,
    target: usize,
    jitter: &JitterConfig,
    seed: u64,
) -> Result<AttentionSequence> {
    check_target(scene, target)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blobs = center_blobs(scene, target, AttentionConfig::default().center_sigma_factor, jitter, &mut rng);
    Ok(AttentionSequence {
        heat: blobs
            .iter()
            .map(|b| render_gaussians(scene.width, scene.height, std::slice::from_ref(b)))
            .collect(),
        mode: AttentionMode::Center,
        target_layer: target,
    })
}

fn segment_of(split: SplitKind, u: f64, v: f64) -> usize {
    match split {
        SplitKind::Vertical => usize::from(u >= 0.5),
        SplitKind::Horizontal => usize::from(v >= 0.5),
        SplitKind::Diagonal => usize::from(v >= u),
        SplitKind::AntiDiagonal => usize::from(u + v >= 1.0),
        SplitKind::Quadrants => usize::from(u >= 0.5) + 2 * usize::from(v >= 0.5),
    }
}

/// Splits the target's frame-0 bounding box and picks one random footprint
/// pixel per kept segment. `k = 2` uses halves, `k = 4` quadrants and
/// `k = 3` quadrants with one dropped.
pub fn build_constellation(scene: &SceneSpec, target: usize, k: usize, rng: &mut ChaCha8Rng) -> Result<Constellation> {
    check_target(scene, target)?;
    if !(2..=4).contains(&k) {
        return Err(Error::Config(format!("constellations have 2 to 4 points, not {k}")));
    }
    let layer = &scene.layers[target];
    let shake = scene.shake(0);
    let foot = unclipped_footprint(layer, 0, shake);
    if foot.is_empty() {
        return Err(Error::Degenerate("target has an empty bounding box at frame 0".into()));
    }
    let x0 = foot.iter().map(|p| p.0).min().unwrap() as f64;
    let x1 = foot.iter().map(|p| p.0).max().unwrap() as f64 + 1.0;
    let y0 = foot.iter().map(|p| p.1).min().unwrap() as f64;
    let y1 = foot.iter().map(|p| p.1).max().unwrap() as f64 + 1.0;
    let (split, keep): (SplitKind, Vec<usize>) = match k {
        2 => {
            let split = *[
                SplitKind::Vertical,
                SplitKind::Horizontal,
                if rng.random_bool(0.5) { SplitKind::Diagonal } else { SplitKind::AntiDiagonal },
            ]
            .choose(rng)
            .unwrap();
            (split, vec![0, 1])
        }
        3 => {
            let dropped = rng.random_range(0..4);
            (SplitKind::Quadrants, (0..4).filter(|&q| q != dropped).collect())
        }
        _ => (SplitKind::Quadrants, vec![0, 1, 2, 3]),
    };
    let pose = layer.trajectory.pose(0);
    let mut points = Vec::with_capacity(keep.len());
    for seg in keep {
        let members: Vec<&(i64, i64)> = foot
            .iter()
            .filter(|(x, y)| {
                let u = (*x as f64 + 0.5 - x0) / (x1 - x0);
                let v = (*y as f64 + 0.5 - y0) / (y1 - y0);
                segment_of(split, u, v) == seg
            })
            .collect();
        if let Some(&&(x, y)) = members.choose(rng) {
            let world = [x as f64 + 0.5 - shake[0] as f64, y as f64 + 0.5 - shake[1] as f64];
            points.push(pose.to_local(world));
        }
    }
    Ok(Constellation { points, split })
}

/// Frame-`t` positions of constellation anchors, camera shake included.
pub fn constellation_positions(scene: &SceneSpec, target: usize, c: &Constellation, t: usize) -> Vec<[f64; 2]> {
    let pose = scene.layers[target].trajectory.pose(t);
    let s = scene.shake(t);
    c.points
        .iter()
        .map(|&q| {
            let p = pose.to_world(q);
            [p[0] + s[0] as f64, p[1] + s[1] as f64]
        })
        .collect()
}

fn constellation_frames(
    scene: &SceneSpec,
    target: usize,
    c: &Constellation,
    sigma: f64,
    jitter: &JitterConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<Heatmap> {
    let jit = Jitter::new(jitter);
    (0..scene.frames)
        .map(|t| {
            let blobs: Vec<_> = constellation_positions(scene, target, c, t)
                .into_iter()
                .map(|p| jit.apply(rng, p, sigma))
                .collect();
            render_gaussians(scene.width, scene.height, &blobs)
        })
        .collect()
}

/// `k` tight gaussians riding rigidly on the target.
pub fn constellation_attention(
    scene: &SceneSpec,
    target: usize,
    k: usize,
    jitter: &JitterConfig,
    seed: u64,
) -> Result<AttentionSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = build_constellation(scene, target, k, &mut rng)?;
    let sigma = AttentionConfig::default().constellation_sigma;
    Ok(AttentionSequence {
        heat: constellation_frames(scene, target, &c, sigma, jitter, &mut rng),
        mode: AttentionMode::Constellation,
        target_layer: target,
    })
}

/// Draws a mode with probabilities proportional to `weights`.
pub fn sample_attention_mode(seed: u64, weights: [f64; 3]) -> AttentionMode {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    draw_mode(&mut rng, weights)
}

fn draw_mode(rng: &mut ChaCha8Rng, weights: [f64; 3]) -> AttentionMode {
    let total: f64 = weights.iter().sum();
    let mut r = rng.random_range(0.0..total);
    for (mode, w) in AttentionMode::ALL.into_iter().zip(weights) {
        if r < w {
            return mode;
        }
        r -= w;
    }
    AttentionMode::ALL[weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)]
}

/// Samples a mode and builds the corresponding sequence. `Both` adds the
/// center and constellation heatmaps and renormalizes to peak 1.
pub fn sample_attention(scene: &SceneSpec, target: usize, cfg: &AttentionConfig, seed: u64) -> Result<AttentionSequence> {
    check_target(scene, target)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mode = draw_mode(&mut rng, cfg.mode_weights);
    let center = |rng: &mut ChaCha8Rng| -> Vec<Heatmap> {
        center_blobs(scene, target, cfg.center_sigma_factor, &cfg.jitter, rng)
            .iter()
            .map(|b| render_gaussians(scene.width, scene.height, std::slice::from_ref(b)))
            .collect()
    };
    let constellation = |rng: &mut ChaCha8Rng| -> Result<Vec<Heatmap>> {
        let k = rng.random_range(cfg.constellation_points[0]..=cfg.constellation_points[1]);
        let c = build_constellation(scene, target, k, rng)?;
        Ok(constellation_frames(scene, target, &c, cfg.constellation_sigma, &cfg.jitter, rng))
    };
    let heat = match mode {
        AttentionMode::Center => center(&mut rng),
        AttentionMode::Constellation => constellation(&mut rng)?,
        AttentionMode::Both => {
            let a = center(&mut rng);
            let b = constellation(&mut rng)?;
            a.into_iter()
                .zip(b)
                .map(|(mut x, y)| {
                    for (v, w) in x.data_mut().iter_mut().zip(y.data()) {
                        *v += w;
                    }
                    normalize_peak(&mut x);
                    x
                })
                .collect()
        }
    };
    Ok(AttentionSequence {
        heat,
        mode,
        target_layer: target,
    })
}

/// Copy with the listed frames zeroed; indices past the end are ignored.
pub fn attention_dropout(att: &AttentionSequence, frames: &BTreeSet<usize>) -> AttentionSequence {
    let mut out = att.clone();
    for &t in frames {
        if let Some(h) = out.heat.get_mut(t) {
            h.data_mut().fill(0.0);
        }
    }
    out
}

/// Independently drops each frame with probability `p`.
pub fn sample_dropout_frames(frames: usize, p: f64, rng: &mut impl Rng) -> BTreeSet<usize> {
    (0..frames).filter(|_| p > 0.0 && rng.random_bool(p)).collect()
}
