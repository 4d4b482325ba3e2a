//! Per-pixel ground truth derived from scene geometry.
//!
//! Occlusion boundaries are read off the per-frame visibility map: a pixel of
//! layer `F` that 4-borders a pixel whose topmost surface `B` lies behind `F`
//! is a boundary pixel of the pair `(F, B)`. It is a *motion* boundary pixel
//! when `F` and `B` carry the point under that pixel to different places in
//! the next frame (the previous frame for the last one).
//!
//! MBS bands are three pixels wide on each side: the front band is every
//! `F`-visible pixel within Chebyshev distance 2 of a boundary pixel (the
//! boundary pixel itself is the first row of the band) and the back band is
//! every `B`-visible pixel within distance 3. A pixel that collects both
//! senses from any boundaries is class 3.
//!
//! Nothing here looks at rendered pixels, so blur never changes ground truth.

mod boundaries;
mod morph;
pub mod oracle;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{LabelMap, Mask};
use crate::scenegen::{layer_mask, layer_visibility, SceneSpec, Trajectory, VisibilityMap, BACKGROUND};

pub use boundaries::{occlusion_boundaries, BoundarySegment};
pub use morph::dilate;
pub use oracle::brute_force_mbs_oracle;

pub const MBS_NONE: u8 = 0;
pub const MBS_FOREGROUND: u8 = 1;
pub const MBS_BACKGROUND: u8 = 2;
pub const MBS_BOTH: u8 = 3;
pub const MBS_CLASSES: usize = 4;

pub const ASP_NONE: u8 = 0;
pub const ASP_VISIBLE: u8 = 1;
pub const ASP_OBSCURED: u8 = 2;
pub const ASP_CLASSES: usize = 3;

/// Front band reach from a boundary pixel (which is itself on the front side).
pub const FRONT_BAND_RADIUS: usize = 2;
/// Back band reach from a boundary pixel.
pub const BACK_BAND_RADIUS: usize = 3;

/// Relative displacements at or below this many pixels count as no motion.
pub const MOTION_EPSILON: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MbsLabelSequence {
    pub labels: Vec<LabelMap>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AspLabelSequence {
    pub target_layer: usize,
    pub labels: Vec<LabelMap>,
}

/// Where the point under world position `w` at frame `t` moves by the next
/// frame, following `traj`'s rigid motion. The last frame looks back instead.
pub fn point_displacement(traj: &Trajectory, t: usize, w: [f64; 2]) -> [f64; 2] {
    let n = traj.len();
    if n < 2 {
        return [0.0, 0.0];
    }
    let q = traj.pose(t).to_local(w);
    if t + 1 < n {
        let p = traj.pose(t + 1).to_world(q);
        [p[0] - w[0], p[1] - w[1]]
    } else {
        let p = traj.pose(t - 1).to_world(q);
        [w[0] - p[0], w[1] - p[1]]
    }
}

/// Whether surfaces `front` and `back` move apart at frame pixel `(x, y)`.
pub(crate) fn relative_motion(scene: &SceneSpec, front: u16, back: u16, t: usize, x: usize, y: usize) -> bool {
    let shake = scene.shake(t);
    let w = [x as f64 + 0.5 - shake[0] as f64, y as f64 + 0.5 - shake[1] as f64];
    let disp = |layer: u16| {
        if layer == BACKGROUND {
            [0.0, 0.0]
        } else {
            point_displacement(&scene.layers[layer as usize].trajectory, t, w)
        }
    };
    let (a, b) = (disp(front), disp(back));
    (a[0] - b[0]).hypot(a[1] - b[1]) > MOTION_EPSILON
}

/// Visibility plus every layer's footprint for one frame.
pub struct FrameGeometry {
    pub visibility: VisibilityMap,
    pub footprints: Vec<Mask>,
}

impl FrameGeometry {
    pub fn compute(scene: &SceneSpec, t: usize) -> Self {
        let footprints = scene
            .layers
            .iter()
            .map(|l| layer_mask(l, t, scene.size(), scene.shake(t)))
            .collect();
        FrameGeometry {
            visibility: layer_visibility(scene, t),
            footprints,
        }
    }
}

pub(crate) fn mbs_frame(scene: &SceneSpec, t: usize, vis: &VisibilityMap) -> LabelMap {
    let (w, h) = (scene.width, scene.height);
    let mut front = Mask::new(w, h, false);
    let mut back = Mask::new(w, h, false);
    for seg in occlusion_boundaries_from(scene, t, vis).into_iter().filter(|s| s.moving) {
        let seeds: Vec<(usize, usize)> = seg.pixels.iter().map(|&(x, y)| (x as usize, y as usize)).collect();
        morph::dilate_seeds_into(&seeds, FRONT_BAND_RADIUS, vis, seg.front_layer, &mut front);
        morph::dilate_seeds_into(&seeds, BACK_BAND_RADIUS, vis, seg.back_layer, &mut back);
    }
    LabelMap::from_fn(w, h, |x, y| match (front.get(x, y), back.get(x, y)) {
        (true, true) => MBS_BOTH,
        (true, false) => MBS_FOREGROUND,
        (false, true) => MBS_BACKGROUND,
        (false, false) => MBS_NONE,
    })
}

pub(crate) use boundaries::occlusion_boundaries_from;

/// Motion-boundary-sense labels for every frame.
pub fn mbs_labels(scene: &SceneSpec) -> MbsLabelSequence {
    let labels = (0..scene.frames)
        .map(|t| mbs_frame(scene, t, &layer_visibility(scene, t)))
        .collect();
    MbsLabelSequence { labels }
}

pub(crate) fn asp_frame(target: usize, footprint: &Mask, vis: &VisibilityMap) -> LabelMap {
    LabelMap::from_fn(footprint.width(), footprint.height(), |x, y| {
        if !footprint.get(x, y) {
            ASP_NONE
        } else if vis.get(x, y) == target as u16 {
            ASP_VISIBLE
        } else {
            ASP_OBSCURED
        }
    })
}

/// Visible / obscured surface labels of one target layer.
pub fn asp_labels(scene: &SceneSpec, target_layer: usize) -> Result<AspLabelSequence> {
    if target_layer >= scene.layers.len() {
        return Err(Error::InvalidLayer {
            index: target_layer,
            count: scene.layers.len(),
        });
    }
    let layer = &scene.layers[target_layer];
    let labels = (0..scene.frames)
        .map(|t| {
            let foot = layer_mask(layer, t, scene.size(), scene.shake(t));
            asp_frame(target_layer, &foot, &layer_visibility(scene, t))
        })
        .collect();
    Ok(AspLabelSequence { target_layer, labels })
}

/// MBS labels and ASP labels for every layer, sharing per-frame geometry.
pub fn all_labels(scene: &SceneSpec) -> (MbsLabelSequence, Vec<AspLabelSequence>) {
    let mut mbs = Vec::with_capacity(scene.frames);
    let mut asp: Vec<AspLabelSequence> = (0..scene.layers.len())
        .map(|i| AspLabelSequence {
            target_layer: i,
            labels: Vec::with_capacity(scene.frames),
        })
        .collect();
    for t in 0..scene.frames {
        let geom = FrameGeometry::compute(scene, t);
        mbs.push(mbs_frame(scene, t, &geom.visibility));
        for (i, seq) in asp.iter_mut().enumerate() {
            seq.labels.push(asp_frame(i, &geom.footprints[i], &geom.visibility));
        }
    }
    (MbsLabelSequence { labels: mbs }, asp)
}

#[cfg(test)]
mod tests;
