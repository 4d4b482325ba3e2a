use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::relative_motion;
use crate::scenegen::{layer_visibility, SceneSpec, VisibilityMap, BACKGROUND};

/// Silhouette pixels of `front_layer` where it occludes `back_layer`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundarySegment {
    pub frame: usize,
    /// Layer index; boundary pixels are visible pixels of this layer.
    pub front_layer: u16,
    /// Layer index or [`BACKGROUND`].
    pub back_layer: u16,
    pub moving: bool,
    /// `(x, y)` in raster order.
    pub pixels: Vec<(u32, u32)>,
}

const NEIGHBORS: [(i64, i64); 4] = [(0, -1), (-1, 0), (1, 0), (0, 1)];

/// Occlusion boundaries at frame `t`, one segment per
/// `(front, back, moving)` combination. A pair whose relative motion varies
/// along the boundary (rotation, scaling) can produce both a moving and a
/// static segment.
pub fn occlusion_boundaries(scene: &SceneSpec, t: usize) -> Vec<BoundarySegment> {
    occlusion_boundaries_from(scene, t, &layer_visibility(scene, t))
}

pub(crate) fn occlusion_boundaries_from(scene: &SceneSpec, t: usize, vis: &VisibilityMap) -> Vec<BoundarySegment> {
    let mut groups: BTreeMap<(u16, u16, bool), Vec<(u32, u32)>> = BTreeMap::new();
    for y in 0..vis.height() {
        for x in 0..vis.width() {
            let front = vis.get(x, y);
            if front == BACKGROUND {
                continue;
            }
            for (dx, dy) in NEIGHBORS {
                let Some(back) = vis.get_signed(x as i64 + dx, y as i64 + dy) else {
                    continue;
                };
                if back == front || !scene.is_in_front(front as usize, back) {
                    continue;
                }
                let moving = relative_motion(scene, front, back, t, x, y);
                let pixels = groups.entry((front, back, moving)).or_default();
                if pixels.last() != Some(&(x as u32, y as u32)) {
                    pixels.push((x as u32, y as u32));
                }
            }
        }
    }
    groups
        .into_iter()
        .map(|((front_layer, back_layer, moving), pixels)| BoundarySegment {
            frame: t,
            front_layer,
            back_layer,
            moving,
            pixels,
        })
        .collect()
}
