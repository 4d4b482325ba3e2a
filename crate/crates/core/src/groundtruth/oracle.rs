//! Exhaustive reference for [`super::mbs_labels`].
//!
//! Shares only scene rasterization with the production path. Boundary
//! detection, the motion test and band assignment are re-derived here
//! pixel by pixel, with no dilation or segment grouping.

use super::{MbsLabelSequence, MBS_BACKGROUND, MBS_BOTH, MBS_FOREGROUND, MBS_NONE};
use crate::raster::LabelMap;
use crate::scenegen::{layer_visibility, SceneSpec, Trajectory, BACKGROUND};

const REACH: i64 = 3;
const FRONT_REACH: i64 = 2;
const EPS: f64 = 1e-6;

/// Displacement written as `Δpos + (M − I)(w − pos)` with `M` the
/// frame-to-frame similarity.
fn displacement(traj: &Trajectory, t: usize, w: [f64; 2]) -> [f64; 2] {
    let n = traj.position.len();
    if n < 2 {
        return [0.0, 0.0];
    }
    let (other, sign) = if t + 1 < n { (t + 1, 1.0) } else { (t - 1, -1.0) };
    let ratio = traj.scale[other] / traj.scale[t];
    let dtheta = traj.angle[other] - traj.angle[t];
    let (m00, m01, m10, m11) = (
        ratio * dtheta.cos(),
        -ratio * dtheta.sin(),
        ratio * dtheta.sin(),
        ratio * dtheta.cos(),
    );
    let rx = w[0] - traj.position[t][0];
    let ry = w[1] - traj.position[t][1];
    let dx = traj.position[other][0] - traj.position[t][0] + (m00 - 1.0) * rx + m01 * ry;
    let dy = traj.position[other][1] - traj.position[t][1] + m10 * rx + (m11 - 1.0) * ry;
    [sign * dx, sign * dy]
}

fn behind(scene: &SceneSpec, candidate: u16, front: u16) -> bool {
    candidate == BACKGROUND || scene.layers[candidate as usize].depth < scene.layers[front as usize].depth
}

/// Recomputes MBS labels by scanning, for every pixel, every boundary pixel
/// within Chebyshev distance 3.
pub fn brute_force_mbs_oracle(scene: &SceneSpec) -> MbsLabelSequence {
    let (w, h) = (scene.width as i64, scene.height as i64);
    let mut labels = Vec::with_capacity(scene.frames);
    for t in 0..scene.frames {
        let vis = layer_visibility(scene, t);
        let shake = scene.shake(t);
        let at = |x: i64, y: i64| vis.get(x as usize, y as usize);
        // moving occluded neighbours of each pixel, as (back layer) lists
        let mut moving_backs: Vec<Vec<u16>> = vec![Vec::new(); (w * h) as usize];
        for y in 0..h {
            for x in 0..w {
                let front = at(x, y);
                if front == BACKGROUND {
                    continue;
                }
                let world = [x as f64 + 0.5 - shake[0] as f64, y as f64 + 0.5 - shake[1] as f64];
                let d_front = displacement(&scene.layers[front as usize].trajectory, t, world);
                for (nx, ny) in [(x, y - 1), (x - 1, y), (x + 1, y), (x, y + 1)] {
                    if nx < 0 || ny < 0 || nx >= w || ny >= h {
                        continue;
                    }
                    let back = at(nx, ny);
                    if back == front || !behind(scene, back, front) {
                        continue;
                    }
                    let d_back = if back == BACKGROUND {
                        [0.0, 0.0]
                    } else {
                        displacement(&scene.layers[back as usize].trajectory, t, world)
                    };
                    if (d_front[0] - d_back[0]).hypot(d_front[1] - d_back[1]) > EPS {
                        moving_backs[(y * w + x) as usize].push(back);
                    }
                }
            }
        }
        let frame = LabelMap::from_fn(scene.width, scene.height, |px, py| {
            let (px, py) = (px as i64, py as i64);
            let here = at(px, py);
            let (mut fg, mut bg) = (false, false);
            for by in (py - REACH).max(0)..=(py + REACH).min(h - 1) {
                for bx in (px - REACH).max(0)..=(px + REACH).min(w - 1) {
                    let backs = &moving_backs[(by * w + bx) as usize];
                    if backs.is_empty() {
                        continue;
                    }
                    let front = at(bx, by);
                    let dist = (bx - px).abs().max((by - py).abs());
                    if here == front && dist <= FRONT_REACH {
                        fg = true;
                    }
                    if backs.contains(&here) {
                        bg = true;
                    }
                }
            }
            match (fg, bg) {
                (true, true) => MBS_BOTH,
                (true, false) => MBS_FOREGROUND,
                (false, true) => MBS_BACKGROUND,
                (false, false) => MBS_NONE,
            }
        });
        labels.push(frame);
    }
    MbsLabelSequence { labels }
}
