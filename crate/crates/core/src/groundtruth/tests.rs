use super::*;
use crate::raster::Grid;
use crate::scenegen::{
    sample_scene, GenConfig, ObjectLayer, ShapeAsset, ShapeLibrary, ShapeSource, TextureSpec, Trajectory,
};

fn tex() -> TextureSpec {
    TextureSpec {
        palette_id: 2,
        sample_origin: [0.0, 0.0],
        hue_shift: 0.0,
    }
}

fn square_layer(side: usize, trajectory: Trajectory, depth: u32) -> ObjectLayer {
    ObjectLayer {
        shape: ShapeAsset::new("sq", ShapeSource::Blob, Mask::new(side, side, true)).unwrap(),
        texture: tex(),
        trajectory,
        depth,
        stickers: vec![],
    }
}

fn scene_with(layers: Vec<ObjectLayer>, frames: usize, size: usize) -> SceneSpec {
    let mut s = SceneSpec::empty(0, frames, size, size, tex());
    s.layers = layers;
    s
}

fn count_class(labels: &LabelMap, class: u8) -> usize {
    labels.data().iter().filter(|&&c| c == class).count()
}

#[test]
fn static_scene_has_no_motion_boundaries() {
    let s = scene_with(
        vec![
            square_layer(10, Trajectory::stationary([20.0, 20.0], 0.0, 1.0, 5), 0),
            square_layer(12, Trajectory::stationary([26.0, 24.0], 0.4, 1.0, 5), 1),
        ],
        5,
        48,
    );
    let mbs = mbs_labels(&s);
    assert!(mbs.labels.iter().all(|l| l.data().iter().all(|&c| c == MBS_NONE)));
    for t in 0..5 {
        let segs = occlusion_boundaries(&s, t);
        assert!(!segs.is_empty());
        assert!(segs.iter().all(|seg| !seg.moving));
    }
}

/// Class 1 inside the square within Chebyshev 3 of its outside, class 2
/// outside within Chebyshev 3 of the square.
#[test]
fn moving_square_has_three_pixel_rings() {
    let s = scene_with(
        vec![square_layer(
            12,
            Trajectory::linear([20.0, 24.0], [1.0, 0.5], 0.0, 0.0, 1.0, 0.0, 6),
            0,
        )],
        6,
        48,
    );
    let mbs = mbs_labels(&s);
    for t in 0..6 {
        let foot = crate::scenegen::layer_mask(&s.layers[0], t, (48, 48), [0, 0]);
        let dist_to = |x: i64, y: i64, want: bool| {
            let mut best = i64::MAX;
            for yy in 0..48i64 {
                for xx in 0..48i64 {
                    if foot.get(xx as usize, yy as usize) == want {
                        best = best.min((xx - x).abs().max((yy - y).abs()));
                    }
                }
            }
            best
        };
        let expected = LabelMap::from_fn(48, 48, |x, y| {
            let inside = foot.get(x, y);
            if inside && dist_to(x as i64, y as i64, false) <= 3 {
                MBS_FOREGROUND
            } else if !inside && dist_to(x as i64, y as i64, true) <= 3 {
                MBS_BACKGROUND
            } else {
                MBS_NONE
            }
        });
        assert_eq!(mbs.labels[t], expected, "frame {t}");
        assert_eq!(count_class(&mbs.labels[t], MBS_BOTH), 0);
    }
}

#[test]
fn equal_velocity_pair_is_not_a_motion_boundary() {
    let v = [1.5, 0.0];
    let s = scene_with(
        vec![
            square_layer(14, Trajectory::linear([14.0, 20.0], v, 0.0, 0.0, 1.0, 0.0, 5), 0),
            square_layer(8, Trajectory::linear([19.25, 22.0], v, 0.0, 0.0, 1.0, 0.0, 5), 1),
        ],
        5,
        48,
    );
    for t in 0..5 {
        let segs = occlusion_boundaries(&s, t);
        for seg in &segs {
            let expect_moving = seg.back_layer == BACKGROUND;
            assert_eq!(seg.moving, expect_moving, "{seg:?}");
        }
        assert!(segs.iter().any(|seg| seg.front_layer == 1 && seg.back_layer == 0));
    }
}

#[test]
fn crossing_boundaries_produce_both_sense_pixels() {
    let s = scene_with(
        vec![
            square_layer(16, Trajectory::linear([16.0, 20.0], [1.0, 0.0], 0.0, 0.0, 1.0, 0.0, 5), 0),
            square_layer(10, Trajectory::linear([26.0, 30.0], [-1.0, -0.5], 0.0, 0.0, 1.0, 0.0, 5), 1),
        ],
        5,
        48,
    );
    let mbs = mbs_labels(&s);
    assert!(mbs.labels.iter().all(|l| count_class(l, MBS_BOTH) > 0));
    assert_eq!(mbs, brute_force_mbs_oracle(&s));
    // every class-3 pixel needs a front sense from one boundary and a back
    // sense from another, so it sits on layer 0 near layer 1's edge
    for t in 0..5 {
        let vis = layer_visibility(&s, t);
        for y in 0..48 {
            for x in 0..48 {
                if mbs.labels[t].get(x, y) == MBS_BOTH {
                    assert_eq!(vis.get(x, y), 0);
                }
            }
        }
    }
}

#[test]
fn rotation_in_place_moves_the_silhouette() {
    let s = scene_with(
        vec![square_layer(
            12,
            Trajectory::linear([24.0, 24.0], [0.0, 0.0], 0.0, 0.1, 1.0, 0.0, 4),
            0,
        )],
        4,
        48,
    );
    let segs = occlusion_boundaries(&s, 1);
    assert!(segs.iter().any(|seg| seg.moving));
    assert_eq!(mbs_labels(&s), brute_force_mbs_oracle(&s));
}

#[test]
fn image_border_is_not_a_boundary() {
    let s = scene_with(
        vec![square_layer(40, Trajectory::linear([24.0, 24.0], [0.5, 0.0], 0.0, 0.0, 2.0, 0.0, 3), 0)],
        3,
        32,
    );
    // layer covers the whole frame: no second surface anywhere
    assert!(occlusion_boundaries(&s, 0).is_empty());
    assert!(mbs_labels(&s).labels.iter().all(|l| count_class(l, MBS_NONE) == 32 * 32));
}

#[test]
fn asp_unoccluded_and_fully_covered_targets() {
    let s = scene_with(
        vec![
            square_layer(6, Trajectory::linear([20.0, 20.0], [1.0, 0.0], 0.0, 0.0, 1.0, 0.0, 4), 0),
            square_layer(20, Trajectory::stationary([22.0, 20.0], 0.0, 1.0, 4), 1),
            square_layer(5, Trajectory::stationary([40.0, 40.0], 0.0, 1.0, 4), 2),
        ],
        4,
        48,
    );
    let hidden = asp_labels(&s, 0).unwrap();
    let free = asp_labels(&s, 2).unwrap();
    for t in 0..4 {
        assert_eq!(count_class(&hidden.labels[t], ASP_VISIBLE), 0);
        assert_eq!(count_class(&hidden.labels[t], ASP_OBSCURED), 36);
        assert_eq!(count_class(&free.labels[t], ASP_VISIBLE), 25);
        assert_eq!(count_class(&free.labels[t], ASP_OBSCURED), 0);
    }
}

#[test]
fn asp_invalid_layer_is_an_error() {
    let s = scene_with(vec![], 3, 16);
    assert!(matches!(asp_labels(&s, 0), Err(Error::InvalidLayer { index: 0, count: 0 })));
}

/// Topmost covering layer by exhaustive per-pixel depth comparison.
fn z_test(scene: &SceneSpec, t: usize) -> VisibilityMap {
    let masks: Vec<Mask> = scene
        .layers
        .iter()
        .map(|l| layer_mask(l, t, scene.size(), scene.shake(t)))
        .collect();
    Grid::from_fn(scene.width, scene.height, |x, y| {
        let mut best: Option<(u32, u16)> = None;
        for (i, (m, l)) in masks.iter().zip(&scene.layers).enumerate() {
            if m.get(x, y) && best.is_none_or(|(d, _)| l.depth > d) {
                best = Some((l.depth, i as u16));
            }
        }
        best.map_or(BACKGROUND, |(_, i)| i)
    })
}

fn random_scenes(n: u64, size: usize) -> Vec<SceneSpec> {
    let lib = ShapeLibrary::builtin();
    let cfg = GenConfig {
        frames: 6,
        height: size,
        width: size,
        layers: [1, 4],
        object_size: [0.3, 0.7],
        speed: [0.5, 2.5],
        shake_prob: 0.5,
        sticker_prob: 0.5,
        rotate_prob: 0.7,
        ..GenConfig::default()
    };
    (0..n).map(|seed| sample_scene(1000 + seed, &cfg, &lib).unwrap()).collect()
}

#[test]
fn stacked_digits_match_z_test() {
    let lib = ShapeLibrary::procedural(&[ShapeSource::MnistDigit]);
    let cfg = GenConfig {
        frames: 4,
        height: 40,
        width: 40,
        layers: [3, 3],
        ..GenConfig::default()
    };
    for seed in 0..5 {
        let s = sample_scene(seed, &cfg, &lib).unwrap();
        for t in 0..4 {
            assert_eq!(layer_visibility(&s, t), z_test(&s, t));
        }
    }
}

#[test]
fn asp_labels_match_z_test_on_random_scenes() {
    for s in random_scenes(8, 40) {
        for target in 0..s.layers.len() {
            let asp = asp_labels(&s, target).unwrap();
            for t in 0..s.frames {
                let z = z_test(&s, t);
                let foot = layer_mask(&s.layers[target], t, s.size(), s.shake(t));
                for y in 0..s.height {
                    for x in 0..s.width {
                        let c = asp.labels[t].get(x, y);
                        assert_eq!(c != ASP_NONE, foot.get(x, y));
                        assert_eq!(c == ASP_VISIBLE, z.get(x, y) == target as u16);
                    }
                }
            }
        }
    }
}

#[test]
fn all_labels_agrees_with_individual_operations() {
    for s in random_scenes(4, 40) {
        let (mbs, asp) = all_labels(&s);
        assert_eq!(mbs, mbs_labels(&s));
        for (i, a) in asp.iter().enumerate() {
            assert_eq!(a, &asp_labels(&s, i).unwrap());
        }
    }
}

#[test]
fn oracle_matches_on_random_scenes() {
    for s in random_scenes(12, 40) {
        assert_eq!(mbs_labels(&s), brute_force_mbs_oracle(&s), "seed {}", s.seed);
    }
}

#[test]
fn empty_scene_oracle_is_zero() {
    let s = scene_with(vec![], 3, 16);
    let o = brute_force_mbs_oracle(&s);
    assert!(o.labels.iter().all(|l| l.data().iter().all(|&c| c == 0)));
}

#[test]
fn band_pixels_are_near_moving_boundaries() {
    for s in random_scenes(6, 40) {
        let mbs = mbs_labels(&s);
        for t in 0..s.frames {
            let seeds: Vec<(u32, u32)> = occlusion_boundaries(&s, t)
                .into_iter()
                .filter(|seg| seg.moving)
                .flat_map(|seg| seg.pixels)
                .collect();
            for y in 0..s.height {
                for x in 0..s.width {
                    if mbs.labels[t].get(x, y) != MBS_NONE {
                        assert!(seeds.iter().any(|&(bx, by)| {
                            (bx as i64 - x as i64).abs().max((by as i64 - y as i64).abs()) <= 3
                        }));
                    }
                }
            }
        }
    }
}

#[test]
fn camera_shake_only_changes_labels_near_the_border() {
    let lib = ShapeLibrary::builtin();
    let cfg = GenConfig {
        frames: 6,
        height: 48,
        width: 48,
        shake_prob: 0.0,
        ..GenConfig::desk()
    };
    for seed in 0..6 {
        let calm = sample_scene(seed, &cfg, &lib).unwrap();
        let mut shaky = calm.clone();
        shaky.camera_shake = vec![[0, 0], [2, -1], [3, 1], [-2, 2], [1, -3], [0, 2]];
        let (a, b) = (mbs_labels(&calm), mbs_labels(&shaky));
        for t in 0..cfg.frames {
            let [dx, dy] = shaky.camera_shake[t];
            let margin = 3 + dx.abs().max(dy.abs()) as i64 + 1;
            for y in margin..48 - margin {
                for x in margin..48 - margin {
                    let src = a.labels[t].get((x - dx as i64) as usize, (y - dy as i64) as usize);
                    assert_eq!(b.labels[t].get(x as usize, y as usize), src, "seed {seed} t {t} ({x},{y})");
                }
            }
        }
    }
}

#[test]
fn blur_never_changes_ground_truth() {
    for s in random_scenes(3, 32) {
        let mut blurred = s.clone();
        blurred.blur_schedule = vec![crate::scenegen::BlurKernel::Box5; s.frames];
        assert_eq!(all_labels(&s), all_labels(&blurred));
    }
}
