use std::collections::BTreeSet;

use objectness::attention::{sample_attention, AttentionConfig};
use objectness::datasetio::{read_gray_png, split_seeds, write_gray_png, SplitCounts};
use objectness::evaluation::{render_overlay, ConfusionMatrix, OverlayStyle, Task};
use objectness::groundtruth::{all_labels, mbs_labels, ASP_OBSCURED, ASP_VISIBLE};
use objectness::network::{build_model, predict_sequence, NetConfig, Tensor};
use objectness::scenegen::{
    layer_mask, layer_visibility, luma_of, render_frames, sample_scene, GenConfig, SceneSpec, ShapeLibrary,
};
use objectness::training::{weighted_cross_entropy, OneCycle};
use objectness::{Grid, LabelMap};
use proptest::prelude::*;

fn small_gen() -> GenConfig {
    GenConfig {
        frames: 6,
        height: 32,
        width: 32,
        layers: [1, 3],
        ..GenConfig::default()
    }
}

fn scene(seed: u64, cfg: &GenConfig) -> SceneSpec {
    sample_scene(seed, cfg, &ShapeLibrary::builtin()).unwrap()
}

fn label_map(w: usize, h: usize, k: u8) -> impl Strategy<Value = LabelMap> {
    prop::collection::vec(0..k, w * h).prop_map(move |v| Grid::from_vec(w, h, v))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn regeneration_is_bit_identical(seed in any::<u64>()) {
        let cfg = small_gen();
        let (a, b) = (scene(seed, &cfg), scene(seed, &cfg));
        prop_assert_eq!(a.to_canonical_json(), b.to_canonical_json());
        prop_assert_eq!(render_frames(&a).unwrap(), render_frames(&b).unwrap());
        for t in 0..a.frames {
            prop_assert_eq!(layer_visibility(&a, t), layer_visibility(&b, t));
        }
    }

    #[test]
    fn stationary_layers_keep_their_mask(seed in any::<u64>()) {
        let cfg = GenConfig { stationary_prob: 1.0, shake_prob: 0.0, ..small_gen() };
        let s = scene(seed, &cfg);
        for l in &s.layers {
            let m0 = layer_mask(l, 0, s.size(), [0, 0]);
            for t in 1..s.frames {
                prop_assert_eq!(&layer_mask(l, t, s.size(), [0, 0]), &m0);
            }
        }
    }

    #[test]
    fn static_scenes_have_no_boundaries(seed in any::<u64>()) {
        let cfg = GenConfig { stationary_prob: 1.0, shake_prob: 0.0, ..small_gen() };
        let s = scene(seed, &cfg);
        for l in mbs_labels(&s).labels {
            prop_assert!(l.data().iter().all(|&c| c == 0));
        }
    }

    #[test]
    fn mbs_pixels_lie_near_a_visibility_edge(seed in any::<u64>()) {
        let s = scene(seed, &small_gen());
        let mbs = mbs_labels(&s);
        for t in 0..s.frames {
            let vis = layer_visibility(&s, t);
            let edge = Grid::from_fn(s.width, s.height, |x, y| {
                let v = vis.get(x, y);
                [(1i64, 0i64), (0, 1), (-1, 0), (0, -1)]
                    .iter()
                    .any(|&(dx, dy)| vis.get_signed(x as i64 + dx, y as i64 + dy).is_some_and(|u| u != v))
            });
            for y in 0..s.height {
                for x in 0..s.width {
                    if mbs.labels[t].get(x, y) == 0 {
                        continue;
                    }
                    let near = (-4i64..=4).any(|dy| {
                        (-4i64..=4).any(|dx| edge.get_signed(x as i64 + dx, y as i64 + dy) == Some(true))
                    });
                    prop_assert!(near, "seed {seed} t {t} ({x},{y}) far from any edge");
                }
            }
        }
    }

    #[test]
    fn asp_classes_partition_the_footprint(seed in any::<u64>()) {
        let s = scene(seed, &small_gen());
        let (_, asp) = all_labels(&s);
        for (k, seq) in asp.iter().enumerate() {
            for t in 0..s.frames {
                let foot = layer_mask(&s.layers[k], t, s.size(), s.shake(t));
                let vis = layer_visibility(&s, t);
                for y in 0..s.height {
                    for x in 0..s.width {
                        let want = match (foot.get(x, y), vis.get(x, y) == k as u16) {
                            (false, _) => 0,
                            (true, true) => ASP_VISIBLE,
                            (true, false) => ASP_OBSCURED,
                        };
                        prop_assert_eq!(seq.labels[t].get(x, y), want);
                    }
                }
            }
        }
    }

    #[test]
    fn attention_is_a_unit_peak_heatmap(seed in any::<u64>(), att_seed in any::<u64>()) {
        let s = scene(seed, &small_gen());
        for k in 0..s.layers.len() {
            let a = sample_attention(&s, k, &AttentionConfig::default(), att_seed).unwrap();
            prop_assert_eq!(a.heat.len(), s.frames);
            for h in &a.heat {
                prop_assert!(h.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
                let peak = h.data().iter().cloned().fold(0.0f32, f32::max);
                prop_assert!(peak == 0.0 || (1.0 - peak) <= 1e-6, "peak {peak}");
            }
        }
    }

    #[test]
    fn attention_ignores_occluders(seed in any::<u64>(), att_seed in any::<u64>()) {
        let s = scene(seed, &GenConfig { layers: [2, 3], ..small_gen() });
        let target = 0;
        let mut alone = s.clone();
        alone.layers.truncate(1);
        let a = sample_attention(&s, target, &AttentionConfig::default(), att_seed).unwrap();
        let b = sample_attention(&alone, target, &AttentionConfig::default(), att_seed).unwrap();
        prop_assert_eq!(a.heat, b.heat);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn luma_matches_bt601(px in prop::collection::vec(any::<[u8; 3]>(), 64)) {
        let img = Grid::from_vec(8, 8, px.clone());
        let l = luma_of(&img);
        for (p, &y) in px.iter().zip(l.data()) {
            let exact = 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64;
            prop_assert!((y as f64 - exact.round()).abs() <= 1.0);
        }
    }

    #[test]
    fn confusion_totals_ignore_scene_order(
        maps in prop::collection::vec((label_map(6, 5, 4), label_map(6, 5, 4)), 1..6),
        rot in 0usize..6,
    ) {
        let mut a = ConfusionMatrix::new(4);
        for (g, p) in &maps {
            a.add_maps(g, p);
        }
        let mut shuffled = maps.clone();
        let r = rot % shuffled.len();
        shuffled.rotate_left(r);
        shuffled.reverse();
        let mut b = ConfusionMatrix::new(4);
        for (g, p) in &shuffled {
            b.add_maps(g, p);
        }
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.total(), (maps.len() * 30) as u64);
        // merging partial matrices is the same reduction
        let (left, right) = maps.split_at(maps.len() / 2);
        let mut l = ConfusionMatrix::new(4);
        let mut rm = ConfusionMatrix::new(4);
        for (g, p) in left { l.add_maps(g, p); }
        for (g, p) in right { rm.add_maps(g, p); }
        prop_assert_eq!(l.merge(&rm), a);
    }

    #[test]
    fn precision_recall_identities(counts in prop::collection::vec(prop::collection::vec(0u64..50, 3), 3)) {
        let m = ConfusionMatrix { counts: counts.clone() };
        let norm = m.normalized();
        for c in 0..3 {
            let row: u64 = counts[c].iter().sum();
            let col: u64 = counts.iter().map(|r| r[c]).sum();
            let tp = counts[c][c] as f64;
            prop_assert_eq!(m.recall(c), (row > 0).then(|| tp / row as f64));
            prop_assert_eq!(m.precision(c), (col > 0).then(|| tp / col as f64));
            let s: f64 = norm[c].iter().sum();
            if row == 0 {
                prop_assert!(norm[c].iter().all(|&v| v == 0.0));
                prop_assert!(m.empty_rows().contains(&c));
            } else {
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn overlay_is_pure_and_leaves_class_zero(
        px in prop::collection::vec(any::<[u8; 3]>(), 20),
        labels in label_map(5, 4, 4),
        alpha in 0.0f64..=1.0,
    ) {
        let frame = Grid::from_vec(5, 4, px);
        let style = OverlayStyle { alpha, task: Task::Mbs };
        let a = render_overlay(&frame, &labels, &style);
        prop_assert_eq!(&a, &render_overlay(&frame, &labels, &style));
        for (i, &c) in labels.data().iter().enumerate() {
            if c == 0 {
                prop_assert_eq!(a.data()[i], frame.data()[i]);
            }
        }
    }

    #[test]
    fn label_png_round_trip(labels in label_map(7, 3, 255)) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.png");
        write_gray_png(&p, &labels).unwrap();
        prop_assert_eq!(read_gray_png(&p).unwrap(), labels);
    }

    #[test]
    fn split_seeds_are_disjoint_and_exact(seed in any::<u64>(), train in 0usize..40, val in 0usize..10, test in 0usize..10) {
        let counts = SplitCounts { train, val, test };
        let s = split_seeds(seed, &counts);
        let mut all = BTreeSet::new();
        let mut n = 0;
        for (split, v) in &s {
            prop_assert_eq!(v.len(), counts.get(*split));
            n += v.len();
            all.extend(v.iter().copied());
        }
        prop_assert_eq!(all.len(), n);
        prop_assert_eq!(n, train + val + test);
    }

    #[test]
    fn loss_is_nonnegative_and_zero_when_perfect(
        logits in prop::collection::vec(-4.0f64..4.0, 4 * 12),
        gt in label_map(4, 3, 4),
    ) {
        let hw = 12;
        let mut probs = logits.clone();
        for px in 0..hw {
            let z: f64 = (0..4).map(|c| logits[c * hw + px].exp()).sum();
            for c in 0..4 {
                probs[c * hw + px] = logits[c * hw + px].exp() / z;
            }
        }
        let pred = Tensor::from_vec(&[4, 3, 4], probs.clone());
        let ones = [1.0; 4];
        let l = weighted_cross_entropy(&pred, &gt, &ones).unwrap();
        prop_assert!(l >= 0.0);
        // unweighted cross entropy, summed here from the definition
        let plain = gt.data().iter().enumerate().map(|(px, &c)| -probs[c as usize * hw + px].ln()).sum::<f64>() / hw as f64;
        prop_assert!((l - plain).abs() <= 1e-12 * plain.max(1.0));
        let onehot: Vec<f64> = (0..4 * hw).map(|i| f64::from(gt.data()[i % hw] as usize == i / hw)).collect();
        let perfect = weighted_cross_entropy(&Tensor::from_vec(&[4, 3, 4], onehot), &gt, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        prop_assert!(perfect.abs() < 1e-12);
    }

    #[test]
    fn one_cycle_rises_then_decays(
        lr_start in 1e-6f64..1e-3,
        ratio in 2.0f64..100.0,
        pct_start in 0.05f64..0.9,
        total_steps in 3usize..400,
    ) {
        let s = OneCycle { lr_start, lr_max: lr_start * ratio, lr_final: lr_start / 1e4, pct_start, total_steps };
        let lrs: Vec<f64> = (0..total_steps).map(|i| s.lr(i)).collect();
        prop_assert!((lrs[0] - lr_start).abs() <= 1e-15);
        prop_assert!((lrs[total_steps - 1] - s.lr_final).abs() <= 1e-15);
        let peak = lrs.iter().cloned().fold(0.0, f64::max);
        let top = lrs.iter().position(|&v| v == peak).unwrap();
        prop_assert!(lrs[..=top].windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(lrs[top..].windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(peak <= s.lr_max * (1.0 + 1e-12));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn temporal_arithmetic_and_spatial_shape(extra in 0usize..4, side in 1usize..4, asp in any::<bool>()) {
        let base = if asp { NetConfig::asp() } else { NetConfig::mbs() };
        let cfg = NetConfig { levels: 2, base_channels: 4, ..base };
        let model = build_model::<f32>(&cfg, 3).unwrap();
        let t = cfg.temporal_window + extra;
        let hw = side * cfg.spatial_multiple();
        let x = Tensor::from_vec(&[t, cfg.in_channels, hw, hw], vec![0.5; t * cfg.in_channels * hw * hw]);
        let y = predict_sequence(&model, &x).unwrap();
        prop_assert_eq!(y.shape(), &[t - 2 * cfg.temporal_convs, cfg.out_classes, hw, hw][..]);
    }
}

