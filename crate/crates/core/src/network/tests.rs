use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::raster::Grid;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn small(mut c: NetConfig) -> NetConfig {
    c.levels = 2;
    c.base_channels = 4;
    c
}

fn channel_sums_are_one(p: &Tensor<f64>) -> bool {
    let s = p.shape();
    let (k, hw) = (s[0], s[1] * s[2]);
    (0..hw).all(|i| ((0..k).map(|c| p.data()[c * hw + i]).sum::<f64>() - 1.0).abs() < 1e-5)
}

#[test]
fn mbs_and_asp_output_shapes() {
    let mbs = build_model::<f64>(&small(NetConfig::mbs()), 1).unwrap();
    let p = forward_window(&mbs, &random(&[5, 3, 16, 16], 2)).unwrap();
    assert_eq!(p.shape(), &[4, 16, 16]);
    assert!(channel_sums_are_one(&p));

    let asp = build_model::<f64>(&small(NetConfig::asp()), 1).unwrap();
    let p = forward_window(&asp, &random(&[7, 5, 8, 24], 3)).unwrap();
    assert_eq!(p.shape(), &[3, 8, 24]);
    assert!(channel_sums_are_one(&p));
}

#[test]
fn four_level_default_keeps_size() {
    let mut c = NetConfig::mbs();
    c.base_channels = 2;
    let m = build_model::<f32>(&c, 0).unwrap();
    let p = forward_window(&m, &random(&[5, 3, 64, 64], 1).cast()).unwrap();
    assert_eq!(p.shape(), &[4, 64, 64]);
}

#[test]
fn same_seed_same_weights() {
    let c = small(NetConfig::mbs());
    assert_eq!(build_model::<f32>(&c, 9).unwrap(), build_model::<f32>(&c, 9).unwrap());
    assert_ne!(build_model::<f32>(&c, 9).unwrap().params(), build_model::<f32>(&c, 10).unwrap().params());
}

#[test]
fn config_validation() {
    let mut c = NetConfig::mbs();
    c.temporal_convs = 3;
    assert!(matches!(build_model::<f32>(&c, 0), Err(Error::Config(_))));
    assert!(NetConfig::asp().validate().is_ok());
}

#[test]
fn temporal_layers_sit_at_shallowest_levels() {
    let m = build_model::<f32>(&NetConfig::asp().desk(), 0).unwrap();
    let shapes: Vec<_> = m
        .param_names()
        .iter()
        .zip(m.params())
        .filter(|(n, _)| n.starts_with("temporal") && n.ends_with("weight"))
        .map(|(_, t)| t.shape()[0])
        .collect();
    assert_eq!(shapes, [8, 16, 32]);
    let two = build_model::<f32>(&small(NetConfig::asp()), 0).unwrap();
    let fwd = two.forward(random(&[7, 5, 8, 8], 0).cast(), 1, false).unwrap();
    // two levels host three convs: one at level 0, two at the bottom
    assert_eq!(fwd.activation("enc0").unwrap().shape()[0], 5);
    assert_eq!(fwd.activation("enc1").unwrap().shape()[0], 1);
}

#[test]
fn shape_errors_name_the_axis() {
    let m = build_model::<f64>(&small(NetConfig::mbs()), 1).unwrap();
    let axis = |r: Result<Tensor<f64>>| match r {
        Err(Error::Shape { axis, .. }) => axis,
        other => panic!("{other:?}"),
    };
    assert_eq!(axis(forward_window(&m, &random(&[4, 3, 16, 16], 0))), "time");
    assert_eq!(axis(forward_window(&m, &random(&[5, 3, 15, 16], 0))), "height");
    assert_eq!(axis(forward_window(&m, &random(&[5, 3, 16, 10 + 1], 0))), "width");
    assert_eq!(axis(forward_window(&m, &random(&[5, 4, 16, 16], 0))), "channel");
}

#[test]
fn zero_input_stays_finite() {
    for norm in [Norm::Instance, Norm::Batch] {
        let mut c = small(NetConfig::mbs());
        c.norm = norm;
        let m = build_model::<f32>(&c, 1).unwrap();
        let p = forward_window(&m, &Tensor::zeros(&[5, 3, 16, 16])).unwrap();
        assert!(p.all_finite());
        let f = m.forward(Tensor::zeros(&[10, 3, 16, 16]), 2, true).unwrap();
        assert!(f.logits().all_finite());
    }
}

#[test]
fn sequence_lengths() {
    let mbs = build_model::<f32>(&small(NetConfig::mbs()), 1).unwrap();
    let asp = build_model::<f32>(&small(NetConfig::asp()), 1).unwrap();
    let frames: Tensor<f32> = random(&[15, 3, 8, 8], 0).cast();
    let m = predict_sequence(&mbs, &frames).unwrap();
    assert_eq!(m.shape(), &[11, 4, 8, 8]);
    let stacked = stack_asp_inputs(&vec![Grid::new(8, 8, 0u8); 11], &m, &vec![Grid::new(8, 8, 0.0f32); 11]).unwrap();
    assert_eq!(stacked.shape(), &[11, 5, 8, 8]);
    assert_eq!(predict_sequence(&asp, &stacked).unwrap().shape(), &[5, 3, 8, 8]);
    assert_eq!(predict_sequence(&mbs, &frames.narrow(0, 5)).unwrap().shape()[0], 1);
    assert!(matches!(
        predict_sequence(&mbs, &frames.narrow(0, 4)),
        Err(Error::InsufficientFrames { needed: 5, found: 4 })
    ));
}

#[test]
fn sequence_output_aligns_with_window_center() {
    let m = build_model::<f64>(&small(NetConfig::mbs()), 4).unwrap();
    let frames = random(&[9, 3, 8, 8], 5);
    let seq = predict_sequence(&m, &frames).unwrap();
    let third = forward_window(&m, &frames.narrow(3, 8)).unwrap();
    assert_eq!(seq.slab(3), third.data());
}

#[test]
fn asp_stack_channel_order() {
    let (t, h, w) = (11, 4, 6);
    let mbs = random(&[t, 4, h, w], 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let luma: Vec<_> = (0..t).map(|_| Grid::from_fn(w, h, |_, _| rng.random::<u8>())).collect();
    let att: Vec<_> = (0..t).map(|_| Grid::from_fn(w, h, |_, _| rng.random::<f32>())).collect();
    let s = stack_asp_inputs(&luma, &mbs, &att).unwrap();
    let hw = h * w;
    for ti in 0..t {
        let f = s.slab(ti);
        assert_eq!(&f[..3 * hw], &mbs.slab(ti)[hw..]);
        for p in 0..hw {
            assert!((f[3 * hw + p] - luma[ti].data()[p] as f64 / 255.0).abs() < 1e-15);
            assert_eq!(f[4 * hw + p], att[ti].data()[p] as f64);
        }
    }
    let zero = stack_asp_inputs(&luma, &mbs, &vec![Grid::new(w, h, 0.0f32); t]).unwrap();
    assert!((0..t).all(|ti| zero.slab(ti)[4 * hw..].iter().all(|&v| v == 0.0)));
    assert!(matches!(stack_asp_inputs(&luma[..10], &mbs, &att), Err(Error::Shape { axis: "time", .. })));
}

/// Rolls every `[.., H, W]` plane by `(dx, dy)`.
fn roll(t: &Tensor<f64>, dx: usize, dy: usize) -> Tensor<f64> {
    let s = t.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let mut out = t.clone();
    for (src, dst) in t.data().chunks(h * w).zip(out.data_mut().chunks_mut(h * w)) {
        for y in 0..h {
            for x in 0..w {
                dst[((y + dy) % h) * w + (x + dx) % w] = src[y * w + x];
            }
        }
    }
    out
}

#[test]
fn translation_covariance_with_periodic_padding() {
    let mut c = NetConfig::mbs();
    c.levels = 3;
    c.base_channels = 4;
    c.norm = Norm::None;
    c.padding = Padding::Periodic;
    let m = build_model::<f64>(&c, 3).unwrap();
    let x = random(&[5, 3, 16, 16], 7);
    let base = m.forward(x.clone(), 1, false).unwrap().into_logits();
    for (dx, dy) in [(4, 0), (0, 8), (12, 4)] {
        let shifted = m.forward(roll(&x, dx, dy), 1, false).unwrap().into_logits();
        let want = roll(&base, dx, dy);
        for (a, b) in shifted.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-10, "shift ({dx},{dy})");
        }
    }
}

/// Loss `sum(r * logits)` so the logits gradient is `r`.
fn check_gradients(config: NetConfig, batch: usize, train: bool) {
    let mut m = build_model::<f64>(&config, 11).unwrap();
    // move off the symmetric initialization so norms and biases all matter
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for p in m.params_mut() {
        for v in p.data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    let x = random(&[batch * config.temporal_window, config.in_channels, 8, 8], 13);
    let fwd = m.forward(x.clone(), batch, train).unwrap();
    let r = random(fwd.logits().shape(), 14);
    let loss = |m: &Model<f64>| -> f64 {
        let l = m.forward(x.clone(), batch, train).unwrap().into_logits();
        l.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
    };
    let grads = m.backward(&fwd, r.clone());
    drop(fwd);
    let mut checked = 0;
    for pi in 0..m.params().len() {
        let len = m.params()[pi].len();
        for j in [0, len / 2, len - 1] {
            let orig = m.params()[pi].data()[j];
            let h = 1e-5;
            m.params_mut()[pi].data_mut()[j] = orig + h;
            let up = loss(&m);
            m.params_mut()[pi].data_mut()[j] = orig - h;
            let down = loss(&m);
            m.params_mut()[pi].data_mut()[j] = orig;
            let num = (up - down) / (2.0 * h);
            let ana = grads[pi].data()[j];
            // biases feeding a norm have an exactly zero gradient; the floor
            // keeps finite-difference noise from dominating those
            assert!((num - ana).abs() <= 1e-4 * num.abs().max(ana.abs()) + 1e-7, "{} [{j}]: analytic {ana}, numeric {num}", m.param_names()[pi]);
            checked += 1;
        }
    }
    assert!(checked > 30);
}

#[test]
fn gradients_instance_norm() {
    check_gradients(small(NetConfig::mbs()), 1, false);
}

#[test]
fn gradients_batch_norm_train_mode() {
    let mut c = small(NetConfig::asp());
    c.norm = Norm::Batch;
    check_gradients(c, 2, true);
}

#[test]
fn gradients_frozen_batch_norm_and_no_norm() {
    let mut c = small(NetConfig::mbs());
    c.norm = Norm::Batch;
    check_gradients(c.clone(), 1, false);
    c.norm = Norm::None;
    c.padding = Padding::Periodic;
    check_gradients(c, 2, false);
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    for norm in [Norm::Instance, Norm::Batch, Norm::None] {
        let mut c = small(NetConfig::asp());
        c.norm = norm;
        let mut m = build_model::<f32>(&c, 5).unwrap();
        m.metadata.epochs = 3;
        m.metadata.dataset_hash = Some("abc".into());
        if norm == Norm::Batch {
            let f = m.forward(random(&[7, 5, 8, 8], 1).cast(), 1, true).unwrap();
            let stats = f.batch_stats();
            drop(f);
            m.update_running_stats(&stats);
        }
        let path = dir.path().join("m.ckpt");
        m.save(&path).unwrap();
        let back = ModelBundle::load(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.weight_hash(), m.weight_hash());
    }
    let path = dir.path().join("junk.ckpt");
    std::fs::write(&path, b"not a model at all").unwrap();
    assert!(matches!(ModelBundle::load(&path), Err(Error::InvalidData { .. })));
    assert!(matches!(ModelBundle::load(&dir.path().join("nope")), Err(Error::MissingArtifact { .. })));
}

#[test]
fn activation_export_writes_npy_and_tiles() {
    let m = build_model::<f32>(&small(NetConfig::mbs()), 1).unwrap();
    let f = m.forward(random(&[5, 3, 8, 8], 0).cast(), 1, false).unwrap();
    assert!(f.activation_names().contains(&"enc0".to_string()));
    let dir = tempfile::tempdir().unwrap();
    let act = f.activation("enc0").unwrap();
    let files = export_activation(dir.path(), "enc0", act).unwrap();
    assert_eq!(files.len(), 1 + act.shape()[0]);
    let bytes = std::fs::read(&files[0]).unwrap();
    assert_eq!(&bytes[..6], b"\x93NUMPY");
    let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    assert_eq!((10 + hlen) % 64, 0);
    assert_eq!(bytes.len(), 10 + hlen + 4 * act.len());
    let first = f32::from_le_bytes(bytes[10 + hlen..14 + hlen].try_into().unwrap());
    assert_eq!(first, act.data()[0]);
}
