//! R(2+1)U-Net: per-frame spatial convolutions with interleaved valid
//! temporal convolutions that collapse a fixed window to its center frame.

mod checkpoint;
mod export;
pub(crate) mod ops;
mod tensor;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::groundtruth::{ASP_CLASSES, MBS_CLASSES};
use crate::scenegen::FrameSequence;
use ops::{Tape, Var};

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use export::{export_activation, write_npy};
pub use tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    Instance,
    Batch,
    /// No normalization; used for exact equivariance checks.
    None,
}

impl Norm {
    pub fn from_name(s: &str) -> Option<Norm> {
        match s {
            "instance" => Some(Norm::Instance),
            "batch" => Some(Norm::Batch),
            "none" => Some(Norm::None),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Zero,
    /// Wrap-around borders, also used by the upsampler.
    Periodic,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub levels: usize,
    /// Channels at the first level; doubled at each deeper level.
    pub base_channels: usize,
    pub temporal_window: usize,
    pub temporal_convs: usize,
    pub norm: Norm,
    #[serde(default = "default_padding")]
    pub padding: Padding,
    pub in_channels: usize,
    pub out_classes: usize,
}

fn default_padding() -> Padding {
    Padding::Zero
}

impl NetConfig {
    /// 4 levels, 32 base channels, window 5, RGB in, 4 classes out.
    pub fn mbs() -> Self {
        NetConfig {
            levels: 4,
            base_channels: 32,
            temporal_window: 5,
            temporal_convs: 2,
            norm: Norm::Instance,
            padding: Padding::Zero,
            in_channels: 3,
            out_classes: MBS_CLASSES,
        }
    }

    /// 4 levels, 32 base channels, window 7, five stacked channels in, 3 classes out.
    pub fn asp() -> Self {
        NetConfig {
            temporal_window: 7,
            temporal_convs: 3,
            in_channels: ASP_INPUT_CHANNELS,
            out_classes: ASP_CLASSES,
            ..NetConfig::mbs()
        }
    }

    /// Same family at a size that trains in minutes on one core.
    pub fn desk(mut self) -> Self {
        self.levels = 3;
        self.base_channels = 8;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.base_channels == 0 || self.in_channels == 0 || self.out_classes < 2 {
            return Err(Error::Config("levels, channels and classes must be positive (classes >= 2)".into()));
        }
        if self.temporal_window != 2 * self.temporal_convs + 1 {
            return Err(Error::Config(format!(
                "temporal window {} needs {} temporal convolutions, config has {}",
                self.temporal_window,
                (self.temporal_window.saturating_sub(1)) / 2,
                self.temporal_convs
            )));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Input height and width must be multiples of this.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }

    /// Encoder level hosting temporal convolution `j`: shallowest first, any
    /// surplus at the deepest level.
    pub fn temporal_level(&self, j: usize) -> usize {
        j.min(self.levels - 1)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub seed: u64,
    pub epochs: usize,
    pub steps: usize,
    #[serde(default)]
    pub dataset_hash: Option<String>,
    #[serde(default)]
    pub note: Option<String>,
}

/// Network weights plus everything needed to rebuild the graph.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<S: Scalar> {
    pub config: NetConfig,
    pub metadata: ModelMetadata,
    names: Vec<String>,
    params: Vec<Tensor<S>>,
    /// Batch-norm running statistics, keyed by the index of their gamma.
    running: Vec<(usize, Tensor<S>, Tensor<S>)>,
    layout: Layout,
}

/// The stored, single-precision model.
pub type ModelBundle = Model<f32>;

/// Parameter indices of one normalization layer.
#[derive(Clone, Copy, Debug, PartialEq)]
struct NormIx {
    gamma: usize,
    beta: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct ConvIx {
    w: usize,
    b: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct ResIx {
    c1: ConvIx,
    n1: Option<NormIx>,
    c2: ConvIx,
    n2: Option<NormIx>,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    enc: Vec<ResIx>,
    temporal: Vec<(ConvIx, Option<NormIx>)>,
    up: Vec<(ConvIx, ResIx)>,
    head: ConvIx,
}

struct Builder<'a, S: Scalar> {
    names: Vec<String>,
    params: Vec<Tensor<S>>,
    rng: &'a mut ChaCha8Rng,
    norm: Norm,
}

impl<S: Scalar> Builder<'_, S> {
    fn add(&mut self, name: String, t: Tensor<S>) -> usize {
        self.names.push(name);
        self.params.push(t);
        self.params.len() - 1
    }

    /// He-normal weights, zero bias.
    fn conv(&mut self, name: &str, shape: &[usize]) -> ConvIx {
        let fan_in: usize = shape[1..].iter().product();
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
        let n = shape.iter().product();
        let data = (0..n).map(|_| S::from_f64_lossy(normal.sample(self.rng))).collect();
        let w = self.add(format!("{name}.weight"), Tensor::from_vec(shape, data));
        let b = self.add(format!("{name}.bias"), Tensor::zeros(&[shape[0]]));
        ConvIx { w, b }
    }

    fn norm(&mut self, name: &str, c: usize) -> Option<NormIx> {
        if self.norm == Norm::None {
            return None;
        }
        let gamma = self.add(format!("{name}.gamma"), Tensor::full(&[c], S::one()));
        let beta = self.add(format!("{name}.beta"), Tensor::zeros(&[c]));
        Some(NormIx { gamma, beta })
    }

    fn res(&mut self, name: &str, cin: usize, c: usize) -> ResIx {
        ResIx {
            c1: self.conv(&format!("{name}.conv1"), &[c, cin, 3, 3]),
            n1: self.norm(&format!("{name}.norm1"), c),
            c2: self.conv(&format!("{name}.conv2"), &[c, c, 3, 3]),
            n2: self.norm(&format!("{name}.norm2"), c),
        }
    }
}

fn layout<S: Scalar>(config: &NetConfig, rng: &mut ChaCha8Rng) -> (Layout, Vec<String>, Vec<Tensor<S>>) {
    let mut b = Builder {
        names: Vec::new(),
        params: Vec::new(),
        rng,
        norm: config.norm,
    };
    let mut enc = Vec::new();
    let mut temporal = Vec::new();
    let mut cin = config.in_channels;
    for level in 0..config.levels {
        let c = config.channels(level);
        enc.push(b.res(&format!("enc{level}"), cin, c));
        for j in (0..config.temporal_convs).filter(|&j| config.temporal_level(j) == level) {
            temporal.push((b.conv(&format!("temporal{j}"), &[c, c, 3]), b.norm(&format!("temporal{j}.norm"), c)));
        }
        cin = c;
    }
    let mut up = Vec::new();
    for level in (0..config.levels - 1).rev() {
        let c = config.channels(level);
        let proj = b.conv(&format!("up{level}.proj"), &[c, config.channels(level + 1), 1, 1]);
        let res = b.res(&format!("up{level}"), 2 * c, c);
        up.push((proj, res));
    }
    let head = b.conv("head", &[config.out_classes, config.base_channels, 1, 1]);
    (
        Layout {
            enc,
            temporal,
            up,
            head,
        },
        b.names,
        b.params,
    )
}

/// Builds a freshly initialized model; identical seeds give identical weights.
pub fn build_model<S: Scalar>(config: &NetConfig, seed: u64) -> Result<Model<S>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (layout, names, params) = layout::<S>(config, &mut rng);
    let running = if config.norm == Norm::Batch {
        names
            .iter()
            .enumerate()
            .filter(|(_, n)| n.ends_with(".gamma"))
            .map(|(i, _)| {
                let c = params[i].len();
                (i, Tensor::zeros(&[c]), Tensor::full(&[c], S::one()))
            })
            .collect()
    } else {
        Vec::new()
    };
    Ok(Model {
        config: config.clone(),
        metadata: ModelMetadata {
            seed,
            ..ModelMetadata::default()
        },
        names,
        params,
        running,
        layout,
    })
}

/// Momentum of batch-norm running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

/// Result of a recorded forward pass, ready for [`Model::backward`].
pub struct Forward<'m, S: Scalar> {
    tape: Tape<'m, S>,
    logits: Var,
}

impl<S: Scalar> Forward<'_, S> {
    /// `[B, K, H, W]` pre-softmax scores.
    pub fn logits(&self) -> &Tensor<S> {
        self.tape.value(self.logits)
    }

    pub fn into_logits(self) -> Tensor<S> {
        self.tape.into_value(self.logits)
    }

    /// Names of every captured intermediate output.
    pub fn activation_names(&self) -> Vec<String> {
        self.tape.names.keys().cloned().collect()
    }

    pub fn activation(&self, name: &str) -> Option<&Tensor<S>> {
        self.tape.names.get(name).map(|&v| self.tape.value(v))
    }
}

impl<S: Scalar> Model<S> {
    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<S>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// `(gamma index, running mean, running var)` for each batch norm.
    pub fn running_stats(&self) -> &[(usize, Tensor<S>, Tensor<S>)] {
        &self.running
    }

    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model {
            config: self.config.clone(),
            metadata: self.metadata.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            running: self.running.iter().map(|(i, m, v)| (*i, m.cast(), v.cast())).collect(),
            layout: self.layout.clone(),
        }
    }

    pub(crate) fn from_parts(
        config: NetConfig,
        metadata: ModelMetadata,
        named: Vec<(String, Tensor<S>)>,
        running: Vec<(String, Tensor<S>, Tensor<S>)>,
    ) -> Result<Self> {
        let fresh = build_model::<S>(&config, 0)?;
        if named.len() != fresh.names.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, config implies {}",
                named.len(),
                fresh.names.len()
            )));
        }
        let mut params = Vec::with_capacity(named.len());
        for ((name, t), (want, proto)) in named.into_iter().zip(fresh.names.iter().zip(&fresh.params)) {
            if &name != want || t.shape() != proto.shape() {
                return Err(Error::Config(format!(
                    "tensor {name} {:?} does not match expected {want} {:?}",
                    t.shape(),
                    proto.shape()
                )));
            }
            params.push(t);
        }
        let mut stats = Vec::new();
        for (name, m, v) in running {
            let i = fresh
                .names
                .iter()
                .position(|n| *n == name)
                .ok_or_else(|| Error::Config(format!("running statistics for unknown layer {name}")))?;
            stats.push((i, m, v));
        }
        if stats.len() != fresh.running.len() {
            return Err(Error::Config("running statistics missing for some batch-norm layers".into()));
        }
        Ok(Model {
            config,
            metadata,
            names: fresh.names,
            params,
            running: stats,
            layout: fresh.layout,
        })
    }

    /// SHA-256 over parameter and running-statistic bytes.
    pub fn weight_hash(&self) -> String {
        let mut h = Sha256::new();
        let all = self.params.iter().chain(self.running.iter().flat_map(|(_, m, v)| [m, v]));
        for t in all {
            for v in t.data() {
                h.update(v.to_f64_lossy().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    fn check_input(&self, input: &Tensor<S>, batch: usize) -> Result<()> {
        let c = &self.config;
        let s = input.shape();
        if s.len() != 4 {
            return Err(Error::shape("rank", 4, s.len()));
        }
        if batch == 0 || s[0] != batch * c.temporal_window {
            return Err(Error::shape("time", batch * c.temporal_window, s[0]));
        }
        if s[1] != c.in_channels {
            return Err(Error::shape("channel", c.in_channels, s[1]));
        }
        let m = c.spatial_multiple();
        if s[2] == 0 || s[2] % m != 0 {
            return Err(Error::shape("height", format!("a positive multiple of {m}"), s[2]));
        }
        if s[3] == 0 || s[3] % m != 0 {
            return Err(Error::shape("width", format!("a positive multiple of {m}"), s[3]));
        }
        Ok(())
    }

    /// Records a forward pass over `batch` windows stacked as
    /// `[batch * window, C, H, W]`. `train` selects batch statistics for
    /// batch norm.
    pub fn forward(&self, input: Tensor<S>, batch: usize, train: bool) -> Result<Forward<'_, S>> {
        self.check_input(&input, batch)?;
        let cfg = &self.config;
        let periodic = cfg.padding == Padding::Periodic;
        let lay = &self.layout;
        let mut tape = Tape::new(&self.params);
        let norm = |tape: &mut Tape<'_, S>, x: Var, n: Option<NormIx>| -> Var {
            match (n, cfg.norm) {
                (None, _) | (_, Norm::None) => x,
                (Some(n), Norm::Instance) => tape.norm(x, n.gamma, n.beta, true),
                (Some(n), Norm::Batch) if train => tape.norm(x, n.gamma, n.beta, false),
                (Some(n), Norm::Batch) => {
                    let (_, m, v) = self.running.iter().find(|(g, _, _)| *g == n.gamma).expect("running stats");
                    tape.frozen_norm(x, n.gamma, n.beta, m.data(), v.data())
                }
            }
        };
        let res = |tape: &mut Tape<'_, S>, x: Var, r: &ResIx| -> Var {
            let a = tape.conv(x, r.c1.w, r.c1.b, 3, cfg.padding);
            let a = norm(tape, a, r.n1);
            let h1 = tape.relu(a);
            let b = tape.conv(h1, r.c2.w, r.c2.b, 3, cfg.padding);
            let h2 = norm(tape, b, r.n2);
            let s = tape.add(h1, h2);
            tape.relu(s)
        };

        let mut x = tape.input(input);
        tape.name(x, "input");
        let mut frames = cfg.temporal_window;
        let mut skips = Vec::new();
        let mut temporal = lay.temporal.iter();
        for level in 0..cfg.levels {
            if level > 0 {
                x = tape.maxpool(x);
            }
            x = res(&mut tape, x, &lay.enc[level]);
            tape.name(x, format!("enc{level}.spatial"));
            for _ in (0..cfg.temporal_convs).filter(|&j| cfg.temporal_level(j) == level) {
                let (c, n) = temporal.next().expect("temporal layer");
                x = tape.temporal(x, c.w, c.b, frames);
                frames -= 2;
                x = norm(&mut tape, x, *n);
                x = tape.relu(x);
            }
            tape.name(x, format!("enc{level}"));
            skips.push(tape.center(x, frames));
        }
        debug_assert_eq!(frames, 1);
        let mut d = skips.pop().expect("at least one level");
        for (i, (proj, r)) in lay.up.iter().enumerate() {
            let level = cfg.levels - 2 - i;
            let u = tape.upsample(d, periodic);
            let u = tape.conv(u, proj.w, proj.b, 1, cfg.padding);
            let cat = tape.concat(u, skips[level]);
            d = res(&mut tape, cat, r);
            tape.name(d, format!("up{level}"));
        }
        let logits = tape.conv(d, lay.head.w, lay.head.b, 1, cfg.padding);
        tape.name(logits, "logits");
        Ok(Forward { tape, logits })
    }

    /// Parameter gradients for `dlogits`, the loss gradient w.r.t. the logits.
    pub fn backward(&self, fwd: &Forward<'_, S>, dlogits: Tensor<S>) -> Vec<Tensor<S>> {
        fwd.tape.backward(fwd.logits, dlogits)
    }

    /// Folds the batch statistics seen in `fwd` into the running estimates.
    pub fn update_running_stats(&mut self, stats: &[(usize, Vec<S>, Vec<S>)]) {
        let mom = S::from_f64_lossy(BN_MOMENTUM);
        for (gamma, mean, var) in stats {
            if let Some((_, m, v)) = self.running.iter_mut().find(|(g, _, _)| g == gamma) {
                for (r, &b) in m.data_mut().iter_mut().zip(mean) {
                    *r = (S::one() - mom) * *r + mom * b;
                }
                for (r, &b) in v.data_mut().iter_mut().zip(var) {
                    *r = (S::one() - mom) * *r + mom * b;
                }
            }
        }
    }
}

impl<S: Scalar> Forward<'_, S> {
    /// Batch statistics observed by training-mode batch norms.
    pub fn batch_stats(&self) -> Vec<(usize, Vec<S>, Vec<S>)> {
        self.tape
            .batch_stats
            .iter()
            .map(|s| (s.gamma, s.mean.clone(), s.var.clone()))
            .collect()
    }
}

/// Per-pixel softmax over axis 1 of a `[B, K, H, W]` tensor.
pub fn softmax_channels<S: Scalar>(logits: &Tensor<S>) -> Tensor<S> {
    let s = logits.shape();
    let (b, k, hw) = (s[0], s[1], s[2] * s[3]);
    let mut out = Tensor::zeros(s);
    for bi in 0..b {
        let src = logits.slab(bi);
        let dst = out.slab_mut(bi);
        for p in 0..hw {
            let m = (0..k).map(|c| src[c * hw + p]).fold(S::neg_infinity(), S::max);
            let mut z = S::zero();
            for c in 0..k {
                let e = (src[c * hw + p] - m).exp();
                dst[c * hw + p] = e;
                z = z + e;
            }
            for c in 0..k {
                dst[c * hw + p] = dst[c * hw + p] / z;
            }
        }
    }
    out
}

/// Softmax map `[K, H, W]` for one `[window, C, H, W]` input, aligned with
/// the window's center frame.
pub fn forward_window<S: Scalar>(model: &Model<S>, window: &Tensor<S>) -> Result<Tensor<S>> {
    let fwd = model.forward(window.clone(), 1, false)?;
    let p = softmax_channels(fwd.logits());
    let s = p.shape().to_vec();
    Ok(p.reshape(&s[1..]))
}

/// Slides the model over `[T, C, H, W]` with stride 1, giving
/// `[T - window + 1, K, H, W]`; output `t` belongs to input frame
/// `t + (window - 1) / 2`.
pub fn predict_sequence<S: Scalar>(model: &Model<S>, frames: &Tensor<S>) -> Result<Tensor<S>> {
    let w = model.config.temporal_window;
    let t = frames.shape().first().copied().unwrap_or(0);
    if frames.shape().len() != 4 {
        return Err(Error::shape("rank", 4, frames.shape().len()));
    }
    if t < w {
        return Err(Error::InsufficientFrames { needed: w, found: t });
    }
    // windows are batched; every op is per frame, so this matches one-by-one
    let starts: Vec<usize> = (0..=t - w).collect();
    let mut maps = Vec::with_capacity(starts.len());
    for chunk in starts.chunks(PREDICT_BATCH) {
        let windows: Vec<Tensor<S>> = chunk.iter().map(|&s| frames.narrow(s, s + w)).collect();
        let s = frames.shape();
        let input = Tensor::stack(&windows).reshape(&[chunk.len() * w, s[1], s[2], s[3]]);
        let p = softmax_channels(model.forward(input, chunk.len(), false)?.logits());
        maps.extend((0..chunk.len()).map(|i| p.narrow(i, i + 1)));
    }
    let mut shape = maps[0].shape().to_vec();
    shape[0] = maps.len();
    Ok(Tensor::stack(&maps).reshape(&shape))
}

const PREDICT_BATCH: usize = 8;

/// RGB frames as `[T, 3, H, W]` scaled to `[0, 1]`.
pub fn frames_to_tensor<S: Scalar>(seq: &FrameSequence) -> Tensor<S> {
    let (h, w) = seq.size();
    let hw = h * w;
    let mut out = Tensor::zeros(&[seq.len(), 3, h, w]);
    let scale = S::from_f64_lossy(1.0 / 255.0);
    for (t, f) in seq.rgb.iter().enumerate() {
        let dst = out.slab_mut(t);
        for (p, px) in f.data().iter().enumerate() {
            for c in 0..3 {
                dst[c * hw + p] = S::from_f64_lossy(px[c] as f64) * scale;
            }
        }
    }
    out
}

pub const ASP_INPUT_CHANNELS: usize = 5;

/// Packs `[mbs_fg, mbs_bg, mbs_mixed, luma / 255, attention]` per frame.
///
/// `mbs` is `[T, 3, H, W]` or a full `[T, 4, H, W]` MBS softmax (class 0 is
/// dropped); `luma` and `attention` are per-frame `[H, W]` planes in the same
/// frame order.
pub fn stack_asp_inputs<S: Scalar>(luma: &[crate::LabelMap], mbs: &Tensor<S>, attention: &[crate::Heatmap]) -> Result<Tensor<S>> {
    let s = mbs.shape();
    if s.len() != 4 || !(s[1] == 3 || s[1] == 4) {
        return Err(Error::shape("channel", "3 or 4 MBS channels", format!("{s:?}")));
    }
    let (t, h, w) = (s[0], s[2], s[3]);
    let skip = s[1] - 3;
    if luma.len() != t {
        return Err(Error::shape("time", t, luma.len()));
    }
    if attention.len() != t {
        return Err(Error::shape("time", t, attention.len()));
    }
    for (l, a) in luma.iter().zip(attention) {
        if l.dims() != (h, w) || a.dims() != (h, w) {
            return Err(Error::shape("height/width", format!("{h}x{w}"), format!("{:?} / {:?}", l.dims(), a.dims())));
        }
    }
    let hw = h * w;
    let mut out = Tensor::zeros(&[t, ASP_INPUT_CHANNELS, h, w]);
    let inv = S::from_f64_lossy(1.0 / 255.0);
    for ti in 0..t {
        let src = mbs.slab(ti);
        let dst = out.slab_mut(ti);
        dst[..3 * hw].copy_from_slice(&src[skip * hw..(skip + 3) * hw]);
        for (p, &v) in luma[ti].data().iter().enumerate() {
            dst[3 * hw + p] = S::from_f64_lossy(v as f64) * inv;
        }
        for (p, &v) in attention[ti].data().iter().enumerate() {
            dst[4 * hw + p] = S::from_f64_lossy(v as f64);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
