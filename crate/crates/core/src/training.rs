//! Losses, schedule, optimizer, augmentations and the two training loops.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::attention::{attention_dropout, sample_attention, sample_dropout_frames, AttentionConfig};
use crate::datasetio::{SceneEntry, SceneRecord, SceneStore, Split};
use crate::error::{Error, Result};
use crate::network::{
    build_model, frames_to_tensor, predict_sequence, stack_asp_inputs, ModelBundle, NetConfig, Scalar, Tensor,
};
use crate::raster::{Heatmap, LabelMap};
use crate::seed;

pub const MBS_CLASS_WEIGHTS: [f64; 4] = [1.0, 1.0, 1.0, 3.0];
pub const ASP_CLASS_WEIGHTS: [f64; 3] = [1.0, 4.0, 4.0];

fn check_pred<S: Scalar>(pred: &Tensor<S>, gt: &LabelMap, weights: &[f64]) -> Result<()> {
    let s = pred.shape();
    if s.len() != 3 || s[0] != weights.len() {
        return Err(Error::shape("channel", weights.len(), format!("{s:?}")));
    }
    if (s[1], s[2]) != gt.dims() {
        return Err(Error::shape("height/width", format!("{:?}", gt.dims()), format!("{:?}", &s[1..])));
    }
    if !pred.all_finite() {
        return Err(Error::NonFinite("prediction"));
    }
    if let Some(&c) = gt.data().iter().find(|&&c| c as usize >= weights.len()) {
        return Err(Error::Degenerate(format!("ground-truth class {c} has no weight")));
    }
    Ok(())
}

/// Mean over pixels of `w[gt] * -ln p[gt]` for a `[K, H, W]` probability map.
pub fn weighted_cross_entropy<S: Scalar>(pred: &Tensor<S>, gt: &LabelMap, weights: &[f64]) -> Result<f64> {
    check_pred(pred, gt, weights)?;
    let hw = gt.data().len();
    let total: f64 = gt
        .data()
        .iter()
        .enumerate()
        .map(|(p, &c)| {
            let prob = pred.data()[c as usize * hw + p].to_f64_lossy();
            weights[c as usize] * -prob.max(f64::MIN_POSITIVE).ln()
        })
        .sum();
    Ok(total / hw as f64)
}

pub fn mbs_loss<S: Scalar>(pred: &Tensor<S>, gt: &LabelMap) -> Result<f64> {
    weighted_cross_entropy(pred, gt, &MBS_CLASS_WEIGHTS)
}

pub fn asp_loss<S: Scalar>(pred: &Tensor<S>, gt: &LabelMap) -> Result<f64> {
    weighted_cross_entropy(pred, gt, &ASP_CLASS_WEIGHTS)
}

/// Loss and pixel statistics of one batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub loss: f64,
    /// Ground-truth pixels per class.
    pub pixel_counts: Vec<u64>,
    /// Correctly classified pixels per class.
    pub correct: Vec<u64>,
}

impl LossReport {
    /// Per-class pixel accuracy; `None` where a class is absent.
    pub fn accuracy(&self) -> Vec<Option<f64>> {
        self.pixel_counts
            .iter()
            .zip(&self.correct)
            .map(|(&n, &c)| (n > 0).then(|| c as f64 / n as f64))
            .collect()
    }
}

/// Weighted cross-entropy on `[B, K, H, W]` logits (log-softmax form) and its
/// gradient with respect to the logits.
pub fn weighted_cross_entropy_logits<S: Scalar>(
    logits: &Tensor<S>,
    gt: &[&LabelMap],
    weights: &[f64],
) -> Result<(LossReport, Tensor<S>)> {
    let s = logits.shape();
    let (b, k, hw) = (s[0], s[1], s[2] * s[3]);
    if k != weights.len() {
        return Err(Error::shape("channel", weights.len(), k));
    }
    if gt.len() != b {
        return Err(Error::shape("batch", b, gt.len()));
    }
    if !logits.all_finite() {
        return Err(Error::NonFinite("logits"));
    }
    let n = (b * hw) as f64;
    let mut grad = Tensor::zeros(s);
    let mut total = 0.0f64;
    let mut counts = vec![0u64; k];
    let mut correct = vec![0u64; k];
    let mut z = vec![0.0f64; k];
    for bi in 0..b {
        let src = logits.slab(bi);
        let labels = gt[bi].data();
        if labels.len() != hw {
            return Err(Error::shape("height/width", hw, labels.len()));
        }
        let dst = grad.slab_mut(bi);
        for p in 0..hw {
            let y = labels[p] as usize;
            if y >= k {
                return Err(Error::Degenerate(format!("ground-truth class {y} has no weight")));
            }
            let mut best = 0;
            for c in 0..k {
                z[c] = src[c * hw + p].to_f64_lossy();
                if z[c] > z[best] {
                    best = c;
                }
            }
            let m = z[best];
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            let w = weights[y];
            total += w * (lse - z[y]);
            counts[y] += 1;
            correct[y] += u64::from(best == y);
            for c in 0..k {
                let prob = (z[c] - lse).exp();
                let d = w * (prob - if c == y { 1.0 } else { 0.0 }) / n;
                dst[c * hw + p] = S::from_f64_lossy(d);
            }
        }
    }
    Ok((
        LossReport {
            loss: total / n,
            pixel_counts: counts,
            correct,
        },
        grad,
    ))
}

/// One-cycle learning rate with cosine warm-up and annealing.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneCycle {
    pub lr_start: f64,
    pub lr_max: f64,
    pub lr_final: f64,
    /// Fraction of steps spent rising.
    pub pct_start: f64,
    pub total_steps: usize,
}

impl OneCycle {
    fn peak_step(&self) -> usize {
        ((self.pct_start * (self.total_steps.saturating_sub(1)) as f64).round() as usize).max(1)
    }

    pub fn lr(&self, step: usize) -> f64 {
        let cos = |a: f64, b: f64, f: f64| b + (a - b) * 0.5 * (1.0 + (std::f64::consts::PI * f.clamp(0.0, 1.0)).cos());
        let peak = self.peak_step();
        let last = self.total_steps.saturating_sub(1).max(peak + 1);
        if step <= peak {
            cos(self.lr_start, self.lr_max, step as f64 / peak as f64)
        } else {
            cos(self.lr_max, self.lr_final, (step - peak) as f64 / (last - peak) as f64)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Adam<S: Scalar> {
    cfg: AdamConfig,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    t: i32,
}

impl<S: Scalar> Adam<S> {
    pub fn new(params: &[Tensor<S>], cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            m: params.iter().map(|p| vec![S::zero(); p.len()]).collect(),
            v: params.iter().map(|p| vec![S::zero(); p.len()]).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [Tensor<S>], grads: &[Tensor<S>], lr: f64) {
        self.t += 1;
        let c = self.cfg;
        let b1 = S::from_f64_lossy(c.beta1);
        let b2 = S::from_f64_lossy(c.beta2);
        let one = S::one();
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        let step = S::from_f64_lossy(lr / bc1);
        let inv_bc2 = S::from_f64_lossy(1.0 / bc2);
        let eps = S::from_f64_lossy(c.eps);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                *w = *w - step * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
        }
    }
}

/// Temporal dropout of MBS prediction frames: `k ~ Binomial(max_frames,
/// mean_frames / max_frames)` frames are zeroed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MbsDropoutConfig {
    pub enabled: bool,
    pub mean_frames: f64,
    pub max_frames: usize,
}

impl Default for MbsDropoutConfig {
    fn default() -> Self {
        MbsDropoutConfig {
            enabled: true,
            mean_frames: 3.5,
            max_frames: 6,
        }
    }
}

/// Frames to zero out of `frames`, clipped to `[0, min(max_frames, frames)]`.
pub fn sample_mbs_dropout_frames(frames: usize, cfg: &MbsDropoutConfig, rng: &mut impl Rng) -> BTreeSet<usize> {
    if !cfg.enabled || cfg.max_frames == 0 || frames == 0 {
        return BTreeSet::new();
    }
    let p = (cfg.mean_frames / cfg.max_frames as f64).clamp(0.0, 1.0);
    let k = (Binomial::new(cfg.max_frames as u64, p).unwrap().sample(rng) as usize).min(cfg.max_frames.min(frames));
    index::sample(rng, frames, k).into_iter().collect()
}

/// Zeroes whole frames of a `[T, C, H, W]` MBS prediction sequence.
pub fn zero_frames<S: Scalar>(pred: &Tensor<S>, frames: &BTreeSet<usize>) -> Tensor<S> {
    let mut out = pred.clone();
    for &t in frames {
        if t < pred.shape()[0] {
            out.slab_mut(t).fill(S::zero());
        }
    }
    out
}

pub fn temporal_mbs_dropout<S: Scalar>(pred: &Tensor<S>, seed: u64, cfg: &MbsDropoutConfig) -> Tensor<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    zero_frames(pred, &sample_mbs_dropout_frames(pred.shape()[0], cfg, &mut rng))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttentionDropoutConfig {
    pub enabled: bool,
    /// Independent per-frame drop probability.
    pub frame_prob: f64,
}

impl Default for AttentionDropoutConfig {
    fn default() -> Self {
        AttentionDropoutConfig {
            enabled: false,
            frame_prob: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowSampling {
    /// One random window per scene visit.
    Random,
    /// Every window of every scene.
    Exhaustive,
    /// The middle window only.
    Center,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub net: NetConfig,
    pub lr_start: f64,
    pub lr_max: f64,
    /// End of the annealing phase; `lr_start / 1e4` when absent.
    pub lr_final: Option<f64>,
    pub pct_start: f64,
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Stops early after this many optimizer steps.
    pub max_steps: Option<usize>,
    pub class_weights: Vec<f64>,
    pub windows: WindowSampling,
    pub mbs_dropout: MbsDropoutConfig,
    pub attention: AttentionConfig,
    pub attention_dropout: AttentionDropoutConfig,
    /// ASP runs: always train on this layer instead of a uniform pick.
    pub target_layer: Option<usize>,
    /// Keep frozen-MBS predictions per scene instead of recomputing them.
    pub cache_mbs: bool,
    pub checkpoint_every_epoch: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::mbs()
    }
}

impl TrainConfig {
    pub fn mbs() -> Self {
        TrainConfig {
            net: NetConfig::mbs(),
            lr_start: 3e-4,
            lr_max: 3e-3,
            lr_final: None,
            pct_start: 0.3,
            adam: AdamConfig::default(),
            epochs: 8,
            batch_size: 8,
            max_steps: None,
            class_weights: MBS_CLASS_WEIGHTS.to_vec(),
            windows: WindowSampling::Random,
            mbs_dropout: MbsDropoutConfig {
                enabled: false,
                ..MbsDropoutConfig::default()
            },
            attention: AttentionConfig::default(),
            attention_dropout: AttentionDropoutConfig::default(),
            target_layer: None,
            cache_mbs: true,
            checkpoint_every_epoch: true,
            seed: 0,
        }
    }

    pub fn asp() -> Self {
        TrainConfig {
            net: NetConfig::asp(),
            lr_start: 3e-5,
            lr_max: 3e-4,
            class_weights: ASP_CLASS_WEIGHTS.to_vec(),
            mbs_dropout: MbsDropoutConfig::default(),
            ..TrainConfig::mbs()
        }
    }

    /// Desk-scale network of the same family.
    /// Small network and a 3e-4 to 3e-3 schedule for both nets: a few hundred
    /// steps at the full-scale ASP rate leave ASPnet predicting one class.
    pub fn desk(mut self) -> Self {
        self.net = self.net.desk();
        self.lr_start = 3e-4;
        self.lr_max = 3e-3;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if !(self.lr_start > 0.0 && self.lr_start < self.lr_max) {
            return Err(Error::Config("need 0 < lr_start < lr_max".into()));
        }
        if self.class_weights.len() != self.net.out_classes || self.class_weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::Config(format!(
                "need {} positive class weights, got {:?}",
                self.net.out_classes, self.class_weights
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.pct_start) {
            return Err(Error::Config("pct_start must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn schedule(&self, total_steps: usize) -> OneCycle {
        OneCycle {
            lr_start: self.lr_start,
            lr_max: self.lr_max,
            lr_final: self.lr_final.unwrap_or(self.lr_start / 1e4),
            pct_start: self.pct_start,
            total_steps,
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub pixel_accuracy: Vec<Option<f64>>,
    pub pixel_counts: Vec<u64>,
    /// ASP runs: target layer of every sample in the batch.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub target_layers: Vec<usize>,
}

pub struct TrainOutcome {
    pub model: ModelBundle,
    pub log: Vec<StepRecord>,
    pub checkpoints: Vec<PathBuf>,
}

/// One training example: a scene, a window start and (for ASP) a target layer.
#[derive(Clone, Copy, Debug)]
struct Sample {
    scene: usize,
    start: usize,
}

fn epoch_plan(entries: usize, windows: usize, mode: WindowSampling, rng: &mut ChaCha8Rng) -> Vec<Sample> {
    let mut order: Vec<usize> = (0..entries).collect();
    order.shuffle(rng);
    match mode {
        WindowSampling::Random => order
            .into_iter()
            .map(|scene| Sample {
                scene,
                start: rng.random_range(0..windows),
            })
            .collect(),
        WindowSampling::Center => order.into_iter().map(|scene| Sample { scene, start: windows / 2 }).collect(),
        WindowSampling::Exhaustive => {
            let mut all: Vec<Sample> = order
                .into_iter()
                .flat_map(|scene| (0..windows).map(move |start| Sample { scene, start }))
                .collect();
            all.shuffle(rng);
            all
        }
    }
}

struct Logger {
    file: Option<BufWriter<File>>,
    records: Vec<StepRecord>,
}

impl Logger {
    fn new(out: Option<&Path>, name: &str) -> Result<Self> {
        let file = match out {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let p = dir.join(name);
                Some(BufWriter::new(File::create(&p).map_err(|e| Error::io(&p, e))?))
            }
            None => None,
        };
        Ok(Logger { file, records: Vec::new() })
    }

    fn push(&mut self, r: StepRecord) -> Result<()> {
        if let Some(f) = &mut self.file {
            let line = serde_json::to_string(&r).expect("record serializes");
            writeln!(f, "{line}").map_err(|e| Error::io("training log", e))?;
        }
        self.records.push(r);
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if let Some(f) = &mut self.file {
            f.flush().map_err(|e| Error::io("training log", e))?;
        }
        Ok(())
    }
}

fn load_all(store: &dyn SceneStore, entries: &[SceneEntry]) -> Result<Vec<Arc<SceneRecord>>> {
    entries.iter().map(|e| store.load(e)).collect()
}

/// Shared optimizer loop. `batch_of` turns samples into an input tensor,
/// labels and target layers.
struct Loop<'a> {
    cfg: &'a TrainConfig,
    out: Option<&'a Path>,
    prefix: &'a str,
    model: ModelBundle,
    adam: Adam<f32>,
    logger: Logger,
    checkpoints: Vec<PathBuf>,
}

type Batch = (Tensor<f32>, Vec<LabelMap>, Vec<usize>);

impl<'a> Loop<'a> {
    fn new(cfg: &'a TrainConfig, out: Option<&'a Path>, prefix: &'a str) -> Result<Self> {
        cfg.validate()?;
        let mut model = build_model::<f32>(&cfg.net, cfg.seed)?;
        model.metadata.seed = cfg.seed;
        let adam = Adam::new(model.params(), cfg.adam);
        Ok(Loop {
            cfg,
            out,
            prefix,
            model,
            adam,
            logger: Logger::new(out, &format!("{prefix}_train_log.jsonl"))?,
            checkpoints: Vec::new(),
        })
    }

    fn checkpoint(&mut self, name: &str) -> Result<Option<PathBuf>> {
        let Some(dir) = self.out else { return Ok(None) };
        let p = dir.join(name);
        self.model.save(&p)?;
        Ok(Some(p))
    }

    fn run(
        mut self,
        scenes: usize,
        windows: usize,
        dataset_hash: String,
        mut batch_of: impl FnMut(&[Sample], &mut ChaCha8Rng) -> Result<Batch>,
    ) -> Result<TrainOutcome> {
        let cfg = self.cfg;
        let per_epoch = match cfg.windows {
            WindowSampling::Exhaustive => scenes * windows,
            _ => scenes,
        }
        .div_ceil(cfg.batch_size);
        let total = (per_epoch * cfg.epochs).min(cfg.max_steps.unwrap_or(usize::MAX));
        let schedule = cfg.schedule(total);
        self.model.metadata.dataset_hash = Some(dataset_hash);
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, 0x7EA1));
        let mut step = 0;
        'epochs: for epoch in 0..cfg.epochs {
            let plan = epoch_plan(scenes, windows, cfg.windows, &mut rng);
            for chunk in plan.chunks(cfg.batch_size) {
                if step >= total {
                    break 'epochs;
                }
                let (input, labels, targets) = batch_of(chunk, &mut rng)?;
                let lr = schedule.lr(step);
                let fwd = self.model.forward(input, chunk.len(), true)?;
                let refs: Vec<&LabelMap> = labels.iter().collect();
                let computed = weighted_cross_entropy_logits(fwd.logits(), &refs, &cfg.class_weights);
                let finite = |r: &LossReport| r.loss.is_finite();
                let (report, dlogits) = match computed {
                    Ok((r, d)) if finite(&r) => (r, d),
                    _ => {
                        drop(fwd);
                        let checkpoint = self.checkpoint(&format!("{}_last_finite.ckpt", self.prefix))?;
                        return Err(Error::Diverged { step, checkpoint });
                    }
                };
                let grads = self.model.backward(&fwd, dlogits);
                let stats = fwd.batch_stats();
                drop(fwd);
                if grads.iter().any(|g| !g.all_finite()) {
                    let checkpoint = self.checkpoint(&format!("{}_last_finite.ckpt", self.prefix))?;
                    return Err(Error::Diverged { step, checkpoint });
                }
                self.adam.step(self.model.params_mut(), &grads, lr);
                self.model.update_running_stats(&stats);
                self.logger.push(StepRecord {
                    step,
                    epoch,
                    lr,
                    loss: report.loss,
                    pixel_accuracy: report.accuracy(),
                    pixel_counts: report.pixel_counts,
                    target_layers: targets,
                })?;
                step += 1;
            }
            self.model.metadata.epochs = epoch + 1;
            self.model.metadata.steps = step;
            self.logger.flush()?;
            if cfg.checkpoint_every_epoch {
                if let Some(p) = self.checkpoint(&format!("{}_epoch{:03}.ckpt", self.prefix, epoch + 1))? {
                    self.checkpoints.push(p);
                }
            }
        }
        self.model.metadata.steps = step;
        self.logger.flush()?;
        if let Some(p) = self.checkpoint(&format!("{}.ckpt", self.prefix))? {
            self.checkpoints.push(p);
        }
        Ok(TrainOutcome {
            model: self.model,
            log: self.logger.records,
            checkpoints: self.checkpoints,
        })
    }
}

fn uniform_size(records: &[Arc<SceneRecord>]) -> Result<(usize, usize, usize)> {
    let first = records.first().ok_or_else(|| Error::Config("training split is empty".into()))?;
    let (t, h, w) = (first.spec.frames, first.spec.height, first.spec.width);
    if records.iter().any(|r| (r.spec.frames, r.spec.height, r.spec.width) != (t, h, w)) {
        return Err(Error::Config("training scenes differ in size or length".into()));
    }
    Ok((t, h, w))
}

/// Trains MBSnet on the training split of `store`. Writes the JSON-lines log
/// and checkpoints under `out` when given.
pub fn train_mbsnet(store: &dyn SceneStore, cfg: &TrainConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    let entries = store.manifest().split(Split::Train).to_vec();
    let records = load_all(store, &entries)?;
    let (frames, _, _) = uniform_size(&records)?;
    let w = cfg.net.temporal_window;
    if frames < w {
        return Err(Error::InsufficientFrames { needed: w, found: frames });
    }
    let inputs: Vec<Tensor<f32>> = records.iter().map(|r| frames_to_tensor(&r.frames)).collect();
    let lp = Loop::new(cfg, out, "mbs")?;
    lp.run(records.len(), frames - w + 1, store.manifest().hash(), |chunk, _| {
        let parts: Vec<Tensor<f32>> = chunk.iter().map(|s| inputs[s.scene].narrow(s.start, s.start + w)).collect();
        let x = Tensor::stack(&parts);
        let sh = x.shape().to_vec();
        let x = x.reshape(&[sh[0] * sh[1], sh[2], sh[3], sh[4]]);
        let labels = chunk
            .iter()
            .map(|s| records[s.scene].mbs.labels[s.start + w / 2].clone())
            .collect();
        Ok((x, labels, Vec::new()))
    })
}

/// Frozen-MBS softmax for every valid frame of a scene, `[T - w + 1, 4, H, W]`.
pub fn mbs_predictions(mbs: &ModelBundle, record: &SceneRecord) -> Result<Tensor<f32>> {
    predict_sequence(mbs, &frames_to_tensor(&record.frames))
}

/// ASP input stack for frames aligned with `mbs_pred` (which starts at scene
/// frame `offset`), attention given for every scene frame.
pub fn asp_sequence_inputs(
    record: &SceneRecord,
    mbs_pred: &Tensor<f32>,
    offset: usize,
    attention: &[Heatmap],
) -> Result<Tensor<f32>> {
    let n = mbs_pred.shape()[0];
    if offset + n > record.frames.len() || offset + n > attention.len() {
        return Err(Error::shape("time", record.frames.len(), offset + n));
    }
    stack_asp_inputs(&record.frames.luma[offset..offset + n], mbs_pred, &attention[offset..offset + n])
}

/// Trains ASPnet on top of a frozen MBSnet.
pub fn train_aspnet(
    store: &dyn SceneStore,
    frozen_mbs: &ModelBundle,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    let before = frozen_mbs.weight_hash();
    let entries = store.manifest().split(Split::Train).to_vec();
    let all = load_all(store, &entries)?;
    let records: Vec<Arc<SceneRecord>> = all.into_iter().filter(|r| !r.spec.layers.is_empty()).collect();
    let (frames, _, _) = uniform_size(&records)?;
    let mw = frozen_mbs.config.temporal_window;
    let aw = cfg.net.temporal_window;
    if frames < mw + aw - 1 {
        return Err(Error::InsufficientFrames {
            needed: mw + aw - 1,
            found: frames,
        });
    }
    let mbs_len = frames - mw + 1;
    let offset = mw / 2;
    let mut cache: HashMap<usize, Tensor<f32>> = HashMap::new();
    let lp = Loop::new(cfg, out, "asp")?;
    let mut hash_src = store.manifest().hash();
    hash_src.push_str(&before);
    let outcome = lp.run(records.len(), mbs_len - aw + 1, hash_src, |chunk, rng| {
        let mut parts = Vec::with_capacity(chunk.len());
        let mut labels = Vec::with_capacity(chunk.len());
        let mut targets = Vec::with_capacity(chunk.len());
        for s in chunk {
            let r = &records[s.scene];
            let pred = match cache.get(&s.scene) {
                Some(p) => p.clone(),
                None => {
                    let p = mbs_predictions(frozen_mbs, r)?;
                    if cfg.cache_mbs {
                        cache.insert(s.scene, p.clone());
                    }
                    p
                }
            };
            let target = match cfg.target_layer {
                Some(t) if t < r.spec.layers.len() => t,
                Some(t) => {
                    return Err(Error::InvalidLayer {
                        index: t,
                        count: r.spec.layers.len(),
                    })
                }
                None => rng.random_range(0..r.spec.layers.len()),
            };
            let pred = zero_frames(&pred, &sample_mbs_dropout_frames(mbs_len, &cfg.mbs_dropout, rng));
            let mut att = sample_attention(&r.spec, target, &cfg.attention, rng.random())?;
            if cfg.attention_dropout.enabled {
                let drop = sample_dropout_frames(att.heat.len(), cfg.attention_dropout.frame_prob, rng);
                att = attention_dropout(&att, &drop);
            }
            let full = asp_sequence_inputs(r, &pred, offset, &att.heat)?;
            parts.push(full.narrow(s.start, s.start + aw));
            labels.push(r.asp[target].labels[offset + s.start + aw / 2].clone());
            targets.push(target);
        }
        let x = Tensor::stack(&parts);
        let sh = x.shape().to_vec();
        Ok((x.reshape(&[sh[0] * sh[1], sh[2], sh[3], sh[4]]), labels, targets))
    })?;
    if frozen_mbs.weight_hash() != before {
        return Err(Error::FrozenWeightsMutated);
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Grid;

    fn uniform(k: usize, h: usize, w: usize) -> Tensor<f64> {
        Tensor::full(&[k, h, w], 1.0 / k as f64)
    }

    #[test]
    fn closed_form_losses() {
        let gt3 = Grid::new(5, 4, 3u8);
        assert!((mbs_loss(&uniform(4, 4, 5), &gt3).unwrap() - 3.0 * 4f64.ln()).abs() < 1e-12);
        let gt1 = Grid::new(5, 4, 1u8);
        assert!((asp_loss(&uniform(3, 4, 5), &gt1).unwrap() - 4.0 * 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let gt = Grid::from_fn(6, 6, |x, y| ((x + y) % 4) as u8);
        let mut p = Tensor::<f64>::zeros(&[4, 6, 6]);
        for (i, &c) in gt.data().iter().enumerate() {
            p.data_mut()[c as usize * 36 + i] = 1.0;
        }
        assert_eq!(mbs_loss(&p, &gt).unwrap(), 0.0);
    }

    #[test]
    fn unit_weights_give_plain_cross_entropy() {
        let gt = Grid::from_fn(3, 2, |x, _| x as u8);
        let p = Tensor::<f64>::from_vec(
            &[3, 2, 3],
            vec![0.5, 0.2, 0.1, 0.6, 0.3, 0.2, 0.25, 0.5, 0.1, 0.2, 0.4, 0.2, 0.25, 0.3, 0.8, 0.2, 0.3, 0.6],
        );
        let plain: f64 = gt
            .data()
            .iter()
            .enumerate()
            .map(|(i, &c)| -p.data()[c as usize * 6 + i].ln())
            .sum::<f64>()
            / 6.0;
        assert!((weighted_cross_entropy(&p, &gt, &[1.0; 3]).unwrap() - plain).abs() < 1e-15);
    }

    #[test]
    fn nan_prediction_is_an_error() {
        let mut p = uniform(4, 2, 2);
        p.data_mut()[3] = f64::NAN;
        assert!(matches!(mbs_loss(&p, &Grid::new(2, 2, 0)), Err(Error::NonFinite(_))));
    }

    #[test]
    fn logits_loss_matches_probability_loss_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = Tensor::from_vec(&[2, 4, 3, 3], (0..72).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<f64>>());
        let gts: Vec<LabelMap> = (0..2).map(|_| Grid::from_fn(3, 3, |_, _| rng.random_range(0..4u8))).collect();
        let refs: Vec<&LabelMap> = gts.iter().collect();
        let (rep, grad) = weighted_cross_entropy_logits(&logits, &refs, &MBS_CLASS_WEIGHTS).unwrap();
        let probs = crate::network::softmax_channels(&logits);
        let by_prob = (0..2)
            .map(|b| mbs_loss(&probs.narrow(b, b + 1).reshape(&[4, 3, 3]), &gts[b]).unwrap())
            .sum::<f64>()
            / 2.0;
        assert!((rep.loss - by_prob).abs() < 1e-12);
        let h = 1e-6;
        for i in 0..72 {
            let mut up = logits.clone();
            up.data_mut()[i] += h;
            let mut down = logits.clone();
            down.data_mut()[i] -= h;
            let f = |t: &Tensor<f64>| weighted_cross_entropy_logits(t, &refs, &MBS_CLASS_WEIGHTS).unwrap().0.loss;
            let num = (f(&up) - f(&down)) / (2.0 * h);
            assert!((num - grad.data()[i]).abs() <= 1e-3 * num.abs().max(grad.data()[i].abs()) + 1e-9);
        }
    }

    #[test]
    fn one_cycle_shape() {
        let s = OneCycle {
            lr_start: 3e-4,
            lr_max: 3e-3,
            lr_final: 3e-8,
            pct_start: 0.3,
            total_steps: 100,
        };
        let lrs: Vec<f64> = (0..100).map(|i| s.lr(i)).collect();
        let peak = lrs.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert!((lrs[0] - 3e-4).abs() < 1e-15);
        assert!((lrs[peak] - 3e-3).abs() < 1e-15);
        assert!((lrs[99] - 3e-8).abs() < 1e-15);
        assert!((25..=35).contains(&peak));
        assert!(lrs[..=peak].windows(2).all(|w| w[1] >= w[0]));
        assert!(lrs[peak..].windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn mbs_dropout_statistics() {
        let cfg = MbsDropoutConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 10_000;
        let mut total = 0;
        for _ in 0..n {
            let f = sample_mbs_dropout_frames(11, &cfg, &mut rng);
            assert!(f.len() <= 6 && f.iter().all(|&t| t < 11));
            total += f.len();
        }
        let mean = total as f64 / n as f64;
        assert!((3.3..=3.7).contains(&mean), "{mean}");
        let off = MbsDropoutConfig {
            enabled: false,
            ..cfg
        };
        let p = Tensor::<f32>::full(&[11, 3, 2, 2], 0.5);
        assert_eq!(temporal_mbs_dropout(&p, 4, &off), p);
        let d = temporal_mbs_dropout(&p, 4, &cfg);
        let zeroed = (0..11).filter(|&t| d.slab(t).iter().all(|&v| v == 0.0)).count();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert_eq!(zeroed, sample_mbs_dropout_frames(11, &cfg, &mut rng).len());
        // fewer frames than max_frames: clipped
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!((0..200).all(|_| sample_mbs_dropout_frames(2, &cfg, &mut rng).len() <= 2));
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut p = vec![Tensor::from_vec(&[2], vec![3.0f64, -2.0])];
        let mut opt = Adam::new(&p, AdamConfig::default());
        for _ in 0..2000 {
            let g = vec![p[0].clone()];
            opt.step(&mut p, &g, 1e-2);
        }
        assert!(p[0].data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::mbs().validate().is_ok());
        assert!(TrainConfig::asp().validate().is_ok());
        let mut c = TrainConfig::mbs();
        c.lr_start = c.lr_max;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = TrainConfig::asp();
        c.class_weights = vec![1.0; 4];
        assert!(c.validate().is_err());
    }
}
