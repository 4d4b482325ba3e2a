//! Pixel metrics, ablation tables and overlay rendering.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{sample_attention, AttentionConfig, AttentionMode, JitterConfig};
use crate::datasetio::{write_atomic, SceneRecord, SceneStore, Split};
use crate::error::{Error, Result};
use crate::groundtruth::{ASP_CLASSES, MBS_CLASSES};
use crate::network::{predict_sequence, ModelBundle, Scalar, Tensor};
use crate::raster::{Grid, Heatmap, LabelMap, RgbImage};
use crate::seed;
use crate::training::{asp_sequence_inputs, mbs_predictions};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Mbs,
    Asp,
}

impl Task {
    pub fn classes(self) -> usize {
        match self {
            Task::Mbs => MBS_CLASSES,
            Task::Asp => ASP_CLASSES,
        }
    }
}

/// Rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix {
            counts: vec![vec![0; k]; k],
        }
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn add_maps(&mut self, gt: &LabelMap, pred: &LabelMap) {
        assert_eq!(gt.dims(), pred.dims(), "label maps differ in size");
        for (&g, &p) in gt.data().iter().zip(pred.data()) {
            self.counts[g as usize][p as usize] += 1;
        }
    }

    pub fn merge(mut self, other: &ConfusionMatrix) -> Self {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        self
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Row-normalized matrix; rows without ground-truth pixels stay zero.
    pub fn normalized(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let n: u64 = row.iter().sum();
                row.iter().map(|&c| if n == 0 { 0.0 } else { c as f64 / n as f64 }).collect()
            })
            .collect()
    }

    pub fn empty_rows(&self) -> Vec<usize> {
        (0..self.classes()).filter(|&r| self.counts[r].iter().all(|&c| c == 0)).collect()
    }

    /// `None` when the class is never predicted.
    pub fn precision(&self, c: usize) -> Option<f64> {
        let col: u64 = self.counts.iter().map(|r| r[c]).sum();
        (col > 0).then(|| self.counts[c][c] as f64 / col as f64)
    }

    /// `None` when the class never occurs in the ground truth.
    pub fn recall(&self, c: usize) -> Option<f64> {
        let row: u64 = self.counts[c].iter().sum();
        (row > 0).then(|| self.counts[c][c] as f64 / row as f64)
    }
}

/// Per-pixel argmax over `[K, H, W]` probabilities; ties go to the lower class.
pub fn argmax_labels<S: Scalar>(probs: &Tensor<S>) -> LabelMap {
    let s = probs.shape();
    let (k, h, w) = (s[0], s[1], s[2]);
    let d = probs.data();
    Grid::from_fn(w, h, |x, y| {
        let p = y * w + x;
        let mut best = 0;
        for c in 1..k {
            if d[c * h * w + p] > d[best * h * w + p] {
                best = c;
            }
        }
        best as u8
    })
}

/// Argmax label map of every frame of a `[T, K, H, W]` prediction.
pub fn argmax_sequence(pred: &Tensor<f32>) -> Vec<LabelMap> {
    let s = pred.shape();
    (0..s[0])
        .map(|t| argmax_labels(&Tensor::from_vec(&s[1..], pred.slab(t).to_vec())))
        .collect()
}

/// How ASP evaluation chooses attention and target layers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AspEvalConfig {
    /// Regenerate attention in this mode without jitter; the stored dataset
    /// attention is used when absent.
    pub mode: Option<AttentionMode>,
    /// Attend every layer in turn; otherwise one random layer per scene.
    pub all_layers: bool,
    pub seed: u64,
}

impl Default for AspEvalConfig {
    fn default() -> Self {
        AspEvalConfig {
            mode: None,
            all_layers: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub name: String,
    pub task: Task,
    pub split: Split,
    pub dataset_hash: String,
    pub model_hash: String,
    pub scenes: usize,
    /// Evaluated output frames (per attended layer for ASP).
    pub frames: usize,
    pub matrix: ConfusionMatrix,
    pub normalized: Vec<Vec<f64>>,
    /// Ground-truth classes absent from the split.
    pub empty_rows: Vec<usize>,
    pub precision: Vec<Option<f64>>,
    pub recall: Vec<Option<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub asp: Option<AspEvalConfig>,
}

impl EvalReport {
    fn from_matrix(name: &str, task: Task, split: Split, dataset_hash: String, model_hash: String) -> impl FnOnce(usize, usize, ConfusionMatrix) -> EvalReport + '_ {
        move |scenes, frames, matrix| {
            let k = matrix.classes();
            EvalReport {
                name: name.to_string(),
                task,
                split,
                dataset_hash,
                model_hash,
                scenes,
                frames,
                normalized: matrix.normalized(),
                empty_rows: matrix.empty_rows(),
                precision: (0..k).map(|c| matrix.precision(c)).collect(),
                recall: (0..k).map(|c| matrix.recall(c)).collect(),
                matrix,
                asp: None,
            }
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|source| Error::Json { path: path.into(), source })
    }

    /// Mean recall over the given classes, skipping absent ones.
    pub fn mean_recall(&self, classes: &[usize]) -> f64 {
        let v: Vec<f64> = classes.iter().filter_map(|&c| self.recall[c]).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }
}

fn split_records(store: &dyn SceneStore, split: Split) -> Result<Vec<std::sync::Arc<SceneRecord>>> {
    let entries = store.manifest().split(split);
    if entries.is_empty() {
        return Err(Error::Config(format!("split {} is empty", split.name())));
    }
    entries.iter().map(|e| store.load(e)).collect()
}

/// MBS confusion over every valid output frame of every scene in `split`.
pub fn evaluate_mbs(name: &str, mbs: &ModelBundle, store: &dyn SceneStore, split: Split) -> Result<EvalReport> {
    let records = split_records(store, split)?;
    let offset = mbs.config.temporal_window / 2;
    let parts = records
        .par_iter()
        .map(|r| {
            let labels = argmax_sequence(&mbs_predictions(mbs, r)?);
            let mut m = ConfusionMatrix::new(MBS_CLASSES);
            for (i, p) in labels.iter().enumerate() {
                m.add_maps(&r.mbs.labels[offset + i], p);
            }
            Ok((m, labels.len()))
        })
        .collect::<Result<Vec<_>>>()?;
    let (matrix, frames) = parts
        .iter()
        .fold((ConfusionMatrix::new(MBS_CLASSES), 0), |(m, f), (pm, pf)| (m.merge(pm), f + pf));
    let build = EvalReport::from_matrix(name, Task::Mbs, split, store.manifest().hash(), mbs.weight_hash());
    Ok(build(records.len(), frames, matrix))
}

/// Attention for `layer` of a scene under an evaluation config.
pub fn eval_attention(record: &SceneRecord, layer: usize, cfg: &AspEvalConfig) -> Result<Vec<Heatmap>> {
    match cfg.mode {
        None => record
            .attention
            .get(layer)
            .map(|a| a.heat.clone())
            .ok_or(Error::InvalidLayer {
                index: layer,
                count: record.attention.len(),
            }),
        Some(mode) => {
            let mut ac = AttentionConfig::pinned(mode);
            ac.jitter = JitterConfig::none();
            let s = seed::derive(cfg.seed ^ record.spec.seed, 0xE7A1_0000 + layer as u64);
            Ok(sample_attention(&record.spec, layer, &ac, s)?.heat)
        }
    }
}

/// ASP probabilities `[T - w_mbs - w_asp + 2, 3, H, W]` for one attended
/// layer, given the frozen MBS predictions of the scene.
pub fn predict_asp(asp: &ModelBundle, mbs_pred: &Tensor<f32>, mbs_window: usize, record: &SceneRecord, attention: &[Heatmap]) -> Result<Tensor<f32>> {
    let inputs = asp_sequence_inputs(record, mbs_pred, mbs_window / 2, attention)?;
    predict_sequence(asp, &inputs)
}

/// First scene frame covered by ASP output frame 0.
pub fn asp_output_offset(mbs: &ModelBundle, asp: &ModelBundle) -> usize {
    mbs.config.temporal_window / 2 + asp.config.temporal_window / 2
}

pub fn evaluate_asp(
    name: &str,
    asp: &ModelBundle,
    mbs: &ModelBundle,
    store: &dyn SceneStore,
    split: Split,
    cfg: &AspEvalConfig,
) -> Result<EvalReport> {
    let records = split_records(store, split)?;
    let offset = asp_output_offset(mbs, asp);
    let parts = records
        .par_iter()
        .map(|r| {
            let mut m = ConfusionMatrix::new(ASP_CLASSES);
            let mut frames = 0;
            let n = r.spec.layers.len();
            if n == 0 {
                return Ok((m, 0));
            }
            let layers: Vec<usize> = if cfg.all_layers {
                (0..n).collect()
            } else {
                vec![ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, r.spec.seed)).random_range(0..n)]
            };
            let mbs_pred = mbs_predictions(mbs, r)?;
            for layer in layers {
                let att = eval_attention(r, layer, cfg)?;
                let labels = argmax_sequence(&predict_asp(asp, &mbs_pred, mbs.config.temporal_window, r, &att)?);
                for (i, p) in labels.iter().enumerate() {
                    m.add_maps(&r.asp[layer].labels[offset + i], p);
                }
                frames += labels.len();
            }
            Ok((m, frames))
        })
        .collect::<Result<Vec<_>>>()?;
    let (matrix, frames) = parts
        .iter()
        .fold((ConfusionMatrix::new(ASP_CLASSES), 0), |(m, f), (pm, pf)| (m.merge(pm), f + pf));
    let mut model_hash = asp.weight_hash();
    model_hash.push(':');
    model_hash.push_str(&mbs.weight_hash());
    let build = EvalReport::from_matrix(name, Task::Asp, split, store.manifest().hash(), model_hash);
    let mut report = build(records.len(), frames, matrix);
    report.asp = Some(*cfg);
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub precision: Vec<Option<f64>>,
    pub recall: Vec<Option<f64>>,
    /// Differences to the first row.
    pub precision_delta: Vec<Option<f64>>,
    pub recall_delta: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub task: Task,
    pub split: Split,
    pub rows: Vec<AblationRow>,
}

fn delta(a: &[Option<f64>], base: &[Option<f64>]) -> Vec<Option<f64>> {
    a.iter()
        .zip(base)
        .map(|(x, b)| Some(x.as_ref()? - b.as_ref()?))
        .collect()
}

/// Side-by-side metrics with deltas against the first report.
pub fn compare_models(reports: &[EvalReport]) -> Result<AblationTable> {
    let [first, ..] = reports else {
        return Err(Error::MismatchedSplits("need at least two reports".into()));
    };
    if reports.len() < 2 {
        return Err(Error::MismatchedSplits("need at least two reports".into()));
    }
    for r in &reports[1..] {
        if r.task != first.task || r.split != first.split || r.dataset_hash != first.dataset_hash {
            return Err(Error::MismatchedSplits(format!(
                "{} ({:?} {} on {}) vs {} ({:?} {} on {})",
                first.name,
                first.task,
                first.split.name(),
                first.dataset_hash,
                r.name,
                r.task,
                r.split.name(),
                r.dataset_hash
            )));
        }
    }
    Ok(AblationTable {
        task: first.task,
        split: first.split,
        rows: reports
            .iter()
            .map(|r| AblationRow {
                name: r.name.clone(),
                precision: r.precision.clone(),
                recall: r.recall.clone(),
                precision_delta: delta(&r.precision, &first.precision),
                recall_delta: delta(&r.recall, &first.recall),
            })
            .collect(),
    })
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let k = self.rows[0].precision.len();
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["model".to_string()];
        for c in 0..k {
            header.extend([
                format!("precision_{c}"),
                format!("recall_{c}"),
                format!("precision_{c}_delta"),
                format!("recall_{c}_delta"),
            ]);
        }
        w.write_record(&header).expect("in-memory csv");
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for r in &self.rows {
            let mut rec = vec![r.name.clone()];
            for c in 0..k {
                rec.extend([
                    cell(r.precision[c]),
                    cell(r.recall[c]),
                    cell(r.precision_delta[c]),
                    cell(r.recall_delta[c]),
                ]);
            }
            w.write_record(&rec).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is utf-8")
    }
}

pub const BLUE: [u8; 3] = [0, 0, 255];
pub const RED: [u8; 3] = [255, 0, 0];
pub const GREEN: [u8; 3] = [0, 255, 0];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlayStyle {
    pub alpha: f64,
    pub task: Task,
}

impl OverlayStyle {
    pub fn new(task: Task) -> Self {
        OverlayStyle { alpha: 0.6, task }
    }

    /// Tint of each class; class 0 is never drawn.
    pub fn color(&self, class: u8) -> Option<[u8; 3]> {
        match (self.task, class) {
            (_, 1) => Some(BLUE),
            (_, 2) => Some(RED),
            (Task::Mbs, 3) => Some(GREEN),
            _ => None,
        }
    }
}

pub fn render_overlay(frame: &RgbImage, labels: &LabelMap, style: &OverlayStyle) -> RgbImage {
    assert_eq!(frame.dims(), labels.dims(), "frame and labels differ in size");
    let a = style.alpha;
    let data = frame
        .data()
        .iter()
        .zip(labels.data())
        .map(|(&px, &c)| match style.color(c) {
            None => px,
            Some(col) => std::array::from_fn(|i| ((1.0 - a) * px[i] as f64 + a * col[i] as f64).round() as u8),
        })
        .collect();
    Grid::from_vec(frame.width(), frame.height(), data)
}

pub fn render_overlay_sequence(frames: &[RgbImage], labels: &[LabelMap], style: &OverlayStyle) -> Vec<RgbImage> {
    frames.iter().zip(labels).map(|(f, l)| render_overlay(f, l, style)).collect()
}

/// Class colors on black.
pub fn render_labels(labels: &LabelMap, task: Task) -> RgbImage {
    let style = OverlayStyle::new(task);
    labels.map(|c| style.color(c).unwrap_or([0; 3]))
}

pub fn gray_to_rgb(g: &LabelMap) -> RgbImage {
    g.map(|v| [v; 3])
}

pub fn heat_to_rgb(h: &Heatmap) -> RgbImage {
    h.map(|v| [(v.clamp(0.0, 1.0) * 255.0).round() as u8; 3])
}

/// Looping animated GIF.
pub fn encode_gif(frames: &[RgbImage], delay_ms: u32) -> Result<Vec<u8>> {
    use image::codecs::gif::{GifEncoder, Repeat};
    use image::{Delay, Frame, RgbaImage};
    let mut out = Vec::new();
    {
        let mut enc = GifEncoder::new_with_speed(&mut out, 10);
        let wrap = |source| Error::Image { path: "<gif>".into(), source };
        enc.set_repeat(Repeat::Infinite).map_err(wrap)?;
        for f in frames {
            let rgba = RgbaImage::from_fn(f.width() as u32, f.height() as u32, |x, y| {
                let [r, g, b] = f.get(x as usize, y as usize);
                image::Rgba([r, g, b, 255])
            });
            enc.encode_frame(Frame::from_parts(rgba, 0, 0, Delay::from_numer_denom_ms(delay_ms, 1)))
                .map_err(wrap)?;
        }
    }
    Ok(out)
}

pub fn write_gif(path: &Path, frames: &[RgbImage], delay_ms: u32) -> Result<()> {
    write_atomic(path, &encode_gif(frames, delay_ms)?)
}

/// Columns of the inspection grid, left to right.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridColumn {
    Input,
    Attention,
    Luma,
    MbsPred,
    MbsGt,
    AspInput,
    AspGt,
    AspPred,
    Overlay,
}

impl GridColumn {
    pub const ALL: [GridColumn; 9] = [
        GridColumn::Input,
        GridColumn::Attention,
        GridColumn::Luma,
        GridColumn::MbsPred,
        GridColumn::MbsGt,
        GridColumn::AspInput,
        GridColumn::AspGt,
        GridColumn::AspPred,
        GridColumn::Overlay,
    ];
}

/// Everything shown for one time step.
pub struct GridFrame<'a> {
    pub input: &'a RgbImage,
    pub attention: &'a Heatmap,
    pub luma: &'a LabelMap,
    pub mbs_pred: &'a LabelMap,
    pub mbs_gt: &'a LabelMap,
    /// MBS foreground/background/mixed probabilities as fed to ASP.
    pub asp_input: &'a RgbImage,
    pub asp_gt: &'a LabelMap,
    pub asp_pred: &'a LabelMap,
}

impl GridFrame<'_> {
    pub fn cell(&self, col: GridColumn) -> RgbImage {
        match col {
            GridColumn::Input => self.input.clone(),
            GridColumn::Attention => heat_to_rgb(self.attention),
            GridColumn::Luma => gray_to_rgb(self.luma),
            GridColumn::MbsPred => render_labels(self.mbs_pred, Task::Mbs),
            GridColumn::MbsGt => render_labels(self.mbs_gt, Task::Mbs),
            GridColumn::AspInput => self.asp_input.clone(),
            GridColumn::AspGt => render_labels(self.asp_gt, Task::Asp),
            GridColumn::AspPred => render_labels(self.asp_pred, Task::Asp),
            GridColumn::Overlay => render_overlay(self.input, self.asp_pred, &OverlayStyle::new(Task::Asp)),
        }
    }
}

/// Mixes class colors by probability for one `[K, H, W]` slab; with the MBS
/// slab this shows what ASPnet receives.
pub fn probs_to_rgb(p: &[f32], width: usize, height: usize, task: Task) -> RgbImage {
    let hw = width * height;
    let style = OverlayStyle::new(task);
    Grid::from_fn(width, height, |x, y| {
        let mut acc = [0.0f32; 3];
        for c in 0..task.classes() {
            if let Some(col) = style.color(c as u8) {
                let v = p[c * hw + y * width + x].clamp(0.0, 1.0);
                for i in 0..3 {
                    acc[i] += v * col[i] as f32;
                }
            }
        }
        acc.map(|v| v.round().min(255.0) as u8)
    })
}

/// Lays out equally sized images row by row.
pub fn tile(rows: &[Vec<RgbImage>]) -> RgbImage {
    let Some(first) = rows.iter().flatten().next() else {
        return Grid::new(0, 0, [0; 3]);
    };
    let (h, w) = first.dims();
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = Grid::new(w * cols, h * rows.len(), [0u8; 3]);
    for (r, row) in rows.iter().enumerate() {
        for (c, cell) in row.iter().enumerate() {
            assert_eq!(cell.dims(), (h, w), "tiles differ in size");
            for y in 0..h {
                for x in 0..w {
                    out.set(c * w + x, r * h + y, cell.get(x, y));
                }
            }
        }
    }
    out
}

/// One row per time step, columns in [`GridColumn::ALL`] order.
pub fn render_grid(rows: &[GridFrame<'_>]) -> RgbImage {
    let cells: Vec<Vec<RgbImage>> = rows
        .iter()
        .map(|r| GridColumn::ALL.iter().map(|&c| r.cell(c)).collect())
        .collect();
    tile(&cells)
}

/// Row-normalized confusion heat map: white (0) to blue (1); absent rows gray.
pub fn render_matrix(m: &ConfusionMatrix, cell: usize) -> RgbImage {
    let norm = m.normalized();
    let empty = m.empty_rows();
    let k = m.classes();
    Grid::from_fn(k * cell, k * cell, |x, y| {
        let (r, c) = (y / cell, x / cell);
        if empty.contains(&r) {
            return [160; 3];
        }
        let v = norm[r][c];
        let fade = (255.0 * (1.0 - v)).round() as u8;
        [fade, fade, 255]
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(w: usize, h: usize, v: &[u8]) -> LabelMap {
        Grid::from_vec(w, h, v.to_vec())
    }

    #[test]
    fn hand_counted_matrix() {
        // two micro "scenes"
        let gt_a = labels(3, 1, &[0, 1, 1]);
        let pr_a = labels(3, 1, &[0, 1, 2]);
        let gt_b = labels(2, 2, &[2, 2, 0, 1]);
        let pr_b = labels(2, 2, &[2, 0, 0, 1]);
        let mut m = ConfusionMatrix::new(3);
        m.add_maps(&gt_a, &pr_a);
        m.add_maps(&gt_b, &pr_b);
        assert_eq!(m.counts, vec![vec![2, 0, 0], vec![0, 2, 1], vec![1, 0, 1]]);
        assert_eq!(m.total(), 7);
        assert_eq!(m.recall(1), Some(2.0 / 3.0));
        assert_eq!(m.precision(0), Some(2.0 / 3.0));
        assert_eq!(m.precision(2), Some(0.5));
    }

    #[test]
    fn perfect_and_constant_predictors() {
        let gt = labels(4, 1, &[0, 1, 2, 3]);
        let mut m = ConfusionMatrix::new(4);
        m.add_maps(&gt, &gt);
        for c in 0..4 {
            assert_eq!(m.normalized()[c][c], 1.0);
            assert_eq!(m.precision(c), Some(1.0));
            assert_eq!(m.recall(c), Some(1.0));
        }
        let mut m = ConfusionMatrix::new(4);
        m.add_maps(&gt, &labels(4, 1, &[0; 4]));
        assert_eq!(m.recall(0), Some(1.0));
        assert_eq!((1..4).map(|c| m.recall(c)).collect::<Vec<_>>(), vec![Some(0.0); 3]);
        assert_eq!(m.precision(0), Some(0.25));
        assert!((1..4).all(|c| m.precision(c).is_none()));
    }

    #[test]
    fn empty_rows_are_flagged() {
        let mut m = ConfusionMatrix::new(4);
        m.add_maps(&labels(2, 1, &[0, 1]), &labels(2, 1, &[1, 1]));
        assert_eq!(m.empty_rows(), vec![2, 3]);
        assert_eq!(m.normalized()[3], vec![0.0; 4]);
        assert_eq!(m.recall(3), None);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        let p = Tensor::from_vec(&[3, 1, 3], vec![0.4f32, 0.2, 0.1, 0.4, 0.4, 0.1, 0.2, 0.4, 0.8]);
        assert_eq!(argmax_labels(&p).data(), &[0, 1, 2]);
    }

    fn report(name: &str, recall: Vec<Option<f64>>, hash: &str) -> EvalReport {
        EvalReport {
            name: name.into(),
            task: Task::Asp,
            split: Split::Test,
            dataset_hash: hash.into(),
            model_hash: String::new(),
            scenes: 1,
            frames: 1,
            matrix: ConfusionMatrix::new(3),
            normalized: vec![vec![0.0; 3]; 3],
            empty_rows: vec![],
            precision: vec![Some(0.5), None, Some(0.25)],
            recall,
            asp: None,
        }
    }

    #[test]
    fn comparison_deltas_and_csv() {
        let a = report("a", vec![Some(0.9), Some(0.5), None], "h");
        let b = report("b", vec![Some(0.8), Some(0.75), Some(0.1)], "h");
        let t = compare_models(&[a.clone(), a.clone()]).unwrap();
        assert!(t.rows[1].recall_delta.iter().flatten().all(|&d| d == 0.0));
        let t = compare_models(&[a.clone(), b]).unwrap();
        assert_eq!(t.rows[1].recall_delta, vec![Some(0.8 - 0.9), Some(0.25), None]);
        let csv = t.to_csv();
        let mut rd = csv::Reader::from_reader(csv.as_bytes());
        assert_eq!(rd.headers().unwrap().len(), 1 + 4 * 3);
        let rows: Vec<csv::StringRecord> = rd.records().map(|r| r.unwrap()).collect();
        assert_eq!(&rows[1][0], "b");
        assert_eq!(&rows[1][6], "0.750000");
        assert_eq!(&rows[0][10], "");
        let c = report("c", vec![None; 3], "other");
        assert!(matches!(compare_models(&[a.clone(), c]), Err(Error::MismatchedSplits(_))));
        assert!(compare_models(&[a]).is_err());
    }

    #[test]
    fn overlay_tints_only_labelled_pixels() {
        let frame = Grid::from_fn(3, 2, |x, y| [(x * 40) as u8, (y * 90) as u8, 7]);
        let style = OverlayStyle::new(Task::Mbs);
        assert_eq!(render_overlay(&frame, &Grid::new(3, 2, 0), &style), frame);
        let mut l = Grid::new(3, 2, 0u8);
        l.set(1, 1, 3);
        let o = render_overlay(&frame, &l, &style);
        for y in 0..2 {
            for x in 0..3 {
                if (x, y) == (1, 1) {
                    let px = frame.get(1, 1);
                    let want: [u8; 3] = std::array::from_fn(|i| (0.4 * px[i] as f64 + 0.6 * GREEN[i] as f64).round() as u8);
                    assert_eq!(o.get(x, y), want);
                } else {
                    assert_eq!(o.get(x, y), frame.get(x, y));
                }
            }
        }
        assert_eq!(OverlayStyle::new(Task::Asp).color(3), None);
    }

    #[test]
    fn gif_decodes_with_all_frames() {
        use image::AnimationDecoder;
        let frames: Vec<RgbImage> = (0..3).map(|i| Grid::new(4, 4, [i * 80, 0, 0])).collect();
        let bytes = encode_gif(&frames, 100).unwrap();
        assert_eq!(bytes, encode_gif(&frames, 100).unwrap());
        let dec = image::codecs::gif::GifDecoder::new(std::io::Cursor::new(bytes)).unwrap();
        assert_eq!(dec.into_frames().count(), 3);
    }

    #[test]
    fn grid_columns_in_order() {
        let input = Grid::new(2, 2, [9u8, 9, 9]);
        let att = Grid::new(2, 2, 1.0f32);
        let luma = Grid::new(2, 2, 50u8);
        let zero = Grid::new(2, 2, 0u8);
        let one = Grid::new(2, 2, 1u8);
        let two = Grid::new(2, 2, 2u8);
        let asp_in = Grid::new(2, 2, [1u8, 2, 3]);
        let row = GridFrame {
            input: &input,
            attention: &att,
            luma: &luma,
            mbs_pred: &one,
            mbs_gt: &two,
            asp_input: &asp_in,
            asp_gt: &zero,
            asp_pred: &one,
        };
        let g = render_grid(&[row]);
        assert_eq!(g.dims(), (2, 18));
        let at = |c: usize| g.get(c * 2, 0);
        assert_eq!(at(0), [9, 9, 9]);
        assert_eq!(at(1), [255; 3]);
        assert_eq!(at(2), [50; 3]);
        assert_eq!(at(3), BLUE);
        assert_eq!(at(4), RED);
        assert_eq!(at(5), [1, 2, 3]);
        assert_eq!(at(6), [0; 3]);
        assert_eq!(at(7), BLUE);
        assert_eq!(at(8), [4, 4, 157]);
    }

    #[test]
    fn probability_colors() {
        // 1x1 MBS slab: half foreground, half mixed
        let img = probs_to_rgb(&[0.0, 0.5, 0.0, 0.5], 1, 1, Task::Mbs);
        assert_eq!(img.get(0, 0), [0, 128, 128]);
    }

    #[test]
    fn matrix_png_colors() {
        let mut m = ConfusionMatrix::new(3);
        m.add_maps(&labels(2, 1, &[0, 1]), &labels(2, 1, &[0, 1]));
        let img = render_matrix(&m, 4);
        assert_eq!(img.dims(), (12, 12));
        assert_eq!(img.get(0, 0), [0, 0, 255]);
        assert_eq!(img.get(4, 0), [255, 255, 255]);
        assert_eq!(img.get(0, 8), [160; 3]);
    }
}
