//! Scene directories, dataset manifests and external frame ingestion.
//!
//! A scene directory holds:
//!
//! ```text
//! scene.json              canonical SceneSpec
//! attention.json          attention mode per layer
//! frames/0000.png ...     RGB frames
//! luma/0000.png ...       8-bit luma
//! mbs_gt/0000.png ...     MBS class ids 0..=3
//! asp_gt/<layer>/...      ASP class ids 0..=2 per target layer
//! attention/<layer>/...   heat * 255, rounded
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::{GrayImage, ImageBuffer, Rgb};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{sample_attention, AttentionConfig, AttentionMode, AttentionSequence};
use crate::error::{Error, Result};
use crate::groundtruth::{all_labels, AspLabelSequence, MbsLabelSequence, ASP_CLASSES, MBS_CLASSES};
use crate::raster::{Grid, Heatmap, LabelMap, RgbImage};
use crate::scenegen::{luma_of, render_frames, sample_scene, FrameSequence, GenConfig, SceneSpec, ShapeLibrary, GENERATOR_VERSION};
use crate::seed;

/// Everything stored for one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneRecord {
    pub spec: SceneSpec,
    pub frames: FrameSequence,
    pub mbs: MbsLabelSequence,
    /// One per layer, in layer order.
    pub asp: Vec<AspLabelSequence>,
    /// One per layer, quantized to the stored 8-bit precision.
    pub attention: Vec<AttentionSequence>,
}

/// Rounds heat to the 1/255 grid used on disk.
pub fn quantize_heat(h: &Heatmap) -> Heatmap {
    h.map(|v| heat_to_byte(v) as f32 / 255.0)
}

fn heat_to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

impl SceneRecord {
    /// Renders frames and computes all labels and attention for `spec`.
    pub fn build(spec: SceneSpec, attention: &AttentionConfig) -> Result<Self> {
        let frames = render_frames(&spec)?;
        let (mbs, asp) = all_labels(&spec);
        let attention = (0..spec.layers.len())
            .map(|layer| {
                let mut a = sample_attention(&spec, layer, attention, seed::derive(spec.seed, 0xA77E_0000 + layer as u64))?;
                a.heat = a.heat.iter().map(quantize_heat).collect();
                Ok(a)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SceneRecord {
            spec,
            frames,
            mbs,
            asp,
            attention,
        })
    }

    /// SHA-256 over the canonical spec and every stored raster.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.spec.to_canonical_json().as_bytes());
        for f in &self.frames.rgb {
            for px in f.data() {
                h.update(px);
            }
        }
        for g in self.frames.luma.iter().chain(&self.mbs.labels).chain(self.asp.iter().flat_map(|a| &a.labels)) {
            h.update(g.data());
        }
        for a in &self.attention {
            for f in &a.heat {
                h.update(f.data().iter().map(|&v| heat_to_byte(v)).collect::<Vec<_>>());
            }
        }
        hex::encode(h.finalize())
    }

    /// Whether re-rendering the scene description reproduces the stored frames byte for byte.
    pub fn regenerates(&self) -> Result<bool> {
        Ok(render_frames(&self.spec)? == self.frames)
    }
}

fn frame_name(t: usize) -> String {
    format!("{t:04}.png")
}

fn ensure_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

pub fn write_rgb_png(path: &Path, img: &RgbImage) -> Result<()> {
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_raw(
        img.width() as u32,
        img.height() as u32,
        img.data().iter().flatten().copied().collect(),
    )
    .expect("buffer matches dimensions");
    buf.save(path).map_err(|source| Error::Image { path: path.into(), source })
}

pub fn write_gray_png(path: &Path, img: &LabelMap) -> Result<()> {
    let buf = GrayImage::from_raw(img.width() as u32, img.height() as u32, img.data().to_vec()).expect("buffer matches dimensions");
    buf.save(path).map_err(|source| Error::Image { path: path.into(), source })
}

pub fn write_heat_png(path: &Path, heat: &Heatmap) -> Result<()> {
    write_gray_png(path, &heat.map(heat_to_byte))
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(Error::MissingArtifact { path: path.into() });
    }
    image::open(path).map_err(|source| Error::Image { path: path.into(), source })
}

pub fn read_rgb_png(path: &Path) -> Result<RgbImage> {
    let img = open_image(path)?.into_rgb8();
    let (w, h) = img.dimensions();
    Ok(Grid::from_vec(w as usize, h as usize, img.pixels().map(|p| p.0).collect()))
}

pub fn read_gray_png(path: &Path) -> Result<LabelMap> {
    let img = open_image(path)?;
    if img.color() != image::ColorType::L8 {
        return Err(Error::InvalidData {
            path: path.into(),
            reason: format!("expected 8-bit grayscale, found {:?}", img.color()),
        });
    }
    let img = img.into_luma8();
    let (w, h) = img.dimensions();
    Ok(Grid::from_vec(w as usize, h as usize, img.into_raw()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact { path: path.into() },
        _ => Error::io(path, e),
    })?;
    serde_json::from_str(&text).map_err(|source| Error::Json { path: path.into(), source })
}

/// Writes via a temporary sibling and a rename so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Serialize, Deserialize)]
struct AttentionIndex {
    modes: Vec<AttentionMode>,
}

pub fn write_scene(dir: &Path, record: &SceneRecord) -> Result<()> {
    let t_count = record.spec.frames;
    for sub in ["frames", "luma", "mbs_gt", "asp_gt", "attention"] {
        ensure_dir(&dir.join(sub))?;
    }
    write_atomic(&dir.join("scene.json"), record.spec.to_canonical_json().as_bytes())?;
    let index = AttentionIndex {
        modes: record.attention.iter().map(|a| a.mode).collect(),
    };
    write_atomic(&dir.join("attention.json"), serde_json::to_string_pretty(&index).unwrap().as_bytes())?;
    for t in 0..t_count {
        write_rgb_png(&dir.join("frames").join(frame_name(t)), &record.frames.rgb[t])?;
        write_gray_png(&dir.join("luma").join(frame_name(t)), &record.frames.luma[t])?;
        write_gray_png(&dir.join("mbs_gt").join(frame_name(t)), &record.mbs.labels[t])?;
    }
    for (layer, (asp, att)) in record.asp.iter().zip(&record.attention).enumerate() {
        let asp_dir = dir.join("asp_gt").join(layer.to_string());
        let att_dir = dir.join("attention").join(layer.to_string());
        ensure_dir(&asp_dir)?;
        ensure_dir(&att_dir)?;
        for t in 0..t_count {
            write_gray_png(&asp_dir.join(frame_name(t)), &asp.labels[t])?;
            write_heat_png(&att_dir.join(frame_name(t)), &att.heat[t])?;
        }
    }
    Ok(())
}

fn check_size(path: &Path, got: (usize, usize), want: (usize, usize)) -> Result<()> {
    if got != want {
        return Err(Error::InvalidData {
            path: path.into(),
            reason: format!("size {}x{} differs from scene size {}x{}", got.1, got.0, want.1, want.0),
        });
    }
    Ok(())
}

fn read_labels(dir: &Path, frames: usize, size: (usize, usize), classes: usize) -> Result<Vec<LabelMap>> {
    (0..frames)
        .map(|t| {
            let path = dir.join(frame_name(t));
            let l = read_gray_png(&path)?;
            check_size(&path, l.dims(), size)?;
            if let Some(&bad) = l.data().iter().find(|&&v| v as usize >= classes) {
                return Err(Error::InvalidData {
                    path,
                    reason: format!("class id {bad} outside 0..{classes}"),
                });
            }
            Ok(l)
        })
        .collect()
}

/// Loads and validates a scene directory written by [`write_scene`].
pub fn read_scene(dir: &Path) -> Result<SceneRecord> {
    if !dir.is_dir() {
        return Err(Error::MissingArtifact { path: dir.into() });
    }
    let spec_path = dir.join("scene.json");
    let spec: SceneSpec = read_json(&spec_path)?;
    spec.validate().map_err(|e| Error::InvalidData {
        path: spec_path.clone(),
        reason: e.to_string(),
    })?;
    let index: AttentionIndex = read_json(&dir.join("attention.json"))?;
    let layers = spec.layers.len();
    if index.modes.len() != layers {
        return Err(Error::InvalidData {
            path: dir.join("attention.json"),
            reason: format!("{} attention modes for {layers} layers", index.modes.len()),
        });
    }
    let size = spec.size();
    let mut rgb = Vec::with_capacity(spec.frames);
    let mut luma = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let path = dir.join("frames").join(frame_name(t));
        let f = read_rgb_png(&path)?;
        check_size(&path, f.dims(), size)?;
        let lpath = dir.join("luma").join(frame_name(t));
        let l = read_gray_png(&lpath)?;
        if l != luma_of(&f) {
            return Err(Error::InvalidData {
                path: lpath,
                reason: "luma does not match its RGB frame".into(),
            });
        }
        rgb.push(f);
        luma.push(l);
    }
    let mbs = MbsLabelSequence {
        labels: read_labels(&dir.join("mbs_gt"), spec.frames, size, MBS_CLASSES)?,
    };
    let mut asp = Vec::with_capacity(layers);
    let mut attention = Vec::with_capacity(layers);
    for (layer, mode) in index.modes.into_iter().enumerate() {
        asp.push(AspLabelSequence {
            target_layer: layer,
            labels: read_labels(&dir.join("asp_gt").join(layer.to_string()), spec.frames, size, ASP_CLASSES)?,
        });
        let heat = read_labels(&dir.join("attention").join(layer.to_string()), spec.frames, size, 256)?
            .iter()
            .map(|g| g.map(|v| v as f32 / 255.0))
            .collect();
        attention.push(AttentionSequence {
            heat,
            mode,
            target_layer: layer,
        });
    }
    Ok(SceneRecord {
        spec,
        frames: FrameSequence { rgb, luma },
        mbs,
        asp,
        attention,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub generation: GenConfig,
    pub counts: SplitCounts,
    pub attention: AttentionConfig,
    /// Per-split overrides of the blur probability, e.g. a blur-free training
    /// split for ablations.
    pub blur_prob: BTreeMap<Split, f64>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            generation: GenConfig::default(),
            counts: SplitCounts {
                train: 15000,
                val: 1000,
                test: 200,
            },
            attention: AttentionConfig::default(),
            blur_prob: BTreeMap::new(),
        }
    }
}

impl DatasetConfig {
    /// 500/50/50 scenes of 64x64.
    pub fn desk() -> Self {
        DatasetConfig {
            generation: GenConfig::desk(),
            counts: SplitCounts {
                train: 500,
                val: 50,
                test: 50,
            },
            ..DatasetConfig::default()
        }
    }

    pub fn generation_for(&self, split: Split) -> GenConfig {
        let mut g = self.generation.clone();
        if let Some(&p) = self.blur_prob.get(&split) {
            g.blur_prob = p;
        }
        g
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub id: String,
    pub seed: u64,
    pub hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub generator_version: String,
    pub global_seed: u64,
    pub config: DatasetConfig,
    pub splits: BTreeMap<Split, Vec<SceneEntry>>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> &[SceneEntry] {
        self.splits.get(&split).map(Vec::as_slice).unwrap_or(&[])
    }

    /// SHA-256 over the canonical manifest JSON.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_canonical_json().as_bytes()))
    }

    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_canonical_json().as_bytes())
    }
}

/// Distinct scene seeds for every split, drawn from one stream so splits are
/// disjoint by construction.
pub fn split_seeds(global_seed: u64, counts: &SplitCounts) -> BTreeMap<Split, Vec<u64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(global_seed);
    let mut seen = HashSet::new();
    let mut out = BTreeMap::new();
    for split in Split::ALL {
        let mut seeds = Vec::with_capacity(counts.get(split));
        while seeds.len() < counts.get(split) {
            let s: u64 = rng.random();
            if seen.insert(s) {
                seeds.push(s);
            }
        }
        out.insert(split, seeds);
    }
    out
}

fn scene_id(split: Split, i: usize) -> String {
    format!("{}-{i:05}", split.name())
}

/// Source of scene records addressed through a manifest.
pub trait SceneStore: Sync {
    fn manifest(&self) -> &DatasetManifest;
    fn load(&self, entry: &SceneEntry) -> Result<Arc<SceneRecord>>;
}

/// Scenes kept in memory, as produced by [`build_dataset_in_memory`].
pub struct MemoryStore {
    manifest: DatasetManifest,
    records: BTreeMap<String, Arc<SceneRecord>>,
}

impl MemoryStore {
    pub fn from_records(manifest: DatasetManifest, records: impl IntoIterator<Item = (String, SceneRecord)>) -> Self {
        MemoryStore {
            manifest,
            records: records.into_iter().map(|(k, v)| (k, Arc::new(v))).collect(),
        }
    }
}

impl SceneStore for MemoryStore {
    fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    fn load(&self, entry: &SceneEntry) -> Result<Arc<SceneRecord>> {
        self.records.get(&entry.id).cloned().ok_or_else(|| Error::MissingArtifact {
            path: PathBuf::from(&entry.id),
        })
    }
}

/// Scenes read from `<root>/scenes/<id>/` on demand.
pub struct DiskStore {
    root: PathBuf,
    manifest: DatasetManifest,
}

impl DiskStore {
    /// Opens `<root>/manifest.json`.
    pub fn open(root: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(&root.join("manifest.json"))?;
        Ok(DiskStore {
            root: root.into(),
            manifest,
        })
    }

    pub fn scene_dir(&self, entry: &SceneEntry) -> PathBuf {
        self.root.join("scenes").join(&entry.id)
    }
}

impl SceneStore for DiskStore {
    fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    fn load(&self, entry: &SceneEntry) -> Result<Arc<SceneRecord>> {
        read_scene(&self.scene_dir(entry))
            .map(Arc::new)
            .map_err(|e| Error::Scene {
                scene: entry.id.clone(),
                source: Box::new(e),
            })
    }
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
}

fn generate_all(
    config: &DatasetConfig,
    global_seed: u64,
    jobs: usize,
    sink: impl Fn(&str, SceneRecord) -> Result<Option<SceneRecord>> + Sync,
) -> Result<(DatasetManifest, Vec<(String, SceneRecord)>)> {
    config.generation.validate()?;
    let library = ShapeLibrary::from_config(&config.generation)?;
    let seeds = split_seeds(global_seed, &config.counts);
    let pool = pool(jobs)?;
    let mut splits = BTreeMap::new();
    let mut kept = Vec::new();
    for split in Split::ALL {
        let gen = config.generation_for(split);
        let results: Vec<Result<(SceneEntry, Option<SceneRecord>)>> = pool.install(|| {
            seeds[&split]
                .par_iter()
                .enumerate()
                .map(|(i, &s)| {
                    let id = scene_id(split, i);
                    let wrap = |e: Error| Error::Scene {
                        scene: id.clone(),
                        source: Box::new(e),
                    };
                    let spec = sample_scene(s, &gen, &library).map_err(wrap)?;
                    let record = SceneRecord::build(spec, &config.attention).map_err(wrap)?;
                    let entry = SceneEntry {
                        id: id.clone(),
                        seed: s,
                        hash: record.hash(),
                    };
                    Ok((entry, sink(&id, record).map_err(wrap)?))
                })
                .collect()
        });
        let mut entries = Vec::with_capacity(results.len());
        for r in results {
            let (entry, record) = r?;
            if let Some(record) = record {
                kept.push((entry.id.clone(), record));
            }
            entries.push(entry);
        }
        splits.insert(split, entries);
    }
    let manifest = DatasetManifest {
        generator_version: GENERATOR_VERSION.to_string(),
        global_seed,
        config: config.clone(),
        splits,
    };
    Ok((manifest, kept))
}

/// Generates every split and writes scenes plus `manifest.json` under `out`.
pub fn build_dataset(config: &DatasetConfig, global_seed: u64, out: &Path, jobs: usize) -> Result<DatasetManifest> {
    let scenes = out.join("scenes");
    ensure_dir(&scenes)?;
    let (manifest, _) = generate_all(config, global_seed, jobs, |id, record| {
        write_scene(&scenes.join(id), &record)?;
        Ok(None)
    })?;
    manifest.save(&out.join("manifest.json"))?;
    Ok(manifest)
}

/// Same scenes and manifest as [`build_dataset`], kept in memory.
pub fn build_dataset_in_memory(config: &DatasetConfig, global_seed: u64, jobs: usize) -> Result<MemoryStore> {
    let (manifest, records) = generate_all(config, global_seed, jobs, |_, r| Ok(Some(r)))?;
    Ok(MemoryStore::from_records(manifest, records))
}

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Loads every image in `dir` in lexicographic file-name order.
pub fn load_frame_dir(dir: &Path) -> Result<FrameSequence> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.extension()
                .and_then(|x| x.to_str())
                .is_some_and(|x| IMAGE_EXTENSIONS.iter().any(|e| x.eq_ignore_ascii_case(e)))
        })
        .collect();
    files.sort();
    let frames = files.iter().map(|f| read_rgb_png(f)).collect::<Result<Vec<_>>>()?;
    if let Some(first) = frames.first() {
        let offending: Vec<PathBuf> = files
            .iter()
            .zip(&frames)
            .filter(|(_, f)| f.dims() != first.dims())
            .map(|(p, _)| p.clone())
            .collect();
        if !offending.is_empty() {
            return Err(Error::InconsistentFrames { files: offending });
        }
    }
    Ok(FrameSequence::from_rgb(frames))
}

/// Sliding windows of `window` frames whose starts are `stride` apart.
pub fn ingest_external_frames(dir: &Path, stride: usize, window: usize) -> Result<Vec<FrameSequence>> {
    if stride == 0 || window == 0 {
        return Err(Error::Config("stride and window must be positive".into()));
    }
    let seq = load_frame_dir(dir)?;
    windows(&seq, stride, window)
}

pub fn windows(seq: &FrameSequence, stride: usize, window: usize) -> Result<Vec<FrameSequence>> {
    if seq.len() < window {
        return Err(Error::InsufficientFrames {
            needed: window,
            found: seq.len(),
        });
    }
    Ok((0..=seq.len() - window)
        .step_by(stride)
        .map(|s| FrameSequence {
            rgb: seq.rgb[s..s + window].to_vec(),
            luma: seq.luma[s..s + window].to_vec(),
        })
        .collect())
}

/// Crops each frame centrally so both sides are multiples of `m`.
pub fn crop_to_multiple(seq: &FrameSequence, m: usize) -> FrameSequence {
    let (h, w) = seq.size();
    let (nh, nw) = (h / m * m, w / m * m);
    let (oy, ox) = ((h - nh) / 2, (w - nw) / 2);
    FrameSequence::from_rgb(
        seq.rgb
            .iter()
            .map(|f| Grid::from_fn(nw, nh, |x, y| f.get(x + ox, y + oy)))
            .collect(),
    )
}
