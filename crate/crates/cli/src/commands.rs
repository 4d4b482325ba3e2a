use std::path::{Path, PathBuf};

use objectness::attention::{AttentionConfig, AttentionMode};
use objectness::datasetio::{
    build_dataset, crop_to_multiple, ingest_external_frames, load_frame_dir, read_scene, write_gray_png, write_rgb_png,
    DatasetConfig, DiskStore, SceneRecord, Split,
};
use objectness::evaluation::{
    argmax_sequence, asp_output_offset, compare_models, eval_attention, evaluate_asp, evaluate_mbs, heat_to_rgb,
    predict_asp, probs_to_rgb, render_grid, render_matrix, render_overlay, render_overlay_sequence, tile, write_gif,
    AspEvalConfig, GridFrame, OverlayStyle, Task,
};
use objectness::network::{frames_to_tensor, predict_sequence, ModelBundle, ASP_INPUT_CHANNELS};
use objectness::scenegen::FrameSequence;
use objectness::training::{mbs_predictions, train_aspnet, train_mbsnet, TrainConfig};
use objectness::{Error, LabelMap, Result, RgbImage};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::manifest::RunManifest;
use crate::{Cli, Command, DemoArgs, EvalArgs, GenerateArgs, IngestArgs, PredictArgs, RenderArgs, TrainArgs};

const GIF_DELAY_MS: u32 = 150;

pub fn run(cli: Cli) -> Result<()> {
    let jobs = match cli.jobs {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    };
    match cli.command {
        Command::Generate(a) => generate(a, jobs),
        Command::TrainMbs(a) => train(a, false),
        Command::TrainAsp(a) => train(a, true),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Ingest(a) => ingest(a),
        Command::Render(a) => render(a),
        Command::DemoMultiobject(a) => demo(a),
    }
}

fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Config(format!("config file {} not found", path.display())),
        _ => Error::Io { path: path.into(), source: e },
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Prints the resolved configuration and returns it as JSON for the manifest.
fn echo<T: Serialize>(what: &str, cfg: &T) -> serde_json::Value {
    let v = serde_json::to_value(cfg).expect("config serializes");
    eprintln!("{what}: {}", serde_json::to_string_pretty(&v).expect("json"));
    v
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::Io { path: p.into(), source: e })
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    objectness::datasetio::write_atomic(path, serde_json::to_string_pretty(v).expect("json").as_bytes())
}

fn generate(a: GenerateArgs, jobs: usize) -> Result<()> {
    let cfg: DatasetConfig = match &a.common.config {
        Some(p) => load_config(p)?,
        None if a.desk => DatasetConfig::desk(),
        None => DatasetConfig::default(),
    };
    let seed = a.common.seed.unwrap_or(0);
    let mut run = RunManifest::new("generate", Some(seed), echo("dataset config", &cfg));
    if let Some(p) = &a.common.config {
        run.input("config", p)?;
    }
    let m = build_dataset(&cfg, seed, &a.common.out, jobs)?;
    for s in Split::ALL {
        println!("{}: {} scenes", s.name(), m.split(s).len());
    }
    println!("manifest hash {}", m.hash());
    run.finish(&a.common.out)
}

fn load_model(path: &Path) -> Result<ModelBundle> {
    ModelBundle::load(path)
}

fn train(a: TrainArgs, asp: bool) -> Result<()> {
    let name = if asp { "train-asp" } else { "train-mbs" };
    let mut cfg: TrainConfig = match &a.common.config {
        Some(p) => load_config(p)?,
        None if asp => TrainConfig::asp(),
        None => TrainConfig::mbs(),
    };
    if a.desk {
        cfg = cfg.desk();
    }
    if let Some(s) = a.common.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.norm {
        cfg.net.norm = n.into();
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if a.max_steps.is_some() {
        cfg.max_steps = a.max_steps;
    }
    if let Some(m) = a.attention_mode {
        if !asp {
            return Err(Error::Config("--attention-mode applies to train-asp only".into()));
        }
        cfg.attention = AttentionConfig {
            jitter: cfg.attention.jitter,
            ..AttentionConfig::pinned(m.into())
        };
    }
    match (asp, &a.frozen_mbs) {
        (true, None) => return Err(Error::Config("train-asp needs --frozen-mbs".into())),
        (false, Some(_)) => return Err(Error::Config("--frozen-mbs applies to train-asp only".into())),
        _ => {}
    }
    cfg.validate()?;
    let mut run = RunManifest::new(name, Some(cfg.seed), echo("training config", &cfg));
    let store = DiskStore::open(&a.data)?;
    run.input("data", &a.data)?;
    let outcome = match &a.frozen_mbs {
        Some(path) => {
            run.input("frozen_mbs", path)?;
            let frozen = load_model(path)?;
            train_aspnet(&store, &frozen, &cfg, Some(&a.common.out))?
        }
        None => train_mbsnet(&store, &cfg, Some(&a.common.out))?,
    };
    if let Some(last) = outcome.log.last() {
        println!("{} steps, final loss {:.5}", last.step + 1, last.loss);
    }
    for c in &outcome.checkpoints {
        println!("wrote {}", c.display());
    }
    run.finish(&a.common.out)
}

fn report_name(path: &Path, i: usize, all: &[PathBuf]) -> String {
    let stem = path.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned());
    let clash = all.iter().filter(|p| p.file_stem() == path.file_stem()).count() > 1;
    if clash {
        format!("{i}_{stem}")
    } else {
        stem
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    let task: Task = a.task.into();
    let split: Split = a.split.into();
    let asp_cfg = AspEvalConfig {
        mode: a.attention_mode.map(Into::into),
        all_layers: true,
        seed: a.common.seed.unwrap_or(0),
    };
    let config = serde_json::json!({ "task": task, "split": split, "asp": asp_cfg });
    let mut run = RunManifest::new("eval", a.common.seed, echo("evaluation config", &config));
    let store = DiskStore::open(&a.data)?;
    run.input("data", &a.data)?;
    let frozen = match (task, &a.frozen_mbs) {
        (Task::Asp, Some(p)) => {
            run.input("frozen_mbs", p)?;
            Some(load_model(p)?)
        }
        (Task::Asp, None) => return Err(Error::Config("ASP evaluation needs --frozen-mbs".into())),
        (Task::Mbs, _) => None,
    };
    create_dir(&a.common.out)?;
    let mut reports = Vec::new();
    for (i, path) in a.model.iter().enumerate() {
        run.input("model", path)?;
        let model = load_model(path)?;
        let name = report_name(path, i, &a.model);
        let r = match &frozen {
            Some(mbs) => evaluate_asp(&name, &model, mbs, &store, split, &asp_cfg)?,
            None => evaluate_mbs(&name, &model, &store, split)?,
        };
        println!("{name}: recall {} precision {}", fmt_metrics(&r.recall), fmt_metrics(&r.precision));
        r.save(&a.common.out.join(format!("{name}_report.json")))?;
        write_rgb_png(&a.common.out.join(format!("{name}_matrix.png")), &render_matrix(&r.matrix, 32))?;
        reports.push(r);
    }
    if reports.len() >= 2 {
        let table = compare_models(&reports)?;
        objectness::datasetio::write_atomic(&a.common.out.join("ablation.csv"), table.to_csv().as_bytes())?;
        write_json(&a.common.out.join("ablation.json"), &table)?;
    }
    run.finish(&a.common.out)
}

fn fmt_metrics(v: &[Option<f64>]) -> String {
    let parts: Vec<String> = v.iter().map(|x| x.map_or("-".into(), |x| format!("{x:.3}"))).collect();
    format!("[{}]", parts.join(", "))
}

/// Writes raw class-index PNGs, colored overlays and a GIF for a run of
/// predictions whose first frame is scene frame `first`.
fn write_predictions(out: &Path, tag: &str, frames: &[RgbImage], first: usize, labels: &[LabelMap], task: Task) -> Result<()> {
    let raw = out.join(tag);
    let over = out.join(format!("{tag}_overlay"));
    create_dir(&raw)?;
    create_dir(&over)?;
    let overlays = render_overlay_sequence(&frames[first..first + labels.len()], labels, &OverlayStyle::new(task));
    for (i, (l, o)) in labels.iter().zip(&overlays).enumerate() {
        let name = format!("{:04}.png", first + i);
        write_gray_png(&raw.join(&name), l)?;
        write_rgb_png(&over.join(&name), o)?;
    }
    write_gif(&out.join(format!("{tag}.gif")), &overlays, GIF_DELAY_MS)
}

fn is_asp(model: &ModelBundle) -> bool {
    model.config.in_channels == ASP_INPUT_CHANNELS
}

fn predict(a: PredictArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let config = serde_json::json!({
        "net": model.config,
        "layer": a.layer,
        "attention_mode": a.attention_mode.map(AttentionMode::from),
    });
    let mut run = RunManifest::new("predict", a.common.seed, echo("predict config", &config));
    run.input("model", &a.model)?;
    let out = &a.common.out;
    create_dir(out)?;
    let (frames, record) = match (&a.scene, &a.frames) {
        (Some(dir), _) => {
            run.input("scene", dir)?;
            let r = read_scene(dir)?;
            (r.frames.clone(), Some(r))
        }
        (None, Some(dir)) => {
            run.input("frames", dir)?;
            let seq = load_frame_dir(dir)?;
            (crop_to_multiple(&seq, model.config.spatial_multiple()), None)
        }
        (None, None) => return Err(Error::Config("give --scene or --frames".into())),
    };
    if !is_asp(&model) {
        let pred = predict_sequence(&model, &frames_to_tensor(&frames))?;
        let labels = argmax_sequence(&pred);
        write_predictions(out, "mbs", &frames.rgb, model.config.temporal_window / 2, &labels, Task::Mbs)?;
        println!("{} MBS frames", labels.len());
        return run.finish(out);
    }
    let record = record.ok_or_else(|| Error::Config("ASPnet prediction needs --scene (attention comes from the scene)".into()))?;
    let path = a
        .frozen_mbs
        .as_deref()
        .ok_or_else(|| Error::Config("ASPnet prediction needs --frozen-mbs".into()))?;
    run.input("frozen_mbs", path)?;
    let mbs = load_model(path)?;
    let mbs_pred = mbs_predictions(&mbs, &record)?;
    let mbs_labels = argmax_sequence(&mbs_pred);
    write_predictions(out, "mbs", &frames.rgb, mbs.config.temporal_window / 2, &mbs_labels, Task::Mbs)?;
    let asp_labels = asp_for_layer(&model, &mbs, &mbs_pred, &record, a.layer, a.attention_mode.map(Into::into))?;
    write_predictions(out, "asp", &frames.rgb, asp_output_offset(&mbs, &model), &asp_labels, Task::Asp)?;
    println!("{} MBS frames, {} ASP frames", mbs_labels.len(), asp_labels.len());
    run.finish(out)
}

fn asp_eval_cfg(mode: Option<AttentionMode>) -> AspEvalConfig {
    AspEvalConfig {
        mode,
        ..AspEvalConfig::default()
    }
}

fn asp_for_layer(
    asp: &ModelBundle,
    mbs: &ModelBundle,
    mbs_pred: &objectness::network::Tensor<f32>,
    record: &SceneRecord,
    layer: usize,
    mode: Option<AttentionMode>,
) -> Result<Vec<LabelMap>> {
    let att = eval_attention(record, layer, &asp_eval_cfg(mode))?;
    Ok(argmax_sequence(&predict_asp(asp, mbs_pred, mbs.config.temporal_window, record, &att)?))
}

fn ingest(a: IngestArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    if is_asp(&model) {
        return Err(Error::Config("ingest runs MBSnet; got an ASPnet checkpoint".into()));
    }
    let w = model.config.temporal_window;
    if a.window < w {
        return Err(Error::Config(format!("--window must be at least the network window {w}")));
    }
    let stride = a.stride.unwrap_or(a.window + 1 - w);
    let config = serde_json::json!({ "window": a.window, "stride": stride, "net": model.config });
    let mut run = RunManifest::new("ingest", None, echo("ingest config", &config));
    run.input("frames", &a.frames)?;
    run.input("model", &a.model)?;
    let windows = ingest_external_frames(&a.frames, stride, a.window)?;
    for (i, win) in windows.iter().enumerate() {
        let win: FrameSequence = crop_to_multiple(win, model.config.spatial_multiple());
        let labels = argmax_sequence(&predict_sequence(&model, &frames_to_tensor(&win))?);
        // frames named by their index in the input video
        let start = i * stride;
        let mut padded = vec![win.rgb[0].clone(); start];
        padded.extend(win.rgb.iter().cloned());
        write_predictions(&a.common.out.join(format!("window_{i:03}")), "mbs", &padded, start + w / 2, &labels, Task::Mbs)?;
    }
    println!("{} windows", windows.len());
    run.finish(&a.common.out)
}

fn render(a: RenderArgs) -> Result<()> {
    let record = read_scene(&a.scene)?;
    let config = serde_json::json!({ "layer": a.layer, "attention_mode": a.attention_mode.map(AttentionMode::from) });
    let mut run = RunManifest::new("render", None, echo("render config", &config));
    run.input("scene", &a.scene)?;
    let out = &a.common.out;
    create_dir(out)?;
    let rgb = &record.frames.rgb;
    write_predictions(out, "mbs_gt", rgb, 0, &record.mbs.labels, Task::Mbs)?;
    for (k, seq) in record.asp.iter().enumerate() {
        write_predictions(out, &format!("asp_gt_layer{k}"), rgb, 0, &seq.labels, Task::Asp)?;
    }
    if let (Some(asp_path), Some(mbs_path)) = (&a.model, &a.frozen_mbs) {
        run.input("model", asp_path)?;
        run.input("frozen_mbs", mbs_path)?;
        let asp = load_model(asp_path)?;
        let mbs = load_model(mbs_path)?;
        let mode = a.attention_mode.map(Into::into);
        let att = eval_attention(&record, a.layer, &asp_eval_cfg(mode))?;
        let mbs_pred = mbs_predictions(&mbs, &record)?;
        let mbs_labels = argmax_sequence(&mbs_pred);
        let asp_labels = argmax_sequence(&predict_asp(&asp, &mbs_pred, mbs.config.temporal_window, &record, &att)?);
        let mbs_off = mbs.config.temporal_window / 2;
        let asp_off = asp_output_offset(&mbs, &asp);
        let (h, w) = record.frames.size();
        let asp_inputs: Vec<RgbImage> = (0..asp_labels.len())
            .map(|i| probs_to_rgb(mbs_pred.slab(asp_off - mbs_off + i), w, h, Task::Mbs))
            .collect();
        let rows: Vec<GridFrame> = (0..asp_labels.len())
            .map(|i| {
                let t = asp_off + i;
                GridFrame {
                    input: &rgb[t],
                    attention: &att[t],
                    luma: &record.frames.luma[t],
                    mbs_pred: &mbs_labels[t - mbs_off],
                    mbs_gt: &record.mbs.labels[t],
                    asp_input: &asp_inputs[i],
                    asp_gt: &record.asp[a.layer].labels[t],
                    asp_pred: &asp_labels[i],
                }
            })
            .collect();
        write_rgb_png(&out.join("grid.png"), &render_grid(&rows))?;
    }
    run.finish(out)
}

fn demo(a: DemoArgs) -> Result<()> {
    let record = read_scene(&a.scene)?;
    let config = serde_json::json!({ "attention_mode": a.attention_mode.map(AttentionMode::from) });
    let mut run = RunManifest::new("demo-multiobject", None, echo("demo config", &config));
    run.input("scene", &a.scene)?;
    run.input("model", &a.model)?;
    run.input("frozen_mbs", &a.frozen_mbs)?;
    let asp = load_model(&a.model)?;
    let mbs = load_model(&a.frozen_mbs)?;
    if record.spec.layers.is_empty() {
        return Err(Error::Config("scene has no object layers to attend".into()));
    }
    let out = &a.common.out;
    create_dir(out)?;
    let mode = a.attention_mode.map(Into::into);
    let mbs_pred = mbs_predictions(&mbs, &record)?;
    let first = asp_output_offset(&mbs, &asp);
    let style = OverlayStyle::new(Task::Asp);
    let mut panel = Vec::new();
    for layer in 0..record.spec.layers.len() {
        let att = eval_attention(&record, layer, &asp_eval_cfg(mode))?;
        let labels = asp_for_layer(&asp, &mbs, &mbs_pred, &record, layer, mode)?;
        write_predictions(out, &format!("layer{layer}"), &record.frames.rgb, first, &labels, Task::Asp)?;
        let mut row = vec![heat_to_rgb(&att[first + labels.len() / 2])];
        row.extend(
            labels
                .iter()
                .enumerate()
                .map(|(i, l)| render_overlay(&record.frames.rgb[first + i], l, &style)),
        );
        panel.push(row);
    }
    write_rgb_png(&out.join("panel.png"), &tile(&panel))?;
    println!("{} layers", panel.len());
    run.finish(out)
}
