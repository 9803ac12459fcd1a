//! Experiment driver behind the `futuredet` binary.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::{
    evaluate, naive_baseline, oracle, render_table, to_detections, tracking_baseline, APReport,
    Detection, EvalConfig, MethodReport,
};
use crate::model::{load_checkpoint, EgoFusion, Model, ModelConfig, Placement, Variant};
use crate::synthworld::{make_dataset, read_dataset, Dataset, SceneConfig};
use crate::train::{detect_all, predict_all, sample_input, train, Target, TrainConfig};

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub train_samples: usize,
    pub val_samples: usize,
    pub scene: SceneConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train_samples: 2000,
            val_samples: 400,
            scene: SceneConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Aligns the derived fields (image size, classes, horizon, seeds) and
    /// validates the result.
    pub fn resolve(mut self) -> Result<Self> {
        self.scene.seed = self.seed;
        self.train.seed = self.seed;
        self.model.image_height = self.scene.image_height;
        self.model.image_width = self.scene.image_width;
        self.model.classes = self.scene.num_classes();
        self.model.horizon = if self.train.target == Target::Detect {
            0.0
        } else {
            self.scene.horizon
        };
        self.scene.validate()?;
        self.model.validate()?;
        self.train.validate(&self.model)?;
        if self.model.frames > self.scene.input_frames && self.train.target == Target::Future {
            return Err(Error::Config(format!(
                "model needs {} frames but samples hold {}",
                self.model.frames, self.scene.input_frames
            )));
        }
        Ok(self)
    }

    /// Configuration of the horizon-0 detector used by the baselines.
    pub fn detector(&self) -> Self {
        let mut c = self.clone();
        c.model.variant = Variant::Single;
        c.model.frames = 1;
        c.model.ego_fusion = EgoFusion::None;
        c.train.target = Target::Detect;
        c.model.horizon = 0.0;
        c
    }
}

#[derive(Parser, Debug)]
#[command(name = "futuredet", version, about = "Future object prediction experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub placement: Option<Placement>,
    #[arg(long)]
    pub ego: Option<EgoFusion>,
    #[arg(long)]
    pub horizon: Option<f64>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Dataset directory holding `train/` and `val/`.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the train and validation splits.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        train_samples: Option<usize>,
        #[arg(long)]
        val_samples: Option<usize>,
    },
    /// Train a predictor (or, with --detector, a horizon-0 detector).
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        detector: bool,
        #[arg(long)]
        half_resolution_epochs: Option<usize>,
    },
    /// Evaluate a checkpoint and the baselines on the validation split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Predictor checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Detector checkpoint for the naive, tracking and oracle rows.
        #[arg(long)]
        detector: Option<PathBuf>,
    },
    /// Train and evaluate the mechanism and ego-motion grids.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "both")]
        grid: GridChoice,
    },
    /// Export decoder cross-attention maps of one validation sample.
    DumpAttention {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        sample: usize,
        /// Slots to export; defaults to the most confident one.
        #[arg(long, value_delimiter = ',')]
        slots: Vec<usize>,
    },
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridChoice {
    Mechanism,
    Ego,
    Both,
}

fn resolve_common(common: &Common) -> Result<RunConfig> {
    let mut run = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        run.seed = s;
    }
    if let Some(v) = common.variant {
        run.model.variant = v;
    }
    if let Some(p) = common.placement {
        run.model.placement = p;
    }
    if let Some(e) = common.ego {
        run.model.ego_fusion = e;
    }
    if let Some(h) = common.horizon {
        run.scene.horizon = h;
    }
    if let Some(f) = common.frames {
        run.model.frames = f;
    }
    if let Some(e) = common.epochs {
        run.train.schedule.epochs = e;
    }
    Ok(run)
}

fn out_dir(common: &Common) -> Result<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn dataset_dir(common: &Common) -> Result<PathBuf> {
    common
        .dataset
        .clone()
        .ok_or_else(|| Error::Config("--dataset is required".into()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Generates `<out>/train` and `<out>/val`.
pub fn cmd_generate(run: &RunConfig, out: &Path) -> Result<(usize, usize)> {
    let run = run.clone().resolve()?;
    make_dataset(&run.scene, run.train_samples, "train", &out.join("train"))?;
    make_dataset(&run.scene, run.val_samples, "val", &out.join("val"))?;
    write_json(&out.join("config.json"), &run)?;
    Ok((run.train_samples, run.val_samples))
}

/// Reads the dataset splits and takes the scene section from them.
pub fn load_splits(dir: &Path, run: &mut RunConfig) -> Result<(Dataset, Dataset)> {
    let train = read_dataset(&dir.join("train"))?;
    let val = read_dataset(&dir.join("val"))?;
    run.scene = train.config().clone();
    Ok((train, val))
}

impl RunConfig {
    /// Like `resolve`, but keeps the scene seed the dataset was made with.
    fn resolve_for_dataset(self) -> Result<Self> {
        let scene_seed = self.scene.seed;
        let mut r = self.resolve()?;
        r.scene.seed = scene_seed;
        Ok(r)
    }
}

/// Trains one model and writes its log, checkpoints and config echo.
pub fn train_run(run: &RunConfig, data: &Dataset, out: &Path) -> Result<Model<f32>> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut model = Model::<f32>::new(run.model.clone(), run.seed)?;
    write_json(&out.join("config.json"), run)?;
    let log_path = out.join("train_log.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    train(&mut model, data, &run.train, Some(&mut log), Some(out))?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    Ok(model)
}

pub fn eval_config(scene: &SceneConfig) -> EvalConfig {
    EvalConfig {
        class_names: scene.classes.iter().map(|c| c.name.clone()).collect(),
        image_height: scene.image_height,
        image_width: scene.image_width,
    }
}

fn truth(data: &Dataset) -> Vec<(usize, crate::assignment::AnnotationSet)> {
    data.samples.iter().map(|s| (s.id, s.annotations.clone())).collect()
}

/// Scores a predictor on a split.
pub fn evaluate_model(model: &Model<f32>, data: &Dataset) -> Result<APReport> {
    let preds = predict_all(model, data, Target::Future)?;
    let dets: Vec<Detection> = data
        .samples
        .iter()
        .zip(&preds)
        .flat_map(|(s, p)| to_detections(p, s.id))
        .collect();
    evaluate(&dets, &truth(data), &eval_config(data.config()))
}

/// Naive, tracking and oracle rows for a detector.
pub fn baseline_reports(detector: &Model<f32>, data: &Dataset) -> Result<Vec<MethodReport>> {
    let cfg = data.config();
    let n = cfg.input_frames;
    if n < 2 {
        return Err(Error::Config("the tracking baseline needs two input frames".into()));
    }
    let per = |preds: Vec<crate::model::PredictionSet<f32>>| -> Vec<Vec<Detection>> {
        data.samples
            .iter()
            .zip(&preds)
            .map(|(s, p)| to_detections(p, s.id))
            .collect()
    };
    let cur = per(detect_all(detector, data, |s| (&s.frames[n - 1], s.timestamps[n - 1]))?);
    let prev = per(detect_all(detector, data, |s| (&s.frames[n - 2], s.timestamps[n - 2]))?);
    let fut = per(detect_all(detector, data, |s| (&s.future_frame, s.future_timestamp))?);
    let naive: Vec<Detection> = cur.iter().flat_map(|d| naive_baseline(d)).collect();
    let mut tracking = Vec::new();
    for (k, s) in data.samples.iter().enumerate() {
        let dt = s.timestamps[n - 1] - s.timestamps[n - 2];
        let h = s.future_timestamp - s.timestamps[n - 1];
        tracking.extend(tracking_baseline(&prev[k], &cur[k], dt, h)?);
    }
    let orc: Vec<Detection> = fut.iter().flat_map(|d| oracle(d)).collect();
    let (t, ec) = (truth(data), eval_config(cfg));
    Ok(vec![
        MethodReport {
            method: "naive".into(),
            report: evaluate(&naive, &t, &ec)?,
        },
        MethodReport {
            method: "tracking".into(),
            report: evaluate(&tracking, &t, &ec)?,
        },
        MethodReport {
            method: "oracle".into(),
            report: evaluate(&orc, &t, &ec)?,
        },
    ])
}

fn cmd_train(common: &Common, detector: bool, half: Option<usize>) -> Result<()> {
    let mut run = resolve_common(common)?;
    if detector {
        run = run.detector();
    }
    if let Some(h) = half {
        run.train.half_resolution_epochs = h;
    }
    let (train_set, _) = load_splits(&dataset_dir(common)?, &mut run)?;
    if let Some(h) = common.horizon {
        if (h - run.scene.horizon).abs() > 1e-12 && !detector {
            return Err(Error::Config(format!(
                "--horizon {h} differs from the dataset horizon {}",
                run.scene.horizon
            )));
        }
    }
    let run = run.resolve_for_dataset()?;
    let out = out_dir(common)?;
    let model = train_run(&run, &train_set, &out)?;
    println!(
        "trained {} ({} parameters) -> {}",
        run.model.label(),
        model.params.num_scalars(),
        out.join("final.ckpt").display()
    );
    Ok(())
}

fn cmd_evaluate(common: &Common, checkpoint: Option<&Path>, detector: Option<&Path>) -> Result<()> {
    let mut run = resolve_common(common)?;
    let (_, val) = load_splits(&dataset_dir(common)?, &mut run)?;
    let out = out_dir(common)?;
    let mut rows = Vec::new();
    if let Some(p) = checkpoint {
        let (model, _) = load_checkpoint::<f32>(p)?;
        rows.push(MethodReport {
            method: model.config.label(),
            report: evaluate_model(&model, &val)?,
        });
    }
    if let Some(p) = detector {
        let (det, _) = load_checkpoint::<f32>(p)?;
        rows.extend(baseline_reports(&det, &val)?);
    }
    if rows.is_empty() {
        return Err(Error::Config("pass --checkpoint and/or --detector".into()));
    }
    for r in &rows {
        let name: String = r
            .method
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
            .collect();
        write_json(&out.join(format!("report_{name}.json")), &r.report)?;
    }
    write_json(&out.join("comparison.json"), &rows)?;
    let table = render_table(&rows);
    fs::write(out.join("comparison.txt"), &table).map_err(|e| Error::io(out.join("comparison.txt"), e))?;
    print!("{table}");
    Ok(())
}

/// Model configurations of the mechanism grid: single frame plus every
/// temporal variant in the encoder and in the decoder.
pub fn mechanism_grid(base: &ModelConfig, frames: usize) -> Vec<ModelConfig> {
    let mut out = vec![ModelConfig {
        variant: Variant::Single,
        frames: 1,
        ego_fusion: EgoFusion::None,
        ..base.clone()
    }];
    for v in [Variant::Joint, Variant::Sequential, Variant::Recurrent] {
        for p in [Placement::Encoder, Placement::Decoder] {
            out.push(ModelConfig {
                variant: v,
                placement: p,
                frames,
                ego_fusion: EgoFusion::None,
                ..base.clone()
            });
        }
    }
    out
}

/// Ego-motion grid around `base`.
pub fn ego_grid(base: &ModelConfig) -> Vec<ModelConfig> {
    [
        EgoFusion::None,
        EgoFusion::AddToFeatures,
        EgoFusion::AttendEncoder,
        EgoFusion::AttendDecoder,
    ]
    .into_iter()
    .map(|e| ModelConfig {
        ego_fusion: e,
        ..base.clone()
    })
    .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRun {
    pub grid: String,
    pub label: String,
    pub model: ModelConfig,
    pub dataset_hash: String,
    pub report: APReport,
}

fn cmd_ablate(common: &Common, grid: GridChoice) -> Result<()> {
    let mut run = resolve_common(common)?;
    let dir = dataset_dir(common)?;
    let (train_set, val) = load_splits(&dir, &mut run)?;
    let hash = train_set.content_hash()?;
    let run = run.resolve_for_dataset()?;
    let out = out_dir(common)?;
    let frames = if run.model.frames > 1 { run.model.frames } else { 2 };
    let mut plan: Vec<(&str, ModelConfig)> = Vec::new();
    if matches!(grid, GridChoice::Mechanism | GridChoice::Both) {
        plan.extend(mechanism_grid(&run.model, frames).into_iter().map(|m| ("mechanism", m)));
    }
    if matches!(grid, GridChoice::Ego | GridChoice::Both) {
        let base = ModelConfig {
            frames,
            variant: if run.model.variant == Variant::Single {
                Variant::Sequential
            } else {
                run.model.variant
            },
            ..run.model.clone()
        };
        plan.extend(ego_grid(&base).into_iter().map(|m| ("ego", m)));
    }
    let mut results = Vec::new();
    for (i, (g, m)) in plan.into_iter().enumerate() {
        let r = RunConfig {
            model: m.clone(),
            ..run.clone()
        }
        .resolve_for_dataset()?;
        eprintln!("[{}] {} / {}", i + 1, g, m.label());
        let model = train_run(&r, &train_set, &out.join(format!("run{:02}", i + 1)))?;
        results.push(AblationRun {
            grid: g.to_string(),
            label: m.label(),
            model: m,
            dataset_hash: hash.clone(),
            report: evaluate_model(&model, &val)?,
        });
    }
    write_json(&out.join("ablation.json"), &results)?;
    let mut ranked: Vec<MethodReport> = results
        .iter()
        .map(|r| MethodReport {
            method: format!("{} [{}]", r.label, r.grid),
            report: r.report.clone(),
        })
        .collect();
    ranked.sort_by(|a, b| b.report.mean_ap50().total_cmp(&a.report.mean_ap50()));
    let table = render_table(&ranked);
    fs::write(out.join("ablation.txt"), &table).map_err(|e| Error::io(out.join("ablation.txt"), e))?;
    print!("{table}");
    Ok(())
}

/// Writes an 8-bit binary PGM, max-normalized.
pub fn write_pgm(path: &Path, map: &crate::diffcore::Tensor<f64>) -> Result<()> {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let max = map.data().iter().cloned().fold(0.0f64, f64::max);
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(map.data().iter().map(|&v| {
        if max > 0.0 {
            (v / max * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_csv(path: &Path, map: &crate::diffcore::Tensor<f64>) -> Result<()> {
    let w = map.shape()[1];
    let mut text = String::new();
    for row in map.data().chunks(w) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.9e}")).collect();
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct SlotDump {
    sample: usize,
    slot: usize,
    class: usize,
    confidence: f64,
    bbox: crate::assignment::BBox,
    frames: Vec<usize>,
    normalized_jointly: bool,
    files: Vec<String>,
}

/// Writes attention maps of the given slots; returns the written files.
pub fn dump_attention(model: &Model<f32>, data: &Dataset, sample: usize, slots: &[usize], out: &Path) -> Result<Vec<PathBuf>> {
    let s = data
        .samples
        .iter()
        .find(|s| s.id == sample)
        .ok_or_else(|| Error::Input(format!("no sample {sample} in the dataset")))?;
    let input = sample_input(s, &model.config, Target::Future, false)?;
    let tape = crate::diffcore::Tape::new();
    let fwd = model.pass(&tape).forward(&input.input(), true)?;
    let preds = fwd.predictions();
    let maps = fwd.attention.expect("attention requested");
    let slots: Vec<usize> = if slots.is_empty() {
        let best = (0..preds.slots())
            .max_by(|&a, &b| {
                let m = |j| (0..preds.classes()).map(|c| preds.prob(j, c)).fold(0.0, f64::max);
                m(a).total_cmp(&m(b))
            })
            .unwrap_or(0);
        vec![best]
    } else {
        slots.to_vec()
    };
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written = Vec::new();
    for &j in &slots {
        if j >= preds.slots() {
            return Err(Error::Input(format!("slot {j} out of range (M = {})", preds.slots())));
        }
        let mut files = Vec::new();
        for (k, frame) in maps.frames.iter().enumerate() {
            let stem = format!("slot{j:02}_frame{frame}");
            let pgm = out.join(format!("{stem}.pgm"));
            let csv = out.join(format!("{stem}.csv"));
            write_pgm(&pgm, &maps.maps[j][k])?;
            write_csv(&csv, &maps.maps[j][k])?;
            files.push(format!("{stem}.pgm"));
            files.push(format!("{stem}.csv"));
            written.push(pgm);
            written.push(csv);
        }
        let (class, confidence) = (0..preds.classes())
            .map(|c| (c, preds.prob(j, c)))
            .fold((0, f64::NEG_INFINITY), |b, x| if x.1 > b.1 { x } else { b });
        let meta = out.join(format!("slot{j:02}.json"));
        write_json(
            &meta,
            &SlotDump {
                sample,
                slot: j,
                class,
                confidence,
                bbox: preds.bbox(j),
                frames: maps.frames.clone(),
                normalized_jointly: maps.normalized_jointly,
                files,
            },
        )?;
        written.push(meta);
    }
    Ok(written)
}

fn cmd_dump_attention(common: &Common, checkpoint: &Path, sample: usize, slots: &[usize]) -> Result<()> {
    let mut run = resolve_common(common)?;
    let (_, val) = load_splits(&dataset_dir(common)?, &mut run)?;
    let (model, _) = load_checkpoint::<f32>(checkpoint)?;
    let out = out_dir(common)?;
    let files = dump_attention(&model, &val, sample, slots, &out)?;
    println!("wrote {} files to {}", files.len(), out.display());
    Ok(())
}

/// Exit code of an error: 1 for usage and validation, 2 for runtime failures.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Input(_) | Error::Shape { .. } | Error::Contract(_) => 1,
        Error::Training(_) | Error::Format { .. } | Error::Io { .. } | Error::Json(_) => 2,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate {
            common,
            train_samples,
            val_samples,
        } => {
            let mut run = resolve_common(&common)?;
            if let Some(n) = train_samples {
                run.train_samples = n;
            }
            if let Some(n) = val_samples {
                run.val_samples = n;
            }
            let out = out_dir(&common)?;
            let (t, v) = cmd_generate(&run, &out)?;
            println!("train: {t} samples\nval: {v} samples");
            Ok(())
        }
        Command::Train {
            common,
            detector,
            half_resolution_epochs,
        } => cmd_train(&common, detector, half_resolution_epochs),
        Command::Evaluate {
            common,
            checkpoint,
            detector,
        } => cmd_evaluate(&common, checkpoint.as_deref(), detector.as_deref()),
        Command::Ablate { common, grid } => cmd_ablate(&common, grid),
        Command::DumpAttention {
            common,
            checkpoint,
            sample,
            slots,
        } => cmd_dump_attention(&common, &checkpoint, sample, &slots),
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
