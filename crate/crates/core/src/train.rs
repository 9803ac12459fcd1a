//! Mini-batch training with per-sample tapes and ordered gradient merging.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::{set_loss, AnnotationSet, LossBreakdown, LossWeights};
use crate::diffcore::{AdamW, Gradients, ParamGroup, ScheduleConfig, Tape, Tensor};
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, EgoFusion, Model, ModelConfig, ModelInput, PredictionSet};
use crate::synthworld::{splitmix64, Dataset, Sample};

/// What the model is trained to predict from a sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    /// Future annotations from the past input frames.
    Future,
    /// Plain detection: the annotated frame is the input (horizon 0).
    Detect,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub schedule: ScheduleConfig,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossWeights,
    pub optimizer: AdamW,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Leading epochs trained at half resolution with doubled batch size.
    pub half_resolution_epochs: usize,
    pub target: Target,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleConfig::default(),
            batch_size: 8,
            seed: 0,
            loss: LossWeights::default(),
            optimizer: AdamW::default(),
            grad_clip: Some(0.1),
            half_resolution_epochs: 0,
            target: Target::Future,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        self.schedule.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if self.target == Target::Detect && (model.frames != 1 || model.ego_fusion != EgoFusion::None) {
            return Err(Error::Config(
                "a detector takes one frame and no ego-motion".into(),
            ));
        }
        if self.half_resolution_epochs > 0
            && (model.image_height / 2 % model.patch != 0 || model.image_width / 2 % model.patch != 0)
        {
            return Err(Error::Config(
                "half-resolution phase needs half the image size divisible by patch size".into(),
            ));
        }
        Ok(())
    }
}

/// One line of the JSON-lines training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    pub total: f64,
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
    pub half_resolution: bool,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainSummary {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub checkpoints: Vec<PathBuf>,
}

/// Model input tensors for one sample, owned.
pub struct InputBatch {
    pub frames: Vec<Tensor<f32>>,
    pub timestamps: Vec<f64>,
    pub egos: Vec<crate::model::EgoMotionRecord>,
}

impl InputBatch {
    pub fn input(&self) -> ModelInput<'_, f32> {
        ModelInput {
            frames: &self.frames,
            timestamps: &self.timestamps,
            egos: &self.egos,
        }
    }
}

/// 2×2 average pooling of a `[3, H, W]` frame.
pub fn downsample(frame: &Tensor<f32>) -> Tensor<f32> {
    let s = frame.shape();
    let (h, w) = (s[1] / 2, s[2] / 2);
    let src = frame.data();
    let at = |c: usize, y: usize, x: usize| src[(c * s[1] + y) * s[2] + x];
    let mut out = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let sum = at(c, 2 * y, 2 * x)
                    + at(c, 2 * y, 2 * x + 1)
                    + at(c, 2 * y + 1, 2 * x)
                    + at(c, 2 * y + 1, 2 * x + 1);
                out.push(0.25 * sum);
            }
        }
    }
    Tensor::new(vec![3, h, w], out).expect("pooled shape")
}

/// The frames a model of `config` sees for `sample`.
pub fn sample_input(sample: &Sample, config: &ModelConfig, target: Target, half: bool) -> Result<InputBatch> {
    let (frames, timestamps, egos): (Vec<Tensor<f32>>, Vec<f64>, Vec<_>) = match target {
        Target::Detect => (
            vec![sample.future_frame.clone()],
            vec![sample.future_timestamp],
            vec![],
        ),
        Target::Future => {
            let (f, t, e) = sample.window(config.frames)?;
            let egos = if config.ego_fusion == EgoFusion::None {
                vec![]
            } else {
                e.to_vec()
            };
            (f.to_vec(), t.to_vec(), egos)
        }
    };
    let frames = if half {
        frames.iter().map(downsample).collect()
    } else {
        frames
    };
    Ok(InputBatch {
        frames,
        timestamps,
        egos,
    })
}

/// Detection-style input: one frame, no ego-motion.
pub fn frame_input(frame: &Tensor<f32>, timestamp: f64) -> InputBatch {
    InputBatch {
        frames: vec![frame.clone()],
        timestamps: vec![timestamp],
        egos: vec![],
    }
}

fn sample_gradients(
    model: &Model<f32>,
    input: &InputBatch,
    annos: &AnnotationSet,
    weights: &LossWeights,
    dropout_seed: u64,
) -> Result<(Gradients<f32>, LossBreakdown)> {
    let tape = Tape::new();
    let out = model
        .pass(&tape)
        .with_dropout_seed(dropout_seed)
        .forward(&input.input(), false)?;
    let (loss, breakdown) = set_loss(&out.heads, annos, weights)?;
    let grads = tape.backward(loss)?;
    Ok((grads, breakdown))
}

fn clip_gradients(model: &mut Model<f32>, max_norm: f64) {
    let norm = model
        .params
        .iter()
        .flat_map(|p| p.grad.data().iter())
        .map(|&g| (g as f64) * (g as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = (max_norm / (norm + 1e-6)) as f32;
        for p in model.params.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
}

/// Trains `model` in place. With `out_dir` set, `final.ckpt` and `best.ckpt`
/// (lowest epoch loss) are written there.
pub fn train(
    model: &mut Model<f32>,
    data: &Dataset,
    config: &TrainConfig,
    mut log: Option<&mut dyn Write>,
    out_dir: Option<&Path>,
) -> Result<TrainSummary> {
    config.validate(&model.config)?;
    if data.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let epochs = config.schedule.epochs;
    let n = data.len();
    let batches_per_epoch = |half: bool| {
        let b = if half { 2 * config.batch_size } else { config.batch_size };
        n.div_ceil(b)
    };
    let total_steps: usize = (0..epochs)
        .map(|e| batches_per_epoch(e < config.half_resolution_epochs))
        .sum();
    let mut step = 0usize;
    let mut summary = TrainSummary::default();
    let mut best = f64::INFINITY;
    let meta = |epoch: usize| {
        serde_json::json!({ "epoch": epoch, "seed": config.seed, "target": config.target })
    };

    for epoch in 0..epochs {
        let started = Instant::now();
        let half = epoch < config.half_resolution_epochs;
        let batch = if half { 2 * config.batch_size } else { config.batch_size };
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(config.seed ^ splitmix64(epoch as u64)));
        order.shuffle(&mut rng);

        let mut sums = [0.0f64; 4];
        let mut lr_now = 0.0;
        for (b, chunk) in order.chunks(batch).enumerate() {
            let mult = config.schedule.multiplier(step as f64 / total_steps as f64);
            lr_now = config.schedule.base_lr * mult;
            let results: Vec<Result<(Gradients<f32>, LossBreakdown)>> = chunk
                .par_iter()
                .map(|&i| {
                    let s = &data.samples[i];
                    let input = sample_input(s, &model.config, config.target, half)?;
                    let seed = splitmix64(config.seed ^ splitmix64((step as u64) << 20 | i as u64));
                    sample_gradients(model, &input, &s.annotations, &config.loss, seed)
                })
                .collect();
            model.params.zero_grad();
            let scale = 1.0 / chunk.len() as f32;
            for r in results {
                let (g, l) = r?;
                if !l.total.is_finite() {
                    return Err(Error::Training(format!(
                        "non-finite loss at epoch {} step {}",
                        epoch + 1,
                        b
                    )));
                }
                model.params.accumulate(&g, scale);
                sums[0] += l.total;
                sums[1] += l.class;
                sums[2] += l.l1;
                sums[3] += l.giou;
            }
            if let Some(c) = config.grad_clip {
                clip_gradients(model, c);
            }
            let (base, backbone) = (config.schedule.base_lr, config.schedule.backbone_lr);
            config
                .optimizer
                .step(&mut model.params, |g| match g {
                    ParamGroup::Backbone => backbone * mult,
                    ParamGroup::Rest => base * mult,
                })
                .map_err(|e| Error::Training(format!("epoch {} step {}: {e}", epoch + 1, b)))?;
            step += 1;
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            steps: step,
            lr: lr_now,
            total: sums[0] / n as f64,
            class: sums[1] / n as f64,
            l1: sums[2] / n as f64,
            giou: sums[3] / n as f64,
            half_resolution: half,
            seconds: started.elapsed().as_secs_f64(),
        };
        if let Some(w) = log.as_deref_mut() {
            let line = serde_json::to_string(&record)?;
            writeln!(w, "{line}")
                .and_then(|_| w.flush())
                .map_err(|e| Error::io("training log", e))?;
        }
        if record.total < best {
            best = record.total;
            summary.best_epoch = record.epoch;
            if let Some(dir) = out_dir {
                save_checkpoint(&dir.join("best.ckpt"), model, meta(record.epoch))?;
            }
        }
        summary.epochs.push(record);
    }
    if let Some(dir) = out_dir {
        let fin = dir.join("final.ckpt");
        save_checkpoint(&fin, model, meta(epochs))?;
        summary.checkpoints = vec![fin, dir.join("best.ckpt")];
    }
    Ok(summary)
}

/// Predictions of `model` on every sample, in sample order.
pub fn predict_all(model: &Model<f32>, data: &Dataset, target: Target) -> Result<Vec<PredictionSet<f32>>> {
    data.samples
        .par_iter()
        .map(|s| model.predict(&sample_input(s, &model.config, target, false)?.input()))
        .collect()
}

/// Runs a detector on one frame of every sample; `frame(sample)` picks it.
pub fn detect_all(
    model: &Model<f32>,
    data: &Dataset,
    frame: impl Fn(&Sample) -> (&Tensor<f32>, f64) + Sync,
) -> Result<Vec<PredictionSet<f32>>> {
    data.samples
        .par_iter()
        .map(|s| {
            let (f, t) = frame(s);
            model.predict(&frame_input(f, t).input())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn downsample_averages_blocks() {
        let f = Tensor::from_fn([3, 2, 4], |i| i as f32);
        let d = downsample(&f);
        assert_eq!(d.shape(), &[3, 1, 2]);
        assert_eq!(d.data()[0], (0.0 + 1.0 + 4.0 + 5.0) / 4.0);
    }
}
