//! The spatiotemporal detection transformer.
//!
//! Frames pass through a shared patch backbone, a transformer encoder and a
//! slot decoder; small heads turn every slot into class probabilities and a
//! box. Past frames and ego-motion are fused by joint attention, sequential
//! cross-attention or recurrence, in the encoder, the decoder or both.

mod checkpoint;
mod config;
mod layout;

use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint_header, save_checkpoint, CheckpointHeader, ParamEntry};
pub use config::{EgoFusion, ModelConfig, Placement, Variant};
use layout::{AttnIds, FfnIds, Layout, LinearIds, NormIds, Sublayer};

use crate::assignment::{BBox, HeadOutput};
use crate::diffcore::{sinusoidal_encode, ParamStore, Real, Tape, Tensor, Var, LAYER_NORM_EPS};
use crate::error::{Error, Result};

/// Base of every sinusoidal encoding used by the model.
pub const ENCODING_BASE: f64 = 10000.0;

/// Number of scalar ego-motion signals fed to the ego MLP.
pub const EGO_INPUTS: usize = 5;

/// Ego-motion of one frame, relative to the previous frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EgoMotionRecord {
    /// Planar translation since the previous frame (world units).
    pub translation: [f64; 2],
    pub speed: f64,
    /// Rotation rate slot; the synthetic world stores its zoom rate here.
    pub rotation: f64,
    pub timestamp: f64,
}

impl EgoMotionRecord {
    pub fn is_finite(&self) -> bool {
        self.translation.iter().all(|v| v.is_finite())
            && self.speed.is_finite()
            && self.rotation.is_finite()
            && self.timestamp.is_finite()
    }
}

/// Final-layer predictions: class probabilities `[M, C]` and boxes `[M, 4]`
/// as `(cx, cy, w, h)` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet<F: Real = f32> {
    pub class_probs: Tensor<F>,
    pub boxes: Tensor<F>,
}

impl<F: Real> PredictionSet<F> {
    pub fn new(class_probs: Tensor<F>, boxes: Tensor<F>) -> Result<Self> {
        let (cs, bs) = (class_probs.shape(), boxes.shape());
        if cs.len() != 2 || bs.len() != 2 || bs[1] != 4 || cs[0] != bs[0] {
            return Err(Error::shape("prediction_set", cs, bs));
        }
        Ok(Self { class_probs, boxes })
    }

    pub fn slots(&self) -> usize {
        self.boxes.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.class_probs.shape()[1]
    }

    pub fn prob(&self, slot: usize, class: usize) -> f64 {
        self.class_probs.row(slot)[class].as_f64()
    }

    pub fn bbox(&self, slot: usize) -> BBox {
        let r = self.boxes.row(slot);
        BBox::new(r[0].as_f64(), r[1].as_f64(), r[2].as_f64(), r[3].as_f64())
    }
}

/// Backbone output of one frame. Tokens are stored row-major over the
/// `[H, W]` grid, `[H·W, D]`.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMap<'t, F: Real> {
    pub tokens: Var<'t, F>,
    pub height: usize,
    pub width: usize,
    pub timestamp: f64,
}

impl<F: Real> FeatureMap<'_, F> {
    /// The `[D, H, W]` layout.
    pub fn to_tensor(&self) -> Result<Tensor<F>> {
        to_channel_first(&self.tokens.value(), self.height, self.width)
    }
}

fn to_channel_first<F: Real>(tokens: &Tensor<F>, h: usize, w: usize) -> Result<Tensor<F>> {
    let d = tokens.shape()[1];
    let mut out = vec![F::zero(); d * h * w];
    for t in 0..h * w {
        for c in 0..d {
            out[c * h * w + t] = tokens.row(t)[c];
        }
    }
    Tensor::new(vec![d, h, w], out)
}

/// Encoder output `z` of one frame with its spatial positional encodings.
#[derive(Clone, Debug)]
pub struct EncodedMemory<'t, F: Real> {
    pub tokens: Var<'t, F>,
    pub pos: Tensor<F>,
    pub height: usize,
    pub width: usize,
    pub timestamp: f64,
}

impl<F: Real> EncodedMemory<'_, F> {
    pub fn to_tensor(&self) -> Result<Tensor<F>> {
        to_channel_first(&self.tokens.value(), self.height, self.width)
    }
}

/// Encoded ego-motion vector `[D]`.
#[derive(Clone, Copy, Debug)]
pub struct EgoEmbedding<'t, F: Real> {
    pub vector: Var<'t, F>,
}

/// Slot content `[M, D]` and learned query positional embeddings `[M, D]`.
#[derive(Clone, Copy, Debug)]
pub struct ObjectSlots<'t, F: Real> {
    pub content: Var<'t, F>,
    pub query_pos: Var<'t, F>,
}

/// Decoder result: final slots plus the output of every layer.
#[derive(Clone, Debug)]
pub struct Decoded<'t, F: Real> {
    pub slots: ObjectSlots<'t, F>,
    pub layers: Vec<Var<'t, F>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Encoder,
    Decoder,
}

/// Key/value source of one attention call.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    SelfAttention,
    /// Tokens of one frame, `lag` frames before the current one.
    Frame { lag: usize },
    /// Concatenated tokens of `frames` frames, oldest first.
    Joint { frames: usize },
    Recurrent,
    Ego { lag: usize },
}

/// One attention call observed during a forward pass.
#[derive(Clone, Debug)]
pub struct AttentionRecord {
    pub stage: Stage,
    /// Frame index of the pass (`T - 1` is the current frame).
    pub step: usize,
    pub layer: usize,
    pub source: Source,
    pub queries: usize,
    pub keys: usize,
    /// Head-averaged weights `[queries, keys]`, when captured.
    pub weights: Option<Tensor<f64>>,
}

impl AttentionRecord {
    pub fn score_entries(&self) -> usize {
        self.queries * self.keys
    }
}

#[derive(Clone, Debug, Default)]
pub struct AttentionProbe {
    pub capture_weights: bool,
    pub records: Vec<AttentionRecord>,
}

impl AttentionProbe {
    pub fn counting() -> Self {
        Self::default()
    }

    pub fn capturing() -> Self {
        Self {
            capture_weights: true,
            records: Vec::new(),
        }
    }

    /// Attention-score entries of one layer of one pass.
    pub fn entries(&self, stage: Stage, step: usize, layer: usize) -> usize {
        self.records
            .iter()
            .filter(|r| r.stage == stage && r.step == step && r.layer == layer)
            .map(AttentionRecord::score_entries)
            .sum()
    }
}

/// Per-slot decoder cross-attention over each input frame's token grid.
#[derive(Clone, Debug)]
pub struct AttentionMaps {
    /// Input frame index of each map column.
    pub frames: Vec<usize>,
    /// `maps[slot][k]` is the `[H, W]` map over `frames[k]`.
    pub maps: Vec<Vec<Tensor<f64>>>,
    /// True when one softmax spans all frames (joint attention).
    pub normalized_jointly: bool,
}

/// Model input for one sample, frames oldest first.
#[derive(Clone, Copy, Debug)]
pub struct ModelInput<'a, F: Real> {
    pub frames: &'a [Tensor<F>],
    pub timestamps: &'a [f64],
    /// Empty when ego-motion is not available.
    pub egos: &'a [EgoMotionRecord],
}

pub struct ForwardOutput<'t, F: Real> {
    /// Head outputs of every decoder layer, final layer last.
    pub heads: Vec<HeadOutput<'t, F>>,
    pub attention: Option<AttentionMaps>,
}

impl<F: Real> ForwardOutput<'_, F> {
    pub fn predictions(&self) -> PredictionSet<F> {
        self.heads.last().expect("at least one decoder layer").predictions()
    }
}

/// Weights and configuration of one predictor.
#[derive(Clone, Debug)]
pub struct Model<F: Real = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<F>,
    layout: Layout,
    spatial_pos: Tensor<F>,
}

impl<F: Real> Model<F> {
    /// Fresh model. Every parameter is initialized from a seed derived from
    /// `seed` and its name, so models that share parameter names share values.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let layout = Layout::build(&config, &mut params, seed)?;
        let (h, w) = config.grid();
        let spatial_pos = spatial_encoding(h, w, config.d_model)?;
        Ok(Self {
            config,
            params,
            layout,
            spatial_pos,
        })
    }

    /// Rebuilds a model around existing parameter values; names and shapes
    /// must match what `config` requires.
    pub fn from_params(config: ModelConfig, params: ParamStore<F>) -> Result<Self> {
        let mut fresh = Self::new(config, 0)?;
        if fresh.params.len() != params.len() {
            return Err(Error::Config(format!(
                "parameter count {} does not match model layout ({})",
                params.len(),
                fresh.params.len()
            )));
        }
        for p in fresh.params.iter_mut() {
            let id = params
                .id(&p.name)
                .ok_or_else(|| Error::Config(format!("missing parameter {}", p.name)))?;
            let src = &params.get(id).value;
            if src.shape() != p.value.shape() {
                return Err(Error::shape("load_parameter", p.value.shape(), src.shape()));
            }
            p.value = src.clone();
        }
        Ok(fresh)
    }

    pub fn cast<G: Real>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
            spatial_pos: self.spatial_pos.cast(),
        }
    }

    /// Starts a forward pass recorded on `tape`.
    pub fn pass<'a, 't>(&'a self, tape: &'t Tape<F>) -> Pass<'a, 't, F> {
        Pass {
            model: self,
            tape,
            probe: None,
            dropout: None,
        }
    }

    /// Convenience: full forward pass returning values only.
    pub fn predict(&self, input: &ModelInput<'_, F>) -> Result<PredictionSet<F>> {
        let tape = Tape::new();
        let out = self.pass(&tape).forward(input, false)?;
        Ok(out.predictions())
    }

    pub fn spatial_pos(&self) -> &Tensor<F> {
        &self.spatial_pos
    }

    /// Positional encodings of an `h × w` token grid; frames at other than
    /// the configured resolution get freshly computed encodings.
    pub fn grid_pos(&self, h: usize, w: usize) -> Result<Tensor<F>> {
        if (h, w) == self.config.grid() {
            Ok(self.spatial_pos.clone())
        } else {
            spatial_encoding(h, w, self.config.d_model)
        }
    }
}

/// DETR-style 2-D sine encoding: first half of the width encodes the grid
/// row, second half the column.
fn spatial_encoding<F: Real>(h: usize, w: usize, d_model: usize) -> Result<Tensor<F>> {
    let half = d_model / 2;
    let rows: Vec<f64> = (0..h).map(|r| r as f64).collect();
    let cols: Vec<f64> = (0..w).map(|c| c as f64).collect();
    let er = sinusoidal_encode::<F>(&rows, half, ENCODING_BASE)?;
    let ec = sinusoidal_encode::<F>(&cols, half, ENCODING_BASE)?;
    let mut data = Vec::with_capacity(h * w * d_model);
    for r in 0..h {
        for c in 0..w {
            data.extend_from_slice(er.row(r));
            data.extend_from_slice(ec.row(c));
        }
    }
    Tensor::new(vec![h * w, d_model], data)
}

/// Temporal encoding of an offset in seconds, shifted so that offset zero
/// encodes to the zero vector.
fn temporal_encoding<F: Real>(offset: f64, dim: usize) -> Result<Tensor<F>> {
    let e = sinusoidal_encode::<f64>(&[offset, 0.0], dim, ENCODING_BASE)?;
    let data = (0..dim).map(|i| F::of(e.row(0)[i] - e.row(1)[i])).collect();
    Tensor::new(vec![dim], data)
}

/// Cross-attention source: keys are `tokens + pos`, values are `tokens`.
struct CrossSource<'t, F: Real> {
    tokens: Var<'t, F>,
    pos: Option<Var<'t, F>>,
    source: Source,
}

/// One forward pass of a [`Model`] on a [`Tape`].
pub struct Pass<'a, 't, F: Real> {
    model: &'a Model<F>,
    tape: &'t Tape<F>,
    probe: Option<&'a RefCell<AttentionProbe>>,
    dropout: Option<RefCell<ChaCha8Rng>>,
}

impl<'a, 't, F: Real> Pass<'a, 't, F> {
    pub fn with_probe(mut self, probe: &'a RefCell<AttentionProbe>) -> Self {
        self.probe = Some(probe);
        self
    }

    /// Enables dropout (when configured) with a deterministic mask stream.
    pub fn with_dropout_seed(mut self, seed: u64) -> Self {
        if self.model.config.dropout > 0.0 {
            self.dropout = Some(RefCell::new(ChaCha8Rng::seed_from_u64(seed)));
        }
        self
    }

    fn cfg(&self) -> &'a ModelConfig {
        &self.model.config
    }

    fn p(&self, id: crate::diffcore::ParamId) -> Var<'t, F> {
        self.tape.param(&self.model.params, id)
    }

    fn linear(&self, x: &Var<'t, F>, ids: &LinearIds) -> Result<Var<'t, F>> {
        x.linear(&self.p(ids.w), &self.p(ids.b))
    }

    fn norm(&self, x: &Var<'t, F>, ids: &NormIds) -> Result<Var<'t, F>> {
        x.layer_norm(&self.p(ids.g), &self.p(ids.b), F::of(LAYER_NORM_EPS))
    }

    fn dropout(&self, x: Var<'t, F>) -> Result<Var<'t, F>> {
        let Some(rng) = &self.dropout else {
            return Ok(x);
        };
        let rate = self.cfg().dropout;
        let keep = F::of(1.0 / (1.0 - rate));
        let shape = x.shape();
        let mut rng = rng.borrow_mut();
        let mask = Tensor::from_fn(shape, |_| {
            if rng.random::<f64>() < rate {
                F::zero()
            } else {
                keep
            }
        });
        x.mul(&self.tape.constant(mask))
    }

    fn record(&self, rec: AttentionRecord) {
        if let Some(p) = self.probe {
            p.borrow_mut().records.push(rec);
        }
    }

    fn capture(&self) -> bool {
        self.probe.is_some_and(|p| p.borrow().capture_weights)
    }

    /// Multi-head scaled dot-product attention.
    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        ids: &AttnIds,
        query: &Var<'t, F>,
        key: &Var<'t, F>,
        value: &Var<'t, F>,
        stage: Stage,
        step: usize,
        layer: usize,
        source: Source,
    ) -> Result<Var<'t, F>> {
        let cfg = self.cfg();
        let (heads, dh) = (cfg.heads, cfg.head_dim());
        let q = self.linear(query, &ids.q)?;
        let k = self.linear(key, &ids.k)?;
        let v = self.linear(value, &ids.v)?;
        let kt = k.transpose()?;
        let nq = q.shape()[0];
        let nk = k.shape()[0];
        let scale = F::of(1.0 / (dh as f64).sqrt());
        let capture = self.capture();
        let mut avg: Option<Vec<f64>> = capture.then(|| vec![0.0; nq * nk]);
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = q.slice(1, h * dh, dh)?;
            let kh = kt.slice(0, h * dh, dh)?;
            let vh = v.slice(1, h * dh, dh)?;
            let weights = qh.matmul(&kh)?.scale(scale).softmax(1)?;
            if let Some(acc) = avg.as_mut() {
                weights.with_value(|w| {
                    for (a, &x) in acc.iter_mut().zip(w.data()) {
                        *a += x.as_f64() / heads as f64;
                    }
                });
            }
            outs.push(weights.matmul(&vh)?);
        }
        let merged = self.tape.concat(&outs, 1)?;
        self.record(AttentionRecord {
            stage,
            step,
            layer,
            source,
            queries: nq,
            keys: nk,
            weights: avg.map(|a| Tensor::new(vec![nq, nk], a).expect("weights shape")),
        });
        self.linear(&merged, &ids.o)
    }

    /// Residual attention sublayer with post-normalization.
    #[allow(clippy::too_many_arguments)]
    fn attend(
        &self,
        x: &Var<'t, F>,
        x_pos: Option<&Var<'t, F>>,
        sub: &Sublayer,
        src: &CrossSource<'t, F>,
        stage: Stage,
        step: usize,
        layer: usize,
    ) -> Result<Var<'t, F>> {
        let q = match x_pos {
            Some(p) => x.add(p)?,
            None => *x,
        };
        let k = match &src.pos {
            Some(p) => src.tokens.add(p)?,
            None => src.tokens,
        };
        let a = self.attention(&sub.attn, &q, &k, &src.tokens, stage, step, layer, src.source)?;
        let a = self.dropout(a)?;
        self.norm(&x.add(&a)?, &sub.norm)
    }

    fn feed_forward(&self, x: &Var<'t, F>, ids: &FfnIds) -> Result<Var<'t, F>> {
        let h = self.linear(x, &ids.fc1)?.relu();
        let h = self.dropout(h)?;
        let y = self.dropout(self.linear(&h, &ids.fc2)?)?;
        self.norm(&x.add(&y)?, &ids.norm)
    }

    /// Patch projection of one `[3, H₀, W₀]` frame.
    pub fn patch_backbone(&self, frame: &Tensor<F>, timestamp: f64) -> Result<FeatureMap<'t, F>> {
        let cfg = self.cfg();
        let s = frame.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::shape("patch_backbone", s, &[3, cfg.image_height, cfg.image_width]));
        }
        let (h0, w0, p) = (s[1], s[2], cfg.patch);
        if h0 % p != 0 || w0 % p != 0 {
            return Err(Error::Config(format!(
                "frame {h0}x{w0} is not divisible by patch size {p}"
            )));
        }
        let (gh, gw) = (h0 / p, w0 / p);
        let patch_len = 3 * p * p;
        let src = frame.data();
        let mut patches = Vec::with_capacity(gh * gw * patch_len);
        for r in 0..gh {
            for c in 0..gw {
                for ch in 0..3 {
                    for dy in 0..p {
                        let row = (ch * h0 + r * p + dy) * w0 + c * p;
                        patches.extend_from_slice(&src[row..row + p]);
                    }
                }
            }
        }
        let patches = self.tape.constant(Tensor::new(vec![gh * gw, patch_len], patches)?);
        let tokens = self.linear(&patches, &self.model.layout.patch)?;
        Ok(FeatureMap {
            tokens,
            height: gh,
            width: gw,
            timestamp,
        })
    }

    /// Two-layer MLP over the concatenated ego-motion signals.
    pub fn encode_ego(&self, record: &EgoMotionRecord) -> Result<EgoEmbedding<'t, F>> {
        if !record.is_finite() {
            return Err(Error::Input(format!("non-finite ego-motion record {record:?}")));
        }
        let (fc1, fc2) = self.model.layout.ego_mlp.as_ref().ok_or_else(|| {
            Error::Config("model was built without ego-motion fusion".into())
        })?;
        let n = self.cfg().ego_norm;
        let signals = [
            record.translation[0] / n,
            record.translation[1] / n,
            record.speed / n,
            record.rotation,
            record.timestamp,
        ];
        let x = self.tape.constant(Tensor::from_f64([1, EGO_INPUTS], &signals)?);
        let h = self.linear(&x, fc1)?.relu();
        let y = self.linear(&h, fc2)?;
        Ok(EgoEmbedding {
            vector: y.reshape([self.cfg().d_model])?,
        })
    }

    fn pos_var(&self, x: &FeatureMap<'t, F>) -> Result<Var<'t, F>> {
        Ok(self.tape.constant(self.model.grid_pos(x.height, x.width)?))
    }

    fn ego_sources(&self, egos: Option<&[EgoEmbedding<'t, F>]>) -> Result<Vec<CrossSource<'t, F>>> {
        let Some(egos) = egos else { return Ok(vec![]) };
        let t = egos.len();
        egos.iter()
            .enumerate()
            .map(|(i, e)| {
                Ok(CrossSource {
                    tokens: e.vector.reshape([1, self.cfg().d_model])?,
                    pos: None,
                    source: Source::Ego { lag: t - 1 - i },
                })
            })
            .collect()
    }

    /// Standard encoder stack over `x` with optional extra cross-attention
    /// sources appended after self-attention in every layer.
    fn encoder_stack(
        &self,
        x: Var<'t, F>,
        pos: &Var<'t, F>,
        step: usize,
        past: &[CrossSource<'t, F>],
        recurrent: Option<&CrossSource<'t, F>>,
        ego: &[CrossSource<'t, F>],
    ) -> Result<Var<'t, F>> {
        let layout = &self.model.layout;
        let mut x = x;
        for (l, layer) in layout.enc.iter().enumerate() {
            let selfsrc = CrossSource {
                tokens: x,
                pos: Some(*pos),
                source: Source::SelfAttention,
            };
            x = self.attend(&x, Some(pos), &layer.self_attn, &selfsrc, Stage::Encoder, step, l)?;
            for src in past {
                let Source::Frame { lag } = src.source else { unreachable!() };
                let sub = layer.past.get(lag - 1).ok_or_else(|| {
                    Error::Config(format!("no encoder cross-attention for frame lag {lag}"))
                })?;
                x = self.attend(&x, Some(pos), sub, src, Stage::Encoder, step, l)?;
            }
            if let Some(src) = recurrent {
                let sub = layer.recurrent.as_ref().ok_or_else(|| {
                    Error::Config("encoder has no recurrent cross-attention".into())
                })?;
                x = self.attend(&x, Some(pos), sub, src, Stage::Encoder, step, l)?;
            }
            for src in ego {
                let Source::Ego { lag } = src.source else { unreachable!() };
                let sub = layer.ego.get(lag).ok_or_else(|| {
                    Error::Config(format!("no encoder ego attention for lag {lag}"))
                })?;
                x = self.attend(&x, Some(pos), sub, src, Stage::Encoder, step, l)?;
            }
            x = self.feed_forward(&x, &layer.ffn)?;
        }
        Ok(x)
    }

    /// Single-frame encoding of one feature map (no temporal fusion).
    fn encode_single(
        &self,
        x: &FeatureMap<'t, F>,
        step: usize,
        ego: &[CrossSource<'t, F>],
    ) -> Result<EncodedMemory<'t, F>> {
        let pos = self.pos_var(x)?;
        let z = self.encoder_stack(x.tokens, &pos, step, &[], None, ego)?;
        self.memory(z, x)
    }

    fn memory(&self, tokens: Var<'t, F>, x: &FeatureMap<'t, F>) -> Result<EncodedMemory<'t, F>> {
        Ok(EncodedMemory {
            tokens,
            pos: self.model.grid_pos(x.height, x.width)?,
            height: x.height,
            width: x.width,
            timestamp: x.timestamp,
        })
    }

    fn check_frames<T>(&self, xs: &[T], egos: Option<usize>) -> Result<()> {
        let t = self.cfg().frames;
        if xs.len() != t {
            return Err(Error::Config(format!(
                "model expects {t} input frames, got {}",
                xs.len()
            )));
        }
        if let Some(n) = egos {
            if n != t {
                return Err(Error::Config(format!(
                    "{n} ego records for {t} frames; they must align one-to-one"
                )));
            }
        }
        Ok(())
    }

    /// Encoder stage: returns `z` of the current (newest) frame.
    ///
    /// `xs` are the backbone features oldest first (already including any
    /// additive ego features); `egos` are the ego embeddings when the encoder
    /// attends to ego-motion.
    pub fn encode(
        &self,
        xs: &[FeatureMap<'t, F>],
        egos: Option<&[EgoEmbedding<'t, F>]>,
    ) -> Result<EncodedMemory<'t, F>> {
        self.check_frames(xs, egos.map(<[_]>::len))?;
        let cfg = self.cfg();
        let t = xs.len();
        let current = &xs[t - 1];
        let ego = self.ego_sources(egos)?;
        if !cfg.temporal_encoder() {
            return self.encode_single(current, t - 1, &ego);
        }
        match cfg.variant {
            Variant::Single => unreachable!(),
            Variant::Joint => {
                let hw = current.height * current.width;
                let spatial = self.pos_var(current)?;
                let mut tokens = Vec::with_capacity(t);
                let mut pos = Vec::with_capacity(t);
                for x in xs {
                    tokens.push(x.tokens);
                    let offset = x.timestamp - current.timestamp;
                    if offset == 0.0 {
                        pos.push(spatial);
                    } else {
                        let te = self.tape.constant(temporal_encoding(offset, cfg.d_model)?);
                        pos.push(spatial.add(&te)?);
                    }
                }
                let all = self.tape.concat(&tokens, 0)?;
                let all_pos = self.tape.concat(&pos, 0)?;
                let z = self.encoder_stack(all, &all_pos, t - 1, &[], None, &ego)?;
                let z = z.slice(0, (t - 1) * hw, hw)?;
                self.memory(z, current)
            }
            Variant::Sequential => {
                let pos = self.pos_var(current)?;
                let past: Vec<_> = xs[..t - 1]
                    .iter()
                    .enumerate()
                    .map(|(i, x)| CrossSource {
                        tokens: x.tokens,
                        pos: Some(pos),
                        source: Source::Frame { lag: t - 1 - i },
                    })
                    .collect();
                let z = self.encoder_stack(current.tokens, &pos, t - 1, &past, None, &ego)?;
                self.memory(z, current)
            }
            Variant::Recurrent => Ok(self.encode_recurrent(xs, &ego)?.pop().unwrap()),
        }
    }

    /// `z^τ = Encoder(x^τ, z^{τ-1})` frame by frame; earlier states are
    /// detached. Returns every step's memory, oldest first.
    fn encode_recurrent(
        &self,
        xs: &[FeatureMap<'t, F>],
        ego: &[CrossSource<'t, F>],
    ) -> Result<Vec<EncodedMemory<'t, F>>> {
        let pos = self.pos_var(&xs[0])?;
        let t = xs.len();
        let mut out: Vec<EncodedMemory<'t, F>> = Vec::with_capacity(t);
        for (step, x) in xs.iter().enumerate() {
            let prev = out.last().map(|m| CrossSource {
                tokens: m.tokens.detach(),
                pos: Some(pos),
                source: Source::Recurrent,
            });
            let ego_here: &[CrossSource<'t, F>] = if step == t - 1 { ego } else { &[] };
            let z = self.encoder_stack(x.tokens, &pos, step, &[], prev.as_ref(), ego_here)?;
            out.push(self.memory(z, x)?);
        }
        Ok(out)
    }

    /// Learned initial slots: zero content plus query embeddings.
    pub fn initial_slots(&self) -> Result<ObjectSlots<'t, F>> {
        let cfg = self.cfg();
        Ok(ObjectSlots {
            content: self.tape.constant(Tensor::zeros([cfg.slots, cfg.d_model])),
            query_pos: self.p(self.model.layout.query_pos),
        })
    }

    /// Decoder stage.
    ///
    /// `zs` are the memories oldest first; the newest is the current frame.
    /// For the recurrent decoder `zs` holds the single memory of this step and
    /// `y_prev` the previous step's slots (`None` at the first step).
    pub fn decode(
        &self,
        slots: &ObjectSlots<'t, F>,
        zs: &[EncodedMemory<'t, F>],
        egos: Option<&[EgoEmbedding<'t, F>]>,
        y_prev: Option<&ObjectSlots<'t, F>>,
    ) -> Result<Decoded<'t, F>> {
        self.decode_step(slots, zs, egos, y_prev, zs.len().saturating_sub(1))
    }

    fn decode_step(
        &self,
        slots: &ObjectSlots<'t, F>,
        zs: &[EncodedMemory<'t, F>],
        egos: Option<&[EgoEmbedding<'t, F>]>,
        y_prev: Option<&ObjectSlots<'t, F>>,
        step: usize,
    ) -> Result<Decoded<'t, F>> {
        let cfg = self.cfg();
        let current = zs
            .last()
            .ok_or_else(|| Error::Config("decode needs at least one memory".into()))?;
        let temporal = cfg.temporal_decoder();
        let recurrent = temporal && cfg.variant == Variant::Recurrent;
        if recurrent && zs.len() != 1 {
            return Err(Error::Config(
                "the recurrent decoder consumes one memory per step".into(),
            ));
        }
        if y_prev.is_some() && !recurrent {
            return Err(Error::Config(
                "previous slots are only used by the recurrent decoder".into(),
            ));
        }
        if temporal && !recurrent && zs.len() != cfg.frames {
            return Err(Error::Config(format!(
                "temporal decoder expects {} memories, got {}",
                cfg.frames,
                zs.len()
            )));
        }

        let konst = |t: &Tensor<F>| self.tape.constant(t.clone());
        // (source, which sublayer) in attention order
        enum Which {
            Cross,
            Past(usize),
            Rec,
            Ego(usize),
        }
        let mut sources: Vec<(CrossSource<'t, F>, Which)> = Vec::new();
        if temporal && cfg.variant == Variant::Joint {
            let t = zs.len();
            let mut tokens = Vec::with_capacity(t);
            let mut pos = Vec::with_capacity(t);
            for z in zs {
                tokens.push(z.tokens);
                let offset = z.timestamp - current.timestamp;
                let p = konst(&z.pos);
                if offset == 0.0 {
                    pos.push(p);
                } else {
                    let te = self.tape.constant(temporal_encoding(offset, cfg.d_model)?);
                    pos.push(p.add(&te)?);
                }
            }
            sources.push((
                CrossSource {
                    tokens: self.tape.concat(&tokens, 0)?,
                    pos: Some(self.tape.concat(&pos, 0)?),
                    source: Source::Joint { frames: t },
                },
                Which::Cross,
            ));
        } else if temporal && cfg.variant == Variant::Sequential {
            let t = zs.len();
            for (i, z) in zs.iter().enumerate() {
                let lag = t - 1 - i;
                let src = CrossSource {
                    tokens: z.tokens,
                    pos: Some(konst(&z.pos)),
                    source: Source::Frame { lag },
                };
                sources.push((src, if lag == 0 { Which::Cross } else { Which::Past(lag) }));
            }
        } else {
            sources.push((
                CrossSource {
                    tokens: current.tokens,
                    pos: Some(konst(&current.pos)),
                    source: Source::Frame { lag: 0 },
                },
                Which::Cross,
            ));
        }
        if let Some(prev) = y_prev {
            sources.push((
                CrossSource {
                    tokens: prev.content,
                    pos: Some(prev.query_pos),
                    source: Source::Recurrent,
                },
                Which::Rec,
            ));
        }
        for src in self.ego_sources(egos)? {
            let Source::Ego { lag } = src.source else { unreachable!() };
            sources.push((src, Which::Ego(lag)));
        }

        let mut y = slots.content;
        let qpos = slots.query_pos;
        let mut layers = Vec::with_capacity(cfg.dec_layers);
        for (l, layer) in self.model.layout.dec.iter().enumerate() {
            let selfsrc = CrossSource {
                tokens: y,
                pos: Some(qpos),
                source: Source::SelfAttention,
            };
            y = self.attend(&y, Some(&qpos), &layer.self_attn, &selfsrc, Stage::Decoder, step, l)?;
            for (src, which) in &sources {
                let sub = match which {
                    Which::Cross => Some(&layer.cross),
                    Which::Past(lag) => layer.past.get(lag - 1),
                    Which::Rec => layer.recurrent.as_ref(),
                    Which::Ego(lag) => layer.ego.get(*lag),
                }
                .ok_or_else(|| {
                    Error::Config(format!("decoder has no attention for source {:?}", src.source))
                })?;
                y = self.attend(&y, Some(&qpos), sub, src, Stage::Decoder, step, l)?;
            }
            y = self.feed_forward(&y, &layer.ffn)?;
            layers.push(y);
        }
        Ok(Decoded {
            slots: ObjectSlots {
                content: y,
                query_pos: qpos,
            },
            layers,
        })
    }

    /// Class logits and squashed boxes for every slot.
    pub fn predict_heads(&self, slots: &Var<'t, F>) -> Result<HeadOutput<'t, F>> {
        let layout = &self.model.layout;
        let logits = self.linear(slots, &layout.class_head)?;
        let h = self.linear(slots, &layout.box_head[0])?.relu();
        let h = self.linear(&h, &layout.box_head[1])?.relu();
        let boxes = self.linear(&h, &layout.box_head[2])?.sigmoid();
        Ok(HeadOutput { logits, boxes })
    }

    /// Full model: backbone, encoder, decoder and heads.
    pub fn forward(&self, input: &ModelInput<'_, F>, want_attention: bool) -> Result<ForwardOutput<'t, F>> {
        let cfg = self.cfg();
        let t = cfg.frames;
        if input.frames.len() != t || input.timestamps.len() != t {
            return Err(Error::Config(format!(
                "model expects {t} frames with timestamps, got {} frames / {} timestamps",
                input.frames.len(),
                input.timestamps.len()
            )));
        }
        let use_ego = cfg.ego_fusion != EgoFusion::None;
        if use_ego && input.egos.len() != t {
            return Err(Error::Config(format!(
                "ego fusion needs {t} ego records, got {}",
                input.egos.len()
            )));
        }

        // Only the newest frame matters without any temporal mechanism.
        let first = if cfg.temporal_encoder() || cfg.temporal_decoder() {
            0
        } else {
            t - 1
        };
        let now = input.timestamps[t - 1];
        let mut xs = Vec::with_capacity(t);
        for i in 0..t {
            if i < first {
                continue;
            }
            xs.push(self.patch_backbone(&input.frames[i], input.timestamps[i])?);
        }

        let egos: Option<Vec<EgoEmbedding<'t, F>>> = if use_ego {
            Some(
                input
                    .egos
                    .iter()
                    .map(|e| {
                        let rel = EgoMotionRecord {
                            timestamp: e.timestamp - now,
                            ..*e
                        };
                        self.encode_ego(&rel)
                    })
                    .collect::<Result<_>>()?,
            )
        } else {
            None
        };
        if cfg.ego_fusion == EgoFusion::AddToFeatures {
            let egos = egos.as_ref().unwrap();
            for (k, x) in xs.iter_mut().enumerate() {
                x.tokens = x.tokens.add(&egos[first + k].vector)?;
            }
        }
        let enc_egos = (cfg.ego_fusion == EgoFusion::AttendEncoder).then(|| egos.as_deref().unwrap());
        let dec_egos = (cfg.ego_fusion == EgoFusion::AttendDecoder).then(|| egos.as_deref().unwrap());

        let steps = xs.len();
        let current_step = t - 1;
        // Memory of every used frame, oldest first.
        let memories: Vec<EncodedMemory<'t, F>> = if cfg.temporal_encoder() {
            if cfg.variant == Variant::Recurrent {
                let ego = self.ego_sources(enc_egos)?;
                self.encode_recurrent(&xs, &ego)?
            } else {
                let mut mem = Vec::with_capacity(steps);
                if cfg.temporal_decoder() {
                    for (i, x) in xs[..steps - 1].iter().enumerate() {
                        mem.push(self.encode_single(x, first + i, &[])?);
                    }
                }
                mem.push(self.encode(&xs, enc_egos)?);
                mem
            }
        } else {
            let ego = self.ego_sources(enc_egos)?;
            let mut mem = Vec::with_capacity(steps);
            for (i, x) in xs.iter().enumerate() {
                let e: &[CrossSource<'t, F>] = if i == steps - 1 { &ego } else { &[] };
                mem.push(self.encode_single(x, first + i, e)?);
            }
            mem
        };

        let init = self.initial_slots()?;
        let decoded = if cfg.temporal_decoder() && cfg.variant == Variant::Recurrent {
            let mut prev: Option<ObjectSlots<'t, F>> = None;
            let mut last = None;
            for (i, z) in memories.iter().enumerate() {
                let is_last = i == memories.len() - 1;
                let e = if is_last { dec_egos } else { None };
                let d = self.decode_step(&init, std::slice::from_ref(z), e, prev.as_ref(), first + i)?;
                prev = Some(ObjectSlots {
                    content: d.slots.content.detach(),
                    query_pos: d.slots.query_pos,
                });
                last = Some(d);
            }
            last.unwrap()
        } else if cfg.temporal_decoder() {
            self.decode_step(&init, &memories, dec_egos, None, current_step)?
        } else {
            self.decode_step(&init, &memories[memories.len() - 1..], dec_egos, None, current_step)?
        };

        let heads = decoded
            .layers
            .iter()
            .map(|y| self.predict_heads(y))
            .collect::<Result<Vec<_>>>()?;

        let attention = if want_attention {
            Some(self.attention_maps(&decoded, &memories, first)?)
        } else {
            None
        };
        Ok(ForwardOutput { heads, attention })
    }

    /// Re-runs the last decoder layer's frame cross-attentions with weight
    /// capture and splits them per input frame.
    fn attention_maps(
        &self,
        decoded: &Decoded<'t, F>,
        memories: &[EncodedMemory<'t, F>],
        first: usize,
    ) -> Result<AttentionMaps> {
        let cfg = self.cfg();
        let probe = RefCell::new(AttentionProbe::capturing());
        let capture = Pass {
            model: self.model,
            tape: self.tape,
            probe: Some(&probe),
            dropout: None,
        };
        // Input to the last layer: previous layer output (or the initial slots).
        let init = capture.initial_slots()?;
        let mut y = if decoded.layers.len() >= 2 {
            decoded.layers[decoded.layers.len() - 2]
        } else {
            init.content
        };
        let l = cfg.dec_layers - 1;
        let layer = &self.model.layout.dec[l];
        let qpos = init.query_pos;
        let selfsrc = CrossSource {
            tokens: y,
            pos: Some(qpos),
            source: Source::SelfAttention,
        };
        y = capture.attend(&y, Some(&qpos), &layer.self_attn, &selfsrc, Stage::Decoder, 0, l)?;
        let konst = |t: &Tensor<F>| self.tape.constant(t.clone());
        let temporal = cfg.temporal_decoder();
        let (h, w) = (memories[0].height, memories[0].width);
        let hw = h * w;
        let n = memories.len();
        let mut frames = Vec::new();
        let mut maps: Vec<Vec<Tensor<f64>>> = vec![Vec::new(); cfg.slots];
        let split = |weights: &Tensor<f64>, k: usize, maps: &mut Vec<Vec<Tensor<f64>>>| {
            for (slot, per_slot) in maps.iter_mut().enumerate() {
                let row = &weights.row(slot)[k * hw..(k + 1) * hw];
                per_slot.push(Tensor::new(vec![h, w], row.to_vec()).expect("map shape"));
            }
        };
        let last_weights = |probe: &RefCell<AttentionProbe>| {
            probe.borrow().records.last().and_then(|r| r.weights.clone()).expect("captured")
        };
        if temporal && cfg.variant == Variant::Joint {
            let tokens: Vec<_> = memories.iter().map(|z| z.tokens).collect();
            let mut pos = Vec::new();
            let now = memories[n - 1].timestamp;
            for z in memories {
                let p = konst(&z.pos);
                let off = z.timestamp - now;
                pos.push(if off == 0.0 {
                    p
                } else {
                    p.add(&self.tape.constant(temporal_encoding(off, cfg.d_model)?))?
                });
            }
            let src = CrossSource {
                tokens: self.tape.concat(&tokens, 0)?,
                pos: Some(self.tape.concat(&pos, 0)?),
                source: Source::Joint { frames: n },
            };
            capture.attend(&y, Some(&qpos), &layer.cross, &src, Stage::Decoder, 0, l)?;
            let weights = last_weights(&probe);
            for k in 0..n {
                frames.push(first + k);
                split(&weights, k, &mut maps);
            }
            return Ok(AttentionMaps {
                frames,
                maps,
                normalized_jointly: true,
            });
        }
        let sequential = temporal && cfg.variant == Variant::Sequential;
        let chosen: Vec<usize> = if sequential { (0..n).collect() } else { vec![n - 1] };
        let mut y_run = y;
        for k in chosen {
            let lag = n - 1 - k;
            let sub = if lag == 0 { &layer.cross } else { &layer.past[lag - 1] };
            let src = CrossSource {
                tokens: memories[k].tokens,
                pos: Some(konst(&memories[k].pos)),
                source: Source::Frame { lag },
            };
            y_run = capture.attend(&y_run, Some(&qpos), sub, &src, Stage::Decoder, 0, l)?;
            frames.push(first + k);
            split(&last_weights(&probe), 0, &mut maps);
        }
        Ok(AttentionMaps {
            frames,
            maps,
            normalized_jointly: false,
        })
    }
}
