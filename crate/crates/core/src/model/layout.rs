use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::config::{EgoFusion, ModelConfig, Variant};
use super::EGO_INPUTS;
use crate::diffcore::{ParamGroup, ParamId, ParamStore, Real, Tensor};
use crate::error::Result;

/// Focal-loss prior: initial foreground probability of about 0.01.
const CLASS_BIAS_INIT: f64 = -4.595;

#[derive(Clone, Debug)]
pub(crate) struct LinearIds {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct NormIds {
    pub g: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct AttnIds {
    pub q: LinearIds,
    pub k: LinearIds,
    pub v: LinearIds,
    pub o: LinearIds,
}

/// Attention followed by residual add and layer norm.
#[derive(Clone, Debug)]
pub(crate) struct Sublayer {
    pub attn: AttnIds,
    pub norm: NormIds,
}

#[derive(Clone, Debug)]
pub(crate) struct FfnIds {
    pub fc1: LinearIds,
    pub fc2: LinearIds,
    pub norm: NormIds,
}

#[derive(Clone, Debug)]
pub(crate) struct EncLayer {
    pub self_attn: Sublayer,
    /// Cross-attention to the frame `k + 1` steps back.
    pub past: Vec<Sublayer>,
    pub recurrent: Option<Sublayer>,
    /// Attention to the ego embedding `k` steps back.
    pub ego: Vec<Sublayer>,
    pub ffn: FfnIds,
}

#[derive(Clone, Debug)]
pub(crate) struct DecLayer {
    pub self_attn: Sublayer,
    pub cross: Sublayer,
    pub past: Vec<Sublayer>,
    pub recurrent: Option<Sublayer>,
    pub ego: Vec<Sublayer>,
    pub ffn: FfnIds,
}

#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub patch: LinearIds,
    pub ego_mlp: Option<(LinearIds, LinearIds)>,
    pub enc: Vec<EncLayer>,
    pub query_pos: ParamId,
    pub dec: Vec<DecLayer>,
    pub class_head: LinearIds,
    pub box_head: [LinearIds; 3],
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn name_hash(name: &str) -> u64 {
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

struct Builder<'s, F: Real> {
    store: &'s mut ParamStore<F>,
    seed: u64,
}

impl<F: Real> Builder<'_, F> {
    fn rng(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(splitmix(self.seed ^ splitmix(name_hash(name))))
    }

    fn add(&mut self, name: &str, group: ParamGroup, value: Tensor<F>) -> Result<ParamId> {
        self.store.insert(name, group, value)
    }

    fn xavier(&mut self, name: &str, fan_in: usize, fan_out: usize, group: ParamGroup) -> Result<ParamId> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new(-limit, limit).expect("valid range");
        let mut rng = self.rng(name);
        let value = Tensor::from_fn([fan_in, fan_out], |_| F::of(dist.sample(&mut rng)));
        self.add(name, group, value)
    }

    fn linear_in(&mut self, name: &str, fan_in: usize, fan_out: usize, group: ParamGroup) -> Result<LinearIds> {
        Ok(LinearIds {
            w: self.xavier(&format!("{name}.w"), fan_in, fan_out, group)?,
            b: self.add(&format!("{name}.b"), group, Tensor::zeros([fan_out]))?,
        })
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<LinearIds> {
        self.linear_in(name, fan_in, fan_out, ParamGroup::Rest)
    }

    fn norm(&mut self, name: &str, d: usize) -> Result<NormIds> {
        Ok(NormIds {
            g: self.add(&format!("{name}.g"), ParamGroup::Rest, Tensor::full([d], F::one()))?,
            b: self.add(&format!("{name}.b"), ParamGroup::Rest, Tensor::zeros([d]))?,
        })
    }

    fn sublayer(&mut self, name: &str, d: usize) -> Result<Sublayer> {
        Ok(Sublayer {
            attn: AttnIds {
                q: self.linear(&format!("{name}.q"), d, d)?,
                k: self.linear(&format!("{name}.k"), d, d)?,
                v: self.linear(&format!("{name}.v"), d, d)?,
                o: self.linear(&format!("{name}.o"), d, d)?,
            },
            norm: self.norm(&format!("{name}.norm"), d)?,
        })
    }

    fn ffn(&mut self, name: &str, d: usize, hidden: usize) -> Result<FfnIds> {
        Ok(FfnIds {
            fc1: self.linear(&format!("{name}.fc1"), d, hidden)?,
            fc2: self.linear(&format!("{name}.fc2"), hidden, d)?,
            norm: self.norm(&format!("{name}.norm"), d)?,
        })
    }
}

impl Layout {
    pub fn build<F: Real>(cfg: &ModelConfig, store: &mut ParamStore<F>, seed: u64) -> Result<Self> {
        let d = cfg.d_model;
        let mut b = Builder { store, seed };
        let patch = b.linear_in("backbone.proj", 3 * cfg.patch * cfg.patch, d, ParamGroup::Backbone)?;
        let ego_mlp = if cfg.ego_fusion != EgoFusion::None {
            Some((b.linear("ego.fc1", EGO_INPUTS, d)?, b.linear("ego.fc2", d, d)?))
        } else {
            None
        };
        let past_count = |temporal: bool| {
            if temporal && cfg.variant == Variant::Sequential {
                cfg.frames - 1
            } else {
                0
            }
        };
        let has_rec = |temporal: bool| temporal && cfg.variant == Variant::Recurrent;

        let mut enc = Vec::with_capacity(cfg.enc_layers);
        for l in 0..cfg.enc_layers {
            let p = format!("enc.{l}");
            let self_attn = b.sublayer(&format!("{p}.self"), d)?;
            let past = (1..=past_count(cfg.temporal_encoder()))
                .map(|k| b.sublayer(&format!("{p}.past{k}"), d))
                .collect::<Result<_>>()?;
            let recurrent = if has_rec(cfg.temporal_encoder()) {
                Some(b.sublayer(&format!("{p}.rec"), d)?)
            } else {
                None
            };
            let ego = if cfg.ego_fusion == EgoFusion::AttendEncoder {
                (0..cfg.frames)
                    .map(|k| b.sublayer(&format!("{p}.ego{k}"), d))
                    .collect::<Result<_>>()?
            } else {
                Vec::new()
            };
            let ffn = b.ffn(&format!("{p}.ffn"), d, cfg.ffn_dim)?;
            enc.push(EncLayer {
                self_attn,
                past,
                recurrent,
                ego,
                ffn,
            });
        }

        let query_pos = {
            let name = "dec.query_pos";
            let mut rng = b.rng(name);
            let normal = Normal::new(0.0, 1.0).expect("valid normal");
            let value = Tensor::from_fn([cfg.slots, d], |_| F::of(normal.sample(&mut rng)));
            b.add(name, ParamGroup::Rest, value)?
        };
        let mut dec = Vec::with_capacity(cfg.dec_layers);
        for l in 0..cfg.dec_layers {
            let p = format!("dec.{l}");
            let self_attn = b.sublayer(&format!("{p}.self"), d)?;
            let cross = b.sublayer(&format!("{p}.cross"), d)?;
            let past = (1..=past_count(cfg.temporal_decoder()))
                .map(|k| b.sublayer(&format!("{p}.past{k}"), d))
                .collect::<Result<_>>()?;
            let recurrent = if has_rec(cfg.temporal_decoder()) {
                Some(b.sublayer(&format!("{p}.rec"), d)?)
            } else {
                None
            };
            let ego = if cfg.ego_fusion == EgoFusion::AttendDecoder {
                (0..cfg.frames)
                    .map(|k| b.sublayer(&format!("{p}.ego{k}"), d))
                    .collect::<Result<_>>()?
            } else {
                Vec::new()
            };
            let ffn = b.ffn(&format!("{p}.ffn"), d, cfg.ffn_dim)?;
            dec.push(DecLayer {
                self_attn,
                cross,
                past,
                recurrent,
                ego,
                ffn,
            });
        }

        let class_head = b.linear("head.class", d, cfg.classes)?;
        b.store.get_mut(class_head.b).value = Tensor::full([cfg.classes], F::of(CLASS_BIAS_INIT));
        let box_head = [
            b.linear("head.box1", d, d)?,
            b.linear("head.box2", d, d)?,
            b.linear("head.box3", d, 4)?,
        ];
        Ok(Self {
            patch,
            ego_mlp,
            enc,
            query_pos,
            dec,
            class_head,
            box_head,
        })
    }
}
