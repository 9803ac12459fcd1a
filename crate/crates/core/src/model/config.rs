use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How information from past frames enters the transformer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Single,
    Joint,
    Sequential,
    Recurrent,
}

/// Where the spatiotemporal mechanism sits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    Encoder,
    Decoder,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EgoFusion {
    None,
    AddToFeatures,
    AttendEncoder,
    AttendDecoder,
}

macro_rules! parse_enum {
    ($ty:ty, $($name:literal => $val:path),+ $(,)?) => {
        impl std::str::FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($val),)+
                    other => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($ty), " {:?}; expected one of: ", $($name, " "),+),
                        other
                    ))),
                }
            }
        }

        impl std::fmt::Display for $ty {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                let name = match self { $($val => $name,)+ };
                f.write_str(name)
            }
        }
    };
}

parse_enum!(Variant,
    "single" => Variant::Single,
    "joint" => Variant::Joint,
    "sequential" => Variant::Sequential,
    "recurrent" => Variant::Recurrent,
);
parse_enum!(Placement,
    "encoder" => Placement::Encoder,
    "decoder" => Placement::Decoder,
    "both" => Placement::Both,
);
parse_enum!(EgoFusion,
    "none" => EgoFusion::None,
    "add_to_features" => EgoFusion::AddToFeatures,
    "attend_encoder" => EgoFusion::AttendEncoder,
    "attend_decoder" => EgoFusion::AttendDecoder,
);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// Object slots `M`.
    pub slots: usize,
    /// Foreground classes `C`.
    pub classes: usize,
    pub variant: Variant,
    pub placement: Placement,
    pub ego_fusion: EgoFusion,
    /// Input frames `T`.
    pub frames: usize,
    /// Prediction horizon in seconds.
    pub horizon: f64,
    pub patch: usize,
    pub dropout: f64,
    pub image_height: usize,
    pub image_width: usize,
    pub ffn_dim: usize,
    /// Translations and speeds are divided by this before the ego MLP.
    pub ego_norm: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            enc_layers: 3,
            dec_layers: 3,
            slots: 25,
            classes: 2,
            variant: Variant::Single,
            placement: Placement::Decoder,
            ego_fusion: EgoFusion::None,
            frames: 1,
            horizon: 0.5,
            patch: 8,
            dropout: 0.0,
            image_height: 64,
            image_width: 64,
            ffn_dim: 128,
            ego_norm: 16.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return fail(format!(
                "d_model {} must be divisible by heads {}",
                self.d_model, self.heads
            ));
        }
        if self.d_model % 4 != 0 {
            return fail(format!(
                "d_model {} must be a multiple of 4 for 2-D positional encodings",
                self.d_model
            ));
        }
        if self.patch == 0
            || self.image_height % self.patch != 0
            || self.image_width % self.patch != 0
        {
            return fail(format!(
                "image size {}x{} must be divisible by patch size {}",
                self.image_height, self.image_width, self.patch
            ));
        }
        if self.frames == 0 || self.slots == 0 || self.classes == 0 || self.dec_layers == 0 {
            return fail("frames, slots, classes and dec_layers must be >= 1".into());
        }
        if self.ffn_dim == 0 {
            return fail("ffn_dim must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !(self.horizon >= 0.0 && self.horizon.is_finite()) {
            return fail(format!("horizon must be finite and >= 0, got {}", self.horizon));
        }
        if self.ego_norm <= 0.0 {
            return fail("ego_norm must be positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_height / self.patch, self.image_width / self.patch)
    }

    pub fn tokens_per_frame(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Temporal mechanism active in the encoder.
    pub fn temporal_encoder(&self) -> bool {
        self.variant != Variant::Single && matches!(self.placement, Placement::Encoder | Placement::Both)
    }

    /// Temporal mechanism active in the decoder.
    pub fn temporal_decoder(&self) -> bool {
        self.variant != Variant::Single && matches!(self.placement, Placement::Decoder | Placement::Both)
    }

    /// Row label in the style of the mechanism ablation tables.
    pub fn label(&self) -> String {
        let mech = match self.variant {
            Variant::Single => return self.ego_label("Singleframe"),
            Variant::Joint => "Joint Attention",
            Variant::Sequential => "Sequential CA",
            Variant::Recurrent => "Recurrent Tr.",
        };
        let place = match self.placement {
            Placement::Encoder => "Encoder",
            Placement::Decoder => "Decoder",
            Placement::Both => "Encoder+Decoder",
        };
        self.ego_label(&format!("{mech} {place}"))
    }

    fn ego_label(&self, base: &str) -> String {
        match self.ego_fusion {
            EgoFusion::None => base.to_string(),
            EgoFusion::AddToFeatures => format!("{base} + ego (add)"),
            EgoFusion::AttendEncoder => format!("{base} + ego (attend enc)"),
            EgoFusion::AttendDecoder => format!("{base} + ego (attend dec)"),
        }
    }
}
