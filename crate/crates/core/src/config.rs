//! Run configuration and named presets.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
    Tiny,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            "tiny" => Ok(Preset::Tiny),
            other => Err(Error::Config(format!("unknown preset `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerMode {
    Sgd,
    Lars,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconNorm {
    /// Per-pixel mean squared error.
    Mse,
    /// Literal Euclidean norm of the residual.
    L2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub image_size: usize,
    /// Token / codeword dimension.
    pub d: usize,
    /// Number of codewords.
    pub k: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub mlp_hidden: usize,
    /// Stride-2 convolutions in the encoder (and upsampling stages in the decoder).
    pub encoder_layers: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Caps the schedule length; `None` runs `epochs × batches_per_epoch`.
    pub max_steps: Option<usize>,
    pub base_lr: f64,
    pub optimizer: OptimizerMode,
    pub momentum: f64,
    pub weight_decay: f64,
    pub ema_momentum: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub alpha_commit: f64,
    pub use_decoder: bool,
    pub use_diversifuse: bool,
    pub use_predictor: bool,
    pub recon_norm: ReconNorm,
    pub scale_scores: bool,
    pub codebook_downstream_grad: bool,
    pub seed: u64,
    /// Write an intermediate checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
    #[doc(hidden)]
    #[serde(skip)]
    pub inject_codebook_sign_bug: bool,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Desk => RunConfig {
                preset,
                image_size: 32,
                d: 64,
                k: 32,
                heads: 4,
                embed_dim: 32,
                mlp_hidden: 64,
                encoder_layers: 3,
                batch_size: 16,
                epochs: 30,
                max_steps: None,
                base_lr: 0.05,
                optimizer: OptimizerMode::Sgd,
                // Momentum inflates tokens through the scale-free cosine
                // terms and the codebook loss climbs with them.
                momentum: 0.0,
                weight_decay: 1e-4,
                ema_momentum: 0.99,
                alpha: 0.5,
                gamma: 0.5,
                alpha_commit: 0.5,
                use_decoder: true,
                use_diversifuse: true,
                use_predictor: true,
                recon_norm: ReconNorm::Mse,
                scale_scores: false,
                codebook_downstream_grad: false,
                seed: 0,
                checkpoint_every: 0,
                inject_codebook_sign_bug: false,
            },
            Preset::Paper => RunConfig {
                preset,
                image_size: 224,
                d: 512,
                k: 1024,
                heads: 8,
                embed_dim: 256,
                mlp_hidden: 1024,
                encoder_layers: 5,
                batch_size: 64,
                epochs: 300,
                base_lr: 0.02,
                optimizer: OptimizerMode::Lars,
                momentum: 0.9,
                weight_decay: 1e-6,
                ..RunConfig::preset(Preset::Desk)
            },
            Preset::Tiny => RunConfig {
                preset,
                image_size: 8,
                d: 8,
                k: 4,
                heads: 2,
                embed_dim: 8,
                mlp_hidden: 8,
                encoder_layers: 2,
                batch_size: 2,
                epochs: 1,
                ..RunConfig::preset(Preset::Desk)
            },
        }
    }

    /// Overlays the keys of a JSON object onto this configuration.
    pub fn merge_json(&self, overrides: &serde_json::Value) -> Result<Self> {
        let serde_json::Value::Object(over) = overrides else {
            return Err(Error::Config("config file must hold a JSON object".into()));
        };
        let mut base = serde_json::to_value(self)?;
        let obj = base.as_object_mut().expect("RunConfig serializes to an object");
        for (k, v) in over {
            if !obj.contains_key(k) {
                return Err(Error::Config(format!("unknown config key `{k}`")));
            }
            obj.insert(k.clone(), v.clone());
        }
        let cfg: RunConfig =
            serde_json::from_value(base).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a JSON file; a `preset` key selects the base the other keys overlay.
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let preset = match value.get("preset") {
            Some(p) => p
                .as_str()
                .ok_or_else(|| Error::Config("`preset` must be a string".into()))?
                .parse()?,
            None => Preset::Desk,
        };
        RunConfig::preset(preset).merge_json(&value)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.d == 0 || self.k == 0 || self.embed_dim == 0 || self.mlp_hidden == 0 {
            return fail("d, k, embed_dim and mlp_hidden must be positive".into());
        }
        if self.encoder_layers == 0 {
            return fail("encoder_layers must be positive".into());
        }
        let down = 1usize << self.encoder_layers;
        if self.image_size == 0 || self.image_size % down != 0 {
            return fail(format!(
                "image_size {} must be a positive multiple of 2^{} so the decoder restores it",
                self.image_size, self.encoder_layers
            ));
        }
        if self.d % (1 << (self.encoder_layers - 1)) != 0 {
            return fail(format!(
                "d={} must be divisible by 2^{} for the encoder channel ladder",
                self.d,
                self.encoder_layers - 1
            ));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return fail(format!("heads={} must divide d={}", self.heads, self.d));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return fail("batch_size and epochs must be positive".into());
        }
        if self.max_steps == Some(0) {
            return fail("max_steps must be positive when set".into());
        }
        if !(self.base_lr > 0.0) {
            return fail(format!("base_lr must be > 0, got {}", self.base_lr));
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return fail(format!("ema_momentum must lie in [0, 1], got {}", self.ema_momentum));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("gamma", self.gamma),
            ("alpha_commit", self.alpha_commit),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return fail(format!("{name} must be a finite nonnegative number, got {v}"));
            }
        }
        Ok(())
    }

    /// Spatial side of the encoder output map.
    pub fn token_side(&self) -> usize {
        self.image_size >> self.encoder_layers
    }

    pub fn tokens(&self) -> usize {
        self.token_side() * self.token_side()
    }

    /// Channel widths of the encoder convolutions, ending at `d`.
    pub fn encoder_widths(&self) -> Vec<usize> {
        (0..self.encoder_layers)
            .map(|i| self.d >> (self.encoder_layers - 1 - i))
            .collect()
    }

    /// Channel widths of the decoder upsampling stages (before the final
    /// one-channel convolution).
    pub fn decoder_widths(&self) -> Vec<usize> {
        (0..self.encoder_layers).map(|i| (self.d >> (i + 2)).max(1)).collect()
    }

    pub fn total_steps(&self, batches_per_epoch: usize) -> usize {
        let full = self.epochs * batches_per_epoch.max(1);
        self.max_steps.map_or(full, |cap| cap.min(full))
    }
}
