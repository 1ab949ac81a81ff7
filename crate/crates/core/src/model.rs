//! Context/target encoders, heads, quantizer, fusion and decoder wired into
//! the directional forward pass, plus the EMA target update.

use crate::autodiff::{Graph, Tensor, Var};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionParams;
use crate::layers::{Decoder, Encoder, MlpHead};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::{self, stream};
use crate::vq::{self, Codebook, QuantizationResult};

/// Parameter layout shared by the online (θ) and target (φ) stores.
///
/// The encoder and projection head are registered first in θ so that φ,
/// which holds only those two, uses the same [`ParamId`]s.
#[derive(Clone, Debug)]
pub struct Architecture {
    pub encoder: Encoder,
    pub projection: MlpHead,
    pub predictor: Option<MlpHead>,
    pub fused_projection: MlpHead,
    pub fusion: Option<FusionParams>,
    pub decoder: Option<Decoder>,
    pub codebook: ParamId,
}

#[derive(Clone, Debug)]
pub struct ModelState {
    pub arch: Architecture,
    pub theta: ParamStore,
    pub phi: ParamStore,
    pub ema_momentum: f64,
}

impl ModelState {
    pub fn init(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::seeded(rng::mix(&[cfg.seed, stream::INIT]));
        let mut theta = ParamStore::new();
        let encoder = Encoder::init(&mut theta, "encoder", cfg.image_size, &cfg.encoder_widths(), &mut r);
        let projection = MlpHead::init(&mut theta, "projection", cfg.d, cfg.mlp_hidden, cfg.embed_dim, &mut r);
        let mirrored = theta.len();

        let predictor = cfg
            .use_predictor
            .then(|| MlpHead::init(&mut theta, "predictor", cfg.embed_dim, cfg.mlp_hidden, cfg.embed_dim, &mut r));
        let fused_projection = MlpHead::init(&mut theta, "fused_projection", cfg.d, cfg.mlp_hidden, cfg.embed_dim, &mut r);
        let fusion = if cfg.use_diversifuse {
            Some(FusionParams::init(&mut theta, "fusion", cfg.d, cfg.heads, cfg.scale_scores, &mut r)?)
        } else {
            None
        };
        let decoder = cfg.use_decoder.then(|| {
            Decoder::init(&mut theta, "decoder", cfg.d, cfg.token_side(), &cfg.decoder_widths(), &mut r)
        });
        let cb = Codebook::init(cfg.k, cfg.d, rng::mix(&[cfg.seed, stream::INIT, 0xC0DE]))?;
        let codebook = theta.add("codebook.embeddings", cb.into_embeddings());

        let mut phi = ParamStore::new();
        for (name, t) in theta.iter().take(mirrored) {
            phi.add(name, t.clone());
        }
        Ok(ModelState {
            arch: Architecture {
                encoder,
                projection,
                predictor,
                fused_projection,
                fusion,
                decoder,
                codebook,
            },
            theta,
            phi,
            ema_momentum: cfg.ema_momentum,
        })
    }

    pub fn codebook(&self) -> Result<Codebook> {
        Codebook::from_embeddings(self.theta.get(self.arch.codebook).clone())
    }

    /// Binds θ (trainable or frozen) and φ (always frozen) into `g`.
    pub fn bind(&self, g: &mut Graph, train_theta: bool) -> Binding {
        Binding {
            theta: self.theta.bind(g, train_theta),
            phi: self.phi.bind(g, false),
        }
    }

    /// `φ ← m·φ + (1 − m)·θ` for every mirrored parameter.
    pub fn ema_update(&mut self) -> Result<()> {
        ema_update(&mut self.phi, &self.theta, self.ema_momentum)
    }
}

pub fn ema_update(phi: &mut ParamStore, theta: &ParamStore, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::Contract(format!("EMA momentum {m} outside [0, 1]")));
    }
    for id in phi.ids().collect::<Vec<_>>() {
        let online = theta.get(id);
        if theta.name(id) != phi.name(id) || online.shape() != phi.get(id).shape() {
            return Err(Error::Contract(format!(
                "target parameter `{}` {:?} does not mirror `{}` {:?}",
                phi.name(id),
                phi.get(id).shape(),
                theta.name(id),
                online.shape()
            )));
        }
        let target = phi.get_mut(id);
        for (t, &o) in target.data_mut().iter_mut().zip(online.data()) {
            *t = m * *t + (1.0 - m) * o;
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Binding {
    pub theta: Bound,
    pub phi: Bound,
}

/// Graph handles produced by one directional forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutputs {
    pub z_theta: Var,
    pub z_phi: Var,
    pub z_theta_prime: Var,
    /// Target tokens `y_φ` (gradient-free).
    pub y_phi: Var,
    /// Fused tokens `y'_dc`.
    pub fused: Var,
    pub reconstruction: Option<Var>,
    pub quant: QuantizationResult,
}

/// Arithmetic mean over the token axis, as a `1 × D` row.
pub fn global_avg_pool(g: &mut Graph, tokens: Var) -> Result<Var> {
    g.mean_rows(tokens)
}

/// Wraps a `H×W` pixel buffer as a `1×H×W` graph constant.
pub fn image_constant(g: &mut Graph, pixels: &[f64], size: usize) -> Result<Var> {
    Ok(g.constant(Tensor::new(vec![1, size, size], pixels.to_vec())?))
}

/// Context encoder tokens for `image`.
pub fn encode_context(g: &mut Graph, state: &ModelState, bound: &Bound, image: Var) -> Result<Var> {
    state.arch.encoder.forward(g, bound, image)
}

/// The directional pass: `x1` feeds the target branch and quantizer, `x2`
/// the context branch.
pub fn forward_pass(
    g: &mut Graph,
    state: &ModelState,
    binding: &Binding,
    x1: Var,
    x2: Var,
    cfg: &RunConfig,
) -> Result<ForwardOutputs> {
    if g.shape(x1) != g.shape(x2) {
        return Err(Error::Config(format!(
            "views differ in shape: {:?} vs {:?}",
            g.shape(x1),
            g.shape(x2)
        )));
    }
    let arch = &state.arch;
    if arch.fusion.is_some() != cfg.use_diversifuse
        || arch.decoder.is_some() != cfg.use_decoder
        || arch.predictor.is_some() != cfg.use_predictor
    {
        return Err(Error::Config("model components do not match the run configuration".into()));
    }
    let (th, ph) = (&binding.theta, &binding.phi);

    let y_theta = arch.encoder.forward(g, th, x2)?;
    let y_phi_raw = arch.encoder.forward(g, ph, x1)?;
    let y_phi = g.stop_gradient(y_phi_raw)?;

    let pooled = global_avg_pool(g, y_theta)?;
    let mut z_theta = arch.projection.forward(g, th, pooled)?;
    if let Some(pred) = &arch.predictor {
        z_theta = pred.forward(g, th, z_theta)?;
    }
    let pooled_phi = global_avg_pool(g, y_phi)?;
    let z_phi = arch.projection.forward(g, ph, pooled_phi)?;

    let cb = Codebook::from_embeddings(g.value(th[arch.codebook]).clone())?;
    let quant = vq::quantize(g.value(y_phi), &cb)?;
    let selected = vq::lookup(g, &quant, th[arch.codebook])?;
    let y_d = if cfg.codebook_downstream_grad {
        selected
    } else {
        g.stop_gradient(selected)?
    };

    let fused = match &arch.fusion {
        Some(f) => f.forward(g, th, y_d, y_phi)?,
        None => y_d,
    };
    let pooled_fused = global_avg_pool(g, fused)?;
    let z_theta_prime = arch.fused_projection.forward(g, th, pooled_fused)?;
    let reconstruction = match &arch.decoder {
        Some(dec) => Some(dec.forward(g, th, fused)?),
        None => None,
    };

    Ok(ForwardOutputs {
        z_theta,
        z_phi,
        z_theta_prime,
        y_phi,
        fused,
        reconstruction,
        quant,
    })
}
