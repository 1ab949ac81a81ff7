//! Similarity, reconstruction and quantization terms and their symmetric
//! combination.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::config::{ReconNorm, RunConfig};
use crate::error::{Error, Result};
use crate::model::{forward_pass, Binding, ForwardOutputs, ModelState};
use crate::vq;

const MIN_NORM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub gamma: f64,
    pub alpha_commit: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.5,
            gamma: 0.5,
            alpha_commit: 0.5,
        }
    }
}

impl LossWeights {
    pub fn from_config(cfg: &RunConfig) -> Self {
        LossWeights {
            alpha: cfg.alpha,
            gamma: cfg.gamma,
            alpha_commit: cfg.alpha_commit,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.gamma < 0.0 || self.alpha_commit < 0.0 {
            return Err(Error::Config(format!("loss weights must be nonnegative: {self:?}")));
        }
        Ok(())
    }
}

/// Scalar values of every loss term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub l2: f64,
    pub l_cb: f64,
    pub l_ce: f64,
    pub l_q: f64,
    pub l_r: f64,
    pub total: f64,
    /// Raw cosine between `z_θ` and `z_φ`.
    pub cos1: f64,
    /// Raw cosine between `z_θ` and `z'_θ`.
    pub cos2: f64,
}

impl LossBreakdown {
    /// `α(l1 + l2) + (l_cb + α_c·l_ce) + γ·l_r`
    pub fn recompose(&self, w: &LossWeights) -> f64 {
        w.alpha * (self.l1 + self.l2) + (self.l_cb + w.alpha_commit * self.l_ce) + w.gamma * self.l_r
    }

    /// Term-wise mean of several breakdowns.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut acc = LossBreakdown::default();
        for b in items {
            acc.l1 += b.l1;
            acc.l2 += b.l2;
            acc.l_cb += b.l_cb;
            acc.l_ce += b.l_ce;
            acc.l_q += b.l_q;
            acc.l_r += b.l_r;
            acc.total += b.total;
            acc.cos1 += b.cos1;
            acc.cos2 += b.cos2;
        }
        LossBreakdown {
            l1: acc.l1 / n,
            l2: acc.l2 / n,
            l_cb: acc.l_cb / n,
            l_ce: acc.l_ce / n,
            l_q: acc.l_q / n,
            l_r: acc.l_r / n,
            total: acc.total / n,
            cos1: acc.cos1 / n,
            cos2: acc.cos2 / n,
        }
    }

    pub fn all_finite(&self) -> bool {
        [self.l1, self.l2, self.l_cb, self.l_ce, self.l_q, self.l_r, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim(
            "cosine_similarity",
            format!("lengths {} and {} differ", a.len(), b.len()),
        ));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    for n in [na, nb] {
        if n < MIN_NORM {
            return Err(Error::DegenerateEmbedding { norm: n });
        }
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// `2 − 2·cos(a, b)`
pub fn similarity_loss(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(2.0 - 2.0 * cosine_similarity(a, b)?)
}

/// Graph form of [`cosine_similarity`].
pub fn cosine_var(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let na = g.l2_norm(a)?;
    let nb = g.l2_norm(b)?;
    for n in [na, nb] {
        let v = g.value(n).item();
        if v < MIN_NORM {
            return Err(Error::DegenerateEmbedding { norm: v });
        }
    }
    let prod = g.mul(a, b)?;
    let dot = g.sum(prod)?;
    let denom = g.mul(na, nb)?;
    g.div(dot, denom)
}

/// Graph form of [`similarity_loss`]; returns `(loss, cosine)`.
pub fn similarity_loss_var(g: &mut Graph, a: Var, b: Var) -> Result<(Var, Var)> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::dim(
            "similarity_loss",
            format!("shapes {:?} and {:?} differ", g.shape(a), g.shape(b)),
        ));
    }
    let cos = cosine_var(g, a, b)?;
    let two = g.constant(Tensor::scalar(2.0));
    let neg = g.scale(cos, -2.0)?;
    Ok((g.add(two, neg)?, cos))
}

pub fn reconstruction_loss(g: &mut Graph, x: Var, x_prime: Var, norm: ReconNorm) -> Result<Var> {
    if g.shape(x) != g.shape(x_prime) {
        return Err(Error::dim(
            "reconstruction_loss",
            format!("shapes {:?} and {:?} differ", g.shape(x), g.shape(x_prime)),
        ));
    }
    let diff = g.sub(x, x_prime)?;
    match norm {
        ReconNorm::Mse => {
            let sq = g.mul(diff, diff)?;
            g.mean(sq)
        }
        ReconNorm::L2 => g.l2_norm(diff),
    }
}

/// Graph handles of every term of one directional loss.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub l1: Var,
    pub l2: Var,
    pub l_cb: Var,
    pub l_ce: Var,
    pub l_q: Var,
    pub l_r: Option<Var>,
    pub total: Var,
    pub cos1: Var,
    pub cos2: Var,
}

impl LossTerms {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        let v = |x: Var| g.value(x).item();
        LossBreakdown {
            l1: v(self.l1),
            l2: v(self.l2),
            l_cb: v(self.l_cb),
            l_ce: v(self.l_ce),
            l_q: v(self.l_q),
            l_r: self.l_r.map_or(0.0, v),
            total: v(self.total),
            cos1: v(self.cos1),
            cos2: v(self.cos2),
        }
    }
}

/// `L_θ = α(L1 + L2) + L_q + γ·L_r` for one forward direction.
///
/// The reconstruction target is `x1`, the view consumed by the target
/// branch whose fused tokens feed the decoder.
pub fn directional_loss(
    g: &mut Graph,
    out: &ForwardOutputs,
    x1: Var,
    codebook: Var,
    w: &LossWeights,
    cfg: &RunConfig,
) -> Result<LossTerms> {
    w.validate()?;
    let (l1, cos1) = similarity_loss_var(g, out.z_theta, out.z_phi)?;
    let (l2, cos2) = similarity_loss_var(g, out.z_theta, out.z_theta_prime)?;
    let q = vq::quantization_loss(
        g,
        out.y_phi,
        &out.quant,
        codebook,
        w.alpha_commit,
        cfg.inject_codebook_sign_bug,
    )?;
    let l_r = match out.reconstruction {
        Some(xp) => Some(reconstruction_loss(g, x1, xp, cfg.recon_norm)?),
        None => None,
    };

    let sim = g.add(l1, l2)?;
    let sim = g.scale(sim, w.alpha)?;
    let mut total = g.add(sim, q.l_q)?;
    if let Some(lr) = l_r {
        let rec = g.scale(lr, w.gamma)?;
        total = g.add(total, rec)?;
    }
    Ok(LossTerms {
        l1,
        l2,
        l_cb: q.l_cb,
        l_ce: q.l_ce,
        l_q: q.l_q,
        l_r,
        total,
        cos1,
        cos2,
    })
}

/// Mean of the two directional totals.
pub fn symmetric_loss(bd_12: &LossBreakdown, bd_21: &LossBreakdown) -> f64 {
    (bd_12.total + bd_21.total) / 2.0
}

/// Both directional losses for a view pair and their symmetric mean.
pub struct SymmetricTerms {
    pub forward: LossTerms,
    pub swapped: LossTerms,
    pub loss: Var,
    pub indices: Vec<usize>,
}

pub fn symmetric_objective(
    g: &mut Graph,
    state: &ModelState,
    binding: &Binding,
    x1: Var,
    x2: Var,
    cfg: &RunConfig,
) -> Result<SymmetricTerms> {
    let w = LossWeights::from_config(cfg);
    let codebook = binding.theta[state.arch.codebook];
    let out12 = forward_pass(g, state, binding, x1, x2, cfg)?;
    let forward = directional_loss(g, &out12, x1, codebook, &w, cfg)?;
    let out21 = forward_pass(g, state, binding, x2, x1, cfg)?;
    let swapped = directional_loss(g, &out21, x2, codebook, &w, cfg)?;
    let sum = g.add(forward.total, swapped.total)?;
    let loss = g.scale(sum, 0.5)?;
    let mut indices = out12.quant.indices;
    indices.extend(out21.quant.indices);
    Ok(SymmetricTerms {
        forward,
        swapped,
        loss,
        indices,
    })
}
