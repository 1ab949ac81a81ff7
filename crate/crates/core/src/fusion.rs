//! Multi-head cross-attention fusing quantized and continuous tokens.
//!
//! Quantized tokens form the queries, continuous tokens the keys and values.
//! Head outputs are concatenated back to width `D`; there is no output
//! projection, residual, or normalization.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};

/// `S = Q·Kᵀ`, optionally divided by `sqrt(d_h)`.
pub fn attention_scores(g: &mut Graph, queries: Var, keys: Var, scale: bool) -> Result<Var> {
    let (_, dq) = g.value(queries).dims2("attention_scores")?;
    let (_, dk) = g.value(keys).dims2("attention_scores")?;
    if dq != dk {
        return Err(Error::dim(
            "attention_scores",
            format!("query width {dq} differs from key width {dk}"),
        ));
    }
    let kt = g.transpose(keys)?;
    let s = g.matmul(queries, kt)?;
    if scale {
        g.scale(s, 1.0 / (dq as f64).sqrt())
    } else {
        Ok(s)
    }
}

pub fn attention_weights(g: &mut Graph, scores: Var) -> Result<Var> {
    let (r, c) = g.value(scores).dims2("attention_weights")?;
    if r != c {
        return Err(Error::dim("attention_weights", format!("score matrix is {r}×{c}, not square")));
    }
    g.softmax_rows(scores)
}

/// Graph leaves of one head's projections.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
}

/// Fused tokens `y'_dc` of shape `N × D`.
pub fn fuse(g: &mut Graph, y_d: Var, y_phi: Var, heads: &[HeadVars], scale: bool) -> Result<Var> {
    if g.shape(y_d) != g.shape(y_phi) {
        return Err(Error::Config(format!(
            "fusion inputs differ in shape: {:?} vs {:?}",
            g.shape(y_d),
            g.shape(y_phi)
        )));
    }
    let (_, d) = g.value(y_d).dims2("fuse")?;
    if heads.is_empty() || d % heads.len() != 0 {
        return Err(Error::Config(format!("{} heads do not divide D={d}", heads.len())));
    }
    let mut outs = Vec::with_capacity(heads.len());
    for h in heads {
        let q = g.matmul(y_d, h.wq)?;
        let k = g.matmul(y_phi, h.wk)?;
        let v = g.matmul(y_phi, h.wv)?;
        let s = attention_scores(g, q, k, scale)?;
        let w = attention_weights(g, s)?;
        outs.push(g.matmul(w, v)?);
    }
    g.concat_cols(&outs)
}

/// Per-head projection matrices `Wq, Wk, Wv ∈ R^{D × D/h}`.
#[derive(Clone, Debug)]
pub struct FusionParams {
    pub heads: usize,
    pub scale_scores: bool,
    pub wq: Vec<ParamId>,
    pub wk: Vec<ParamId>,
    pub wv: Vec<ParamId>,
}

impl FusionParams {
    /// Registers `3·heads` projections drawn from `N(0, 1/D)`.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        heads: usize,
        scale_scores: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("heads={heads} must divide D={d}")));
        }
        let dh = d / heads;
        let std = 1.0 / (d as f64).sqrt();
        let draw = |rng: &mut dyn rand::RngCore| {
            let data = (0..d * dh)
                .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                .collect();
            Tensor::new(vec![d, dh], data)
        };
        let (mut wq, mut wk, mut wv) = (vec![], vec![], vec![]);
        for h in 0..heads {
            wq.push(store.add(format!("{prefix}.head{h}.wq"), draw(rng)?));
            wk.push(store.add(format!("{prefix}.head{h}.wk"), draw(rng)?));
            wv.push(store.add(format!("{prefix}.head{h}.wv"), draw(rng)?));
        }
        Ok(FusionParams {
            heads,
            scale_scores,
            wq,
            wk,
            wv,
        })
    }

    pub fn head_vars(&self, bound: &Bound) -> Vec<HeadVars> {
        (0..self.heads)
            .map(|h| HeadVars {
                wq: bound[self.wq[h]],
                wk: bound[self.wk[h]],
                wv: bound[self.wv[h]],
            })
            .collect()
    }

    pub fn forward(&self, g: &mut Graph, bound: &Bound, y_d: Var, y_phi: Var) -> Result<Var> {
        fuse(g, y_d, y_phi, &self.head_vars(bound), self.scale_scores)
    }
}
