//! Pre-training loop and the composite-loss gradient check.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_check, GradReport, Graph, Tensor};
use crate::config::RunConfig;
use crate::data::{augment_pair, AugmentConfig, Dataset, RngStream, Split};
use crate::error::{Error, Result};
use crate::model::{image_constant, Binding, ModelState};
use crate::objectives::{symmetric_objective, LossBreakdown};
use crate::optim::{cosine_lr, OptimizerState};
use crate::params::Bound;
use crate::rng::{self, stream};
use crate::vq;

/// One JSONL line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub l1: f64,
    pub l2: f64,
    pub l_cb: f64,
    pub l_ce: f64,
    pub l_q: f64,
    pub l_r: f64,
    pub total: f64,
    /// Codebook perplexity of this step's assignments.
    pub perplexity: f64,
}

impl MetricsRecord {
    /// `α(l1 + l2) + l_cb + α_c·l_ce + γ·l_r`
    pub fn recomposed(&self, cfg: &RunConfig) -> f64 {
        cfg.alpha * (self.l1 + self.l2) + self.l_cb + cfg.alpha_commit * self.l_ce + cfg.gamma * self.l_r
    }
}

pub enum Event<'a> {
    Step(&'a MetricsRecord),
    EpochEnd { epoch: usize, state: &'a ModelState },
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub records: Vec<MetricsRecord>,
    pub steps: usize,
    pub epochs_run: usize,
    /// Perplexity over every assignment made in the last epoch run.
    pub final_epoch_perplexity: f64,
}

/// Loss breakdown and θ gradients for one batch of view pairs.
pub struct BatchResult {
    pub breakdown: LossBreakdown,
    pub grads: Vec<Vec<f64>>,
    pub indices: Vec<usize>,
}

/// Forward both directions for every pair, average, and backpropagate.
pub fn batch_gradients(state: &ModelState, cfg: &RunConfig, pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<BatchResult> {
    if pairs.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut g = Graph::new();
    let binding = state.bind(&mut g, true);
    let mut parts = Vec::with_capacity(2 * pairs.len());
    let mut indices = Vec::new();
    let mut sum = None;
    for (a, b) in pairs {
        let x1 = image_constant(&mut g, a, cfg.image_size)?;
        let x2 = image_constant(&mut g, b, cfg.image_size)?;
        let terms = symmetric_objective(&mut g, state, &binding, x1, x2, cfg)?;
        parts.push(terms.forward.breakdown(&g));
        parts.push(terms.swapped.breakdown(&g));
        indices.extend(terms.indices);
        sum = Some(match sum {
            None => terms.loss,
            Some(s) => g.add(s, terms.loss)?,
        });
    }
    let loss = g.scale(sum.expect("nonempty batch"), 1.0 / pairs.len() as f64)?;
    let breakdown = LossBreakdown::mean(&parts);
    if !breakdown.all_finite() || !g.value(loss).item().is_finite() {
        return Err(Error::Numeric(format!("non-finite loss: {breakdown:?}")));
    }
    g.backward(loss)?;
    let grads = binding.theta.grads(&g, &state.theta);
    Ok(BatchResult {
        breakdown,
        grads,
        indices,
    })
}

/// Pre-trains on the train split of `data`. `observer` sees every metrics
/// record and the state at each epoch end.
pub fn train(
    cfg: &RunConfig,
    data: &Dataset,
    augment: &AugmentConfig,
    state: &mut ModelState,
    observer: &mut dyn FnMut(Event<'_>) -> Result<()>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    augment.validate()?;
    if data.size != cfg.image_size {
        return Err(Error::dim(
            "train",
            format!("dataset images are {0}×{0}, config expects {1}×{1}", data.size, cfg.image_size),
        ));
    }
    let pool = data.indices(Split::Train);
    if pool.is_empty() {
        return Err(Error::Config("dataset has no training samples".into()));
    }
    let bpe = pool.len().div_ceil(cfg.batch_size);
    let total = cfg.total_steps(bpe);
    let mut opt = OptimizerState::new(&state.theta, cfg.optimizer, cfg.base_lr, cfg.momentum, cfg.weight_decay)?;

    let mut records = Vec::with_capacity(total);
    let mut step = 0;
    let mut epoch = 0;
    let mut epoch_indices = Vec::new();
    while step < total {
        let mut order = pool.clone();
        order.shuffle(&mut rng::seeded(rng::mix(&[cfg.seed, stream::SHUFFLE, epoch as u64])));
        epoch_indices.clear();
        for chunk in order.chunks(cfg.batch_size) {
            if step == total {
                break;
            }
            let pairs: Vec<_> = chunk
                .iter()
                .map(|&i| {
                    let s = RngStream::for_sample(cfg.seed, i, epoch);
                    augment_pair(&data.samples[i].pixels, data.size, augment, &s)
                })
                .collect();
            let lr = cosine_lr(step, total, cfg.base_lr)?;
            let batch = batch_gradients(state, cfg, &pairs)?;
            opt.step(&mut state.theta, &batch.grads, lr)?;
            state.ema_update()?;
            if state.theta.tensors().iter().chain(state.phi.tensors()).any(|t| !t.all_finite()) {
                return Err(Error::Numeric(format!(
                    "parameters became non-finite at step {step}: {:?}",
                    batch.breakdown
                )));
            }
            let bd = batch.breakdown;
            let rec = MetricsRecord {
                step,
                epoch,
                lr,
                l1: bd.l1,
                l2: bd.l2,
                l_cb: bd.l_cb,
                l_ce: bd.l_ce,
                l_q: bd.l_q,
                l_r: bd.l_r,
                total: bd.total,
                perplexity: vq::codebook_perplexity(&batch.indices, cfg.k)?,
            };
            observer(Event::Step(&rec))?;
            records.push(rec);
            epoch_indices.extend(batch.indices);
            step += 1;
        }
        epoch += 1;
        observer(Event::EpochEnd { epoch, state })?;
    }
    Ok(TrainSummary {
        records,
        steps: step,
        epochs_run: epoch,
        final_epoch_perplexity: vq::codebook_perplexity(&epoch_indices, cfg.k)?,
    })
}

/// Two random views of the configured size, fixed by `seed`.
pub fn random_views(cfg: &RunConfig, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut r = rng::seeded(rng::mix(&[seed, stream::AUGMENT, u64::MAX]));
    let n = cfg.image_size * cfg.image_size;
    let a = (0..n).map(|_| r.gen::<f64>()).collect();
    let b = (0..n).map(|_| r.gen::<f64>()).collect();
    (a, b)
}

/// Finite-difference check of every θ parameter through the full symmetric
/// objective on one random view pair.
pub fn gradcheck(cfg: &RunConfig, eps: f64) -> Result<GradReport> {
    let state = ModelState::init(cfg)?;
    let (a, b) = random_views(cfg, cfg.seed);
    let params: Vec<(String, Tensor)> = state.theta.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    grad_check(&params, eps, |g, vars| {
        let binding = Binding {
            theta: Bound::from_vars(vars.to_vec()),
            phi: state.phi.bind(g, false),
        };
        let x1 = image_constant(g, &a, cfg.image_size)?;
        let x2 = image_constant(g, &b, cfg.image_size)?;
        Ok(symmetric_objective(g, &state, &binding, x1, x2, cfg)?.loss)
    })
}
