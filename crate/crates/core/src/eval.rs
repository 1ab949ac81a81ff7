//! Downstream evaluation: frozen-encoder linear probing, full fine-tuning,
//! and multi-label ROC-AUC.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::config::RunConfig;
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::model::{global_avg_pool, image_constant, ModelState};
use crate::optim::{lars_trust, LARS_EPS};
use crate::params::Bound;
use crate::rng::{self, stream};

/// Images encoded per graph during feature extraction.
const EXTRACT_CHUNK: usize = 32;
const PROBE_INIT_STD: f64 = 0.01;
/// Encoder tensors step by `lr · ENCODER_TRUST · ‖w‖ / ‖∇w‖`. The loss is
/// far stiffer in the encoder than in the head, so they cannot share `lr`.
pub const ENCODER_TRUST: f64 = 1e-4;

/// Pooled context-encoder features, one row per index.
pub fn extract_features(state: &ModelState, data: &Dataset, indices: &[usize]) -> Result<Vec<Vec<f64>>> {
    let size = state.arch.encoder.image_size;
    if data.size != size {
        return Err(Error::dim(
            "extract_features",
            format!("images are {0}×{0}, encoder expects {1}×{1}", data.size, size),
        ));
    }
    let mut rows = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(EXTRACT_CHUNK) {
        let mut g = Graph::new();
        let theta = state.theta.bind(&mut g, false);
        for &i in chunk {
            let x = image_constant(&mut g, &data.samples[i].pixels, size)?;
            let tokens = state.arch.encoder.forward(&mut g, &theta, x)?;
            let pooled = global_avg_pool(&mut g, tokens)?;
            rows.push(g.value(pooled).data().to_vec());
        }
    }
    Ok(rows)
}

/// Per-column affine map applied before the linear head, fixed from the
/// features the head is first fitted on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(features: &[Vec<f64>]) -> Result<Self> {
        let Some(first) = features.first() else {
            return Err(Error::Contract("cannot standardize zero rows".into()));
        };
        let (n, f) = (features.len() as f64, first.len());
        let mut mean = vec![0.0; f];
        for row in features {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; f];
        for row in features {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        // Nearly dead channels would otherwise be blown up by orders of
        // magnitude, so no column is scaled past ten times the median one.
        let mut std: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();
        let mut sorted = std.clone();
        sorted.sort_by(f64::total_cmp);
        let floor = (0.1 * sorted[f / 2]).max(1e-12);
        for s in &mut std {
            *s = s.max(floor);
        }
        let inv_std = std.iter().map(|s| 1.0 / s).collect();
        Ok(Standardizer { mean, inv_std })
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(&self.mean)
            .zip(&self.inv_std)
            .map(|((v, m), s)| (v - m) * s)
            .collect()
    }
}

/// Linear multi-label head: `sigmoid(x·W + b)` per class.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeModel {
    /// `feature_dim × classes`
    pub weight: Tensor,
    pub bias: Vec<f64>,
    pub standardizer: Standardizer,
}

impl ProbeModel {
    pub fn init(feature_dim: usize, classes: usize, standardizer: Standardizer, seed: u64) -> Result<Self> {
        if standardizer.mean.len() != feature_dim {
            return Err(Error::dim("probe", "standardizer width differs from feature width"));
        }
        let mut r = rng::seeded(rng::mix(&[seed, stream::PROBE]));
        let normal = Normal::new(0.0, PROBE_INIT_STD).expect("valid std");
        let data = (0..feature_dim * classes).map(|_| normal.sample(&mut r)).collect();
        Ok(ProbeModel {
            weight: Tensor::new(vec![feature_dim, classes], data)?,
            bias: vec![0.0; classes],
            standardizer,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn logits(&self, features: &[f64]) -> Result<Vec<f64>> {
        let (f, c) = (self.feature_dim(), self.classes());
        if features.len() != f {
            return Err(Error::dim("probe", format!("feature width {} != {f}", features.len())));
        }
        let x = self.standardizer.apply(features);
        let w = self.weight.data();
        let mut out = self.bias.clone();
        for (i, xi) in x.iter().enumerate() {
            for (o, wij) in out.iter_mut().zip(&w[i * c..(i + 1) * c]) {
                *o += xi * wij;
            }
        }
        Ok(out)
    }

    pub fn scores(&self, features: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        features.iter().map(|f| self.logits(f)).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.weight.all_finite() && self.bias.iter().all(|b| b.is_finite())
    }
}

/// `log(1 + e^s) − y·s`, stable for large `|s|`.
fn bce_with_logit(s: f64, y: f64) -> f64 {
    s.max(0.0) + (-s.abs()).exp().ln_1p() - y * s
}

fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

fn check_labels(features: &[Vec<f64>], labels: &[Vec<u8>]) -> Result<(usize, usize)> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::dim(
            "probe",
            format!("{} feature rows vs {} label rows", features.len(), labels.len()),
        ));
    }
    let (f, c) = (features[0].len(), labels[0].len());
    if features.iter().any(|r| r.len() != f) || labels.iter().any(|l| l.len() != c || l.iter().any(|&v| v > 1)) {
        return Err(Error::Contract("ragged features or non-binary labels".into()));
    }
    Ok((f, c))
}

/// Mean sigmoid cross-entropy over all rows and classes.
pub fn probe_loss(model: &ProbeModel, features: &[Vec<f64>], labels: &[Vec<u8>]) -> Result<f64> {
    check_labels(features, labels)?;
    let mut total = 0.0;
    for (x, y) in features.iter().zip(labels) {
        for (s, &t) in model.logits(x)?.iter().zip(y) {
            total += bce_with_logit(*s, t as f64);
        }
    }
    Ok(total / (features.len() * model.classes()) as f64)
}

#[derive(Clone, Debug)]
pub struct ProbeFit {
    pub model: ProbeModel,
    /// Loss before each epoch's step, then the final loss.
    pub losses: Vec<f64>,
}

/// Full-batch gradient descent on `model`, in place.
fn descend(model: &mut ProbeModel, features: &[Vec<f64>], labels: &[Vec<u8>], epochs: usize, lr: f64) -> Result<Vec<f64>> {
    let (f, c) = check_labels(features, labels)?;
    if f != model.feature_dim() || c != model.classes() {
        return Err(Error::dim("probe", "model does not match features/labels"));
    }
    let xs: Vec<Vec<f64>> = features.iter().map(|r| model.standardizer.apply(r)).collect();
    let norm = 1.0 / (xs.len() * c) as f64;
    let mut losses = Vec::with_capacity(epochs + 1);
    for _ in 0..=epochs {
        let mut loss = 0.0;
        let mut gw = vec![0.0; f * c];
        let mut gb = vec![0.0; c];
        for (x, y) in xs.iter().zip(labels) {
            let w = model.weight.data();
            for j in 0..c {
                let s = model.bias[j] + (0..f).map(|i| x[i] * w[i * c + j]).sum::<f64>();
                let t = y[j] as f64;
                loss += bce_with_logit(s, t);
                let d = (sigmoid(s) - t) * norm;
                gb[j] += d;
                for i in 0..f {
                    gw[i * c + j] += d * x[i];
                }
            }
        }
        losses.push(loss * norm);
        if losses.len() > epochs {
            break;
        }
        for (w, g) in model.weight.data_mut().iter_mut().zip(&gw) {
            *w -= lr * g;
        }
        for (b, g) in model.bias.iter_mut().zip(&gb) {
            *b -= lr * g;
        }
    }
    if !model.all_finite() {
        return Err(Error::Numeric("probe parameters became non-finite".into()));
    }
    Ok(losses)
}

/// Seeded init, then full-batch gradient descent on mean sigmoid
/// cross-entropy. Features are standardized with their own column stats.
pub fn train_linear_probe(features: &[Vec<f64>], labels: &[Vec<u8>], epochs: usize, lr: f64, seed: u64) -> Result<ProbeFit> {
    let (f, c) = check_labels(features, labels)?;
    let mut model = ProbeModel::init(f, c, Standardizer::fit(features)?, seed)?;
    let losses = descend(&mut model, features, labels, epochs, lr)?;
    Ok(ProbeFit { model, losses })
}

#[derive(Clone, Debug)]
pub struct FineTuned {
    pub state: ModelState,
    pub model: ProbeModel,
    pub losses: Vec<f64>,
}

/// One graph: encode every labelled image with trainable θ, pool,
/// standardize, apply the head, mean sigmoid cross-entropy.
fn fine_tune_loss(
    g: &mut Graph,
    state: &ModelState,
    theta: &Bound,
    head: (Var, Var),
    model: &ProbeModel,
    data: &Dataset,
    indices: &[usize],
) -> Result<Var> {
    let f = model.feature_dim();
    let mean = g.constant(Tensor::new(vec![1, f], model.standardizer.mean.clone())?);
    let inv = g.constant(Tensor::new(vec![1, f], model.standardizer.inv_std.clone())?);
    let mut total = None;
    for &i in indices {
        let s = &data.samples[i];
        let x = image_constant(g, &s.pixels, data.size)?;
        let tokens = state.arch.encoder.forward(g, theta, x)?;
        let pooled = global_avg_pool(g, tokens)?;
        let centred = g.sub(pooled, mean)?;
        let z = g.mul(centred, inv)?;
        let lin = g.matmul(z, head.0)?;
        let logits = g.add_bias(lin, head.1)?;
        let y = g.constant(Tensor::new(vec![1, s.labels.len()], s.labels.iter().map(|&v| v as f64).collect())?);
        let sp = g.softplus(logits)?;
        let ys = g.mul(y, logits)?;
        let bce = g.sub(sp, ys)?;
        let part = g.sum(bce)?;
        total = Some(match total {
            None => part,
            Some(t) => g.add(t, part)?,
        });
    }
    let total = total.ok_or_else(|| Error::Contract("fine-tuning needs at least one labelled image".into()))?;
    g.scale(total, 1.0 / (indices.len() * model.classes()) as f64)
}

/// Full-batch gradient descent on the linear head and the context encoder
/// jointly. The head starts exactly as [`train_linear_probe`]'s would.
pub fn fine_tune(state: &ModelState, data: &Dataset, indices: &[usize], epochs: usize, lr: f64, seed: u64) -> Result<FineTuned> {
    let features = extract_features(state, data, indices)?;
    let labels: Vec<Vec<u8>> = indices.iter().map(|&i| data.samples[i].labels.clone()).collect();
    let (f, c) = check_labels(&features, &labels)?;
    let mut model = ProbeModel::init(f, c, Standardizer::fit(&features)?, seed)?;
    let mut state = state.clone();
    let encoder_ids: Vec<_> = state.arch.encoder.convs.iter().flat_map(|cv| [cv.weight, cv.bias]).collect();
    let mut losses = Vec::with_capacity(epochs + 1);
    let enc_lr = lr * ENCODER_TRUST;
    for epoch in 0..=epochs {
        let mut g = Graph::new();
        let theta = state.theta.bind(&mut g, true);
        let w = g.param(model.weight.clone());
        let b = g.param(Tensor::new(vec![c], model.bias.clone())?);
        let loss = fine_tune_loss(&mut g, &state, &theta, (w, b), &model, data, indices)?;
        losses.push(g.value(loss).item());
        if epoch == epochs {
            break;
        }
        g.backward(loss)?;
        let grads = theta.grads(&g, &state.theta);
        for &id in &encoder_ids {
            let t = state.theta.get_mut(id);
            let g = &grads[id.index()];
            let rate = enc_lr * lars_trust(t.data(), g, 0.0, LARS_EPS);
            for (p, d) in t.data_mut().iter_mut().zip(g) {
                *p -= rate * d;
            }
        }
        let step = |dst: &mut [f64], grad: Option<&[f64]>| {
            if let Some(grad) = grad {
                for (p, d) in dst.iter_mut().zip(grad) {
                    *p -= lr * d;
                }
            }
        };
        step(model.weight.data_mut(), g.grad(w));
        step(&mut model.bias, g.grad(b));
    }
    if !model.all_finite() || state.theta.tensors().iter().any(|t| !t.all_finite()) {
        return Err(Error::Numeric("fine-tuning produced non-finite parameters".into()));
    }
    Ok(FineTuned { state, model, losses })
}

/// Mann–Whitney AUC: fraction of (positive, negative) pairs ranked
/// correctly, ties counting one half. `None` when a class is absent.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // midranks (doubled, to stay in integers) summed over positives
    let mut rank2_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let doubled_mid = (i + 1 + j + 1) as u64;
        for &k in &order[i..=j] {
            if labels[k] == 1 {
                rank2_sum += doubled_mid;
            }
        }
        i = j + 1;
    }
    let (p, n) = (pos as u64, neg as u64);
    let u2 = rank2_sum - p * (p + 1);
    Some(u2 as f64 / (2 * p * n) as f64)
}

/// Per-class AUCs and their mean over defined classes.
pub fn macro_auc(scores: &[Vec<f64>], labels: &[Vec<u8>]) -> (Vec<Option<f64>>, Option<f64>) {
    let classes = labels.first().map_or(0, Vec::len);
    let per: Vec<Option<f64>> = (0..classes)
        .map(|c| {
            let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
            let l: Vec<u8> = labels.iter().map(|r| r[c]).collect();
            roc_auc(&s, &l)
        })
        .collect();
    let defined: Vec<f64> = per.iter().flatten().copied().collect();
    let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    (per, mean)
}

/// Seeded subset of `pool`, stratified by label pattern. Every pattern keeps
/// `max(1, round(fraction · count))` members.
pub fn stratified_subset(data: &Dataset, pool: &[usize], fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("label fraction must lie in (0, 1], got {fraction}")));
    }
    let mut groups: BTreeMap<&[u8], Vec<usize>> = BTreeMap::new();
    for &i in pool {
        groups.entry(data.samples[i].labels.as_slice()).or_default().push(i);
    }
    let mut r = rng::seeded(rng::mix(&[seed, stream::SUBSET]));
    let mut out = Vec::new();
    for members in groups.values_mut() {
        members.shuffle(&mut r);
        let keep = ((fraction * members.len() as f64).round() as usize).clamp(1, members.len());
        out.extend_from_slice(&members[..keep]);
    }
    out.sort_unstable();
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Linear,
    Finetune,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSettings {
    pub fraction: f64,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        ProbeSettings {
            fraction: 0.1,
            epochs: 300,
            lr: 0.5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub label_fraction: f64,
    /// `null` where the test split lacks positives or negatives.
    pub per_class_auc: Vec<Option<f64>>,
    pub macro_auc: Option<f64>,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    /// Same protocol and budget on a freshly initialized encoder.
    pub baseline_macro_auc: Option<f64>,
}

fn labels_of(data: &Dataset, idx: &[usize]) -> Vec<Vec<u8>> {
    idx.iter().map(|&i| data.samples[i].labels.clone()).collect()
}

fn score_protocol(state: &ModelState, data: &Dataset, train_idx: &[usize], test_idx: &[usize], protocol: Protocol, s: &ProbeSettings) -> Result<Option<f64>> {
    let (encoder, model) = match protocol {
        Protocol::Linear => {
            let feats = extract_features(state, data, train_idx)?;
            let fit = train_linear_probe(&feats, &labels_of(data, train_idx), s.epochs, s.lr, s.seed)?;
            (None, fit.model)
        }
        Protocol::Finetune => {
            let ft = fine_tune(state, data, train_idx, s.epochs, s.lr, s.seed)?;
            (Some(ft.state), ft.model)
        }
    };
    let test_feats = extract_features(encoder.as_ref().unwrap_or(state), data, test_idx)?;
    let scores = model.scores(&test_feats)?;
    Ok(macro_auc(&scores, &labels_of(data, test_idx)).1)
}

/// Scores `state` and a randomly initialized model of the same config on the
/// test split, both trained on the same stratified label subset.
pub fn evaluate(state: &ModelState, cfg: &RunConfig, data: &Dataset, protocol: Protocol, s: &ProbeSettings) -> Result<EvalReport> {
    let train_pool = data.indices(Split::Train);
    let test_idx = data.indices(Split::Test);
    if test_idx.is_empty() {
        return Err(Error::Config("dataset has no test samples".into()));
    }
    let train_idx = stratified_subset(data, &train_pool, s.fraction, s.seed)?;
    let test_labels = labels_of(data, &test_idx);

    let (per_class_auc, macro_auc) = {
        let (encoder, model) = match protocol {
            Protocol::Linear => {
                let feats = extract_features(state, data, &train_idx)?;
                (None, train_linear_probe(&feats, &labels_of(data, &train_idx), s.epochs, s.lr, s.seed)?.model)
            }
            Protocol::Finetune => {
                let ft = fine_tune(state, data, &train_idx, s.epochs, s.lr, s.seed)?;
                (Some(ft.state), ft.model)
            }
        };
        let feats = extract_features(encoder.as_ref().unwrap_or(state), data, &test_idx)?;
        macro_auc(&model.scores(&feats)?, &test_labels)
    };
    let baseline = ModelState::init(cfg)?;
    let baseline_macro_auc = score_protocol(&baseline, data, &train_idx, &test_idx, protocol, s)?;
    Ok(EvalReport {
        protocol,
        label_fraction: s.fraction,
        per_class_auc,
        macro_auc,
        n_train: train_idx.len(),
        n_test: test_idx.len(),
        seed: s.seed,
        baseline_macro_auc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Preset;
    use crate::data::generate_synthetic;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};
    use rand::Rng;

    #[test]
    fn auc_cases() {
        assert_eq!(roc_auc(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]), Some(1.0));
        assert_eq!(roc_auc(&[0.5; 4], &[1, 0, 1, 0]), Some(0.5));
        assert_eq!(roc_auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]), Some(0.75));
        assert_eq!(roc_auc(&[0.1, 0.2], &[1, 1]), None);
    }

    fn pair_oracle(s: &[f64], l: &[u8]) -> Option<f64> {
        let mut hits = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in l.iter().enumerate() {
            for (j, &lj) in l.iter().enumerate() {
                if li == 1 && lj == 0 {
                    pairs += 1.0;
                    if s[i] > s[j] {
                        hits += 1.0;
                    } else if s[i] == s[j] {
                        hits += 0.5;
                    }
                }
            }
        }
        (pairs > 0.0).then(|| hits / pairs)
    }

    #[test]
    fn auc_matches_pair_oracle() {
        let mut r = rng::seeded(11);
        for _ in 0..1000 {
            let n = r.gen_range(1..=50);
            // a coarse grid forces ties
            let s: Vec<f64> = (0..n).map(|_| r.gen_range(0..8) as f64 / 4.0).collect();
            let l: Vec<u8> = (0..n).map(|_| r.gen_range(0..2)).collect();
            assert_eq!(roc_auc(&s, &l), pair_oracle(&s, &l));
        }
    }

    proptest! {
        #[test]
        fn auc_rank_invariances(raw in proptest::collection::vec((-5.0f64..5.0, 0u8..2), 2..40)) {
            let s: Vec<f64> = raw.iter().map(|p| p.0).collect();
            let l: Vec<u8> = raw.iter().map(|p| p.1).collect();
            let a = roc_auc(&s, &l);
            let t: Vec<f64> = s.iter().map(|v| v.exp() * 3.0 + 1.0).collect();
            prop_assert_eq!(roc_auc(&t, &l), a);
            let neg: Vec<f64> = s.iter().map(|v| -v).collect();
            let mut sorted = s.clone();
            sorted.sort_by(f64::total_cmp);
            let ties = sorted.windows(2).any(|w| w[0] == w[1]);
            if let (Some(a), Some(b), false) = (a, roc_auc(&neg, &l), ties) {
                prop_assert!((a + b - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn separable_probe_is_perfect() {
        let mut r = rng::seeded(2);
        let feats: Vec<Vec<f64>> = (0..40).map(|i| {
            let x = if i % 2 == 0 { r.gen_range(0.1..2.0) } else { -r.gen_range(0.1..2.0) };
            vec![x, r.gen_range(-1.0..1.0)]
        }).collect();
        let labels: Vec<Vec<u8>> = feats.iter().map(|f| vec![(f[0] > 0.0) as u8, (f[0] < 0.0) as u8]).collect();
        let fit = train_linear_probe(&feats, &labels, 200, 0.5, 0).unwrap();
        let scores = fit.model.scores(&feats).unwrap();
        let correct = scores.iter().zip(&labels).filter(|(s, l)| (s[0] > 0.0) == (l[0] == 1)).count();
        assert_eq!(correct, 40);
        assert!(fit.losses.last() <= fit.losses.first());
    }

    #[test]
    fn null_training_and_determinism() {
        let feats = vec![vec![1.0, 2.0], vec![-1.0, 0.5], vec![0.3, 0.3]];
        let labels = vec![vec![1], vec![0], vec![1]];
        let a = train_linear_probe(&feats, &labels, 50, 0.0, 4).unwrap();
        let init = ProbeModel::init(2, 1, Standardizer::fit(&feats).unwrap(), 4).unwrap();
        assert_eq!(a.model, init);
        let b = train_linear_probe(&feats, &labels, 50, 0.3, 4).unwrap();
        let c = train_linear_probe(&feats, &labels, 50, 0.3, 4).unwrap();
        assert_eq!(b.model, c.model);
    }

    fn small() -> (ModelState, Dataset) {
        let cfg = RunConfig {
            image_size: 16,
            ..RunConfig::preset(Preset::Tiny)
        };
        (ModelState::init(&cfg).unwrap(), generate_synthetic(30, 2, 16, 3).unwrap())
    }

    #[test]
    fn features_are_pure_and_shaped() {
        let (st, ds) = small();
        let a = extract_features(&st, &ds, &[0, 1, 2]).unwrap();
        let b = extract_features(&st, &ds, &[0, 1, 2]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].len(), 8);
        let mut dup = ds.clone();
        dup.samples[1].pixels = dup.samples[0].pixels.clone();
        let c = extract_features(&st, &dup, &[0, 1]).unwrap();
        assert_eq!(c[0], c[1]);
        let wrong = generate_synthetic(4, 2, 32, 0).unwrap();
        assert!(matches!(extract_features(&st, &wrong, &[0]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn desk_features_have_width_64() {
        let st = ModelState::init(&RunConfig::preset(Preset::Desk)).unwrap();
        let ds = generate_synthetic(2, 2, 32, 0).unwrap();
        assert_eq!(extract_features(&st, &ds, &[0, 1]).unwrap()[0].len(), 64);
    }

    #[test]
    fn probe_loss_nonincreasing_at_small_lr() {
        let (st, ds) = small();
        let idx = ds.indices(Split::Train);
        let feats = extract_features(&st, &ds, &idx).unwrap();
        let fit = train_linear_probe(&feats, &labels_of(&ds, &idx), 100, 0.01, 0).unwrap();
        assert!(fit.losses.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn fine_tune_null_and_live() {
        let (st, ds) = small();
        let idx = ds.indices(Split::Train);
        let frozen = fine_tune(&st, &ds, &idx, 5, 0.0, 1).unwrap();
        assert_eq!(frozen.state.theta, st.theta);
        let feats = extract_features(&st, &ds, &idx).unwrap();
        let probe = train_linear_probe(&feats, &labels_of(&ds, &idx), 5, 0.0, 1).unwrap();
        assert_eq!(frozen.model, probe.model);

        let live = fine_tune(&st, &ds, &idx, 5, 0.1, 1).unwrap();
        let enc = st.arch.encoder.convs[0].weight;
        assert_ne!(live.state.theta.get(enc), st.theta.get(enc));
        let linear = train_linear_probe(&feats, &labels_of(&ds, &idx), 5, 0.1, 1).unwrap();
        assert!(live.losses.last() < linear.losses.last());
    }

    #[test]
    fn fine_tune_loss_stays_below_probe() {
        let (st, ds) = small();
        let idx = ds.indices(Split::Train);
        let feats = extract_features(&st, &ds, &idx).unwrap();
        for epochs in [20, 100] {
            let ft = fine_tune(&st, &ds, &idx, epochs, 0.5, 3).unwrap();
            let lp = train_linear_probe(&feats, &labels_of(&ds, &idx), epochs, 0.5, 3).unwrap();
            assert!(ft.losses.last().unwrap() <= lp.losses.last().unwrap(), "{epochs} epochs");
        }
    }

    #[test]
    fn fine_tune_initial_loss_matches_probe() {
        let (st, ds) = small();
        let idx = ds.indices(Split::Train);
        let ft = fine_tune(&st, &ds, &idx, 0, 0.1, 7).unwrap();
        let feats = extract_features(&st, &ds, &idx).unwrap();
        let fit = train_linear_probe(&feats, &labels_of(&ds, &idx), 0, 0.1, 7).unwrap();
        assert!((ft.losses[0] - fit.losses[0]).abs() < 1e-12);
    }

    #[test]
    fn subsets_are_stratified_and_seeded() {
        let ds = generate_synthetic(100, 2, 16, 0).unwrap();
        let pool = ds.indices(Split::Train);
        let a = stratified_subset(&ds, &pool, 0.1, 3).unwrap();
        assert_eq!(a, stratified_subset(&ds, &pool, 0.1, 3).unwrap());
        assert_eq!(a.len(), 8);
        assert_eq!(a.iter().filter(|&&i| ds.samples[i].labels[0] == 1).count(), 4);
        assert_eq!(stratified_subset(&ds, &pool, 1.0, 3).unwrap(), pool);
        assert!(stratified_subset(&ds, &pool, 0.0, 3).is_err());
        assert!(stratified_subset(&ds, &pool, 1.5, 3).is_err());
    }

    #[test]
    fn report_is_deterministic() {
        let cfg = RunConfig {
            image_size: 16,
            ..RunConfig::preset(Preset::Tiny)
        };
        let (st, ds) = small();
        let s = ProbeSettings {
            fraction: 0.5,
            epochs: 20,
            ..Default::default()
        };
        let a = evaluate(&st, &cfg, &ds, Protocol::Linear, &s).unwrap();
        assert_eq!(a, evaluate(&st, &cfg, &ds, Protocol::Linear, &s).unwrap());
        assert_eq!(a.n_test, 6);
        // the evaluated state is the fresh init, so the baseline coincides
        assert_eq!(a.macro_auc, a.baseline_macro_auc);
    }
}
