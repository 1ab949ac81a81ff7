//! Codebook storage, nearest-codeword assignment and the two-term
//! quantization loss.

use rand::Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;

/// `K × D` table of codewords.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    embeddings: Tensor,
}

impl Codebook {
    /// Codewords drawn i.i.d. uniform on `[-1/K, 1/K]`.
    pub fn init(k: usize, d: usize, seed: u64) -> Result<Self> {
        if k == 0 || d == 0 {
            return Err(Error::Config(format!("codebook needs K ≥ 1 and D ≥ 1, got K={k}, D={d}")));
        }
        let bound = 1.0 / k as f64;
        let mut rng = rng::seeded(seed);
        let data = (0..k * d).map(|_| rng.gen_range(-bound..=bound)).collect();
        Ok(Codebook {
            embeddings: Tensor::new(vec![k, d], data)?,
        })
    }

    pub fn from_embeddings(embeddings: Tensor) -> Result<Self> {
        embeddings.dims2("codebook")?;
        if !embeddings.all_finite() {
            return Err(Error::NonFinite { op: "codebook" });
        }
        Ok(Codebook { embeddings })
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn into_embeddings(self) -> Tensor {
        self.embeddings
    }

    pub fn k(&self) -> usize {
        self.embeddings.shape()[0]
    }

    pub fn d(&self) -> usize {
        self.embeddings.shape()[1]
    }

    pub fn codeword(&self, k: usize) -> &[f64] {
        self.embeddings.row(k)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizationResult {
    pub indices: Vec<usize>,
    /// `N × D` copies of the selected codewords.
    pub quantized: Tensor,
    /// Squared distance from each token to its codeword.
    pub distances: Vec<f64>,
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lowest-index minimizer of squared Euclidean distance.
pub fn nearest_codeword(v: &[f64], cb: &Codebook) -> Result<(usize, f64)> {
    if v.len() != cb.d() {
        return Err(Error::dim(
            "nearest_codeword",
            format!("vector of length {} against codewords of dimension {}", v.len(), cb.d()),
        ));
    }
    let mut best = (0, f64::INFINITY);
    for k in 0..cb.k() {
        let dist = squared_distance(v, cb.codeword(k));
        if dist < best.1 {
            best = (k, dist);
        }
    }
    Ok(best)
}

pub fn quantize(tokens: &Tensor, cb: &Codebook) -> Result<QuantizationResult> {
    let (n, d) = tokens.dims2("quantize")?;
    if d != cb.d() {
        return Err(Error::dim(
            "quantize",
            format!("tokens of dimension {d} against codewords of dimension {}", cb.d()),
        ));
    }
    let mut indices = Vec::with_capacity(n);
    let mut distances = Vec::with_capacity(n);
    let mut quantized = Vec::with_capacity(n * d);
    for i in 0..n {
        let (k, dist) = nearest_codeword(tokens.row(i), cb)?;
        indices.push(k);
        distances.push(dist);
        quantized.extend_from_slice(cb.codeword(k));
    }
    Ok(QuantizationResult {
        indices,
        quantized: Tensor::new(vec![n, d], quantized)?,
        distances,
    })
}

/// One-hot `N × K` selection matrix for `indices`.
pub fn one_hot(indices: &[usize], k: usize) -> Result<Tensor> {
    let mut data = vec![0.0; indices.len() * k];
    for (row, &idx) in indices.iter().enumerate() {
        if idx >= k {
            return Err(Error::Contract(format!("codeword index {idx} out of range for K={k}")));
        }
        data[row * k + idx] = 1.0;
    }
    Tensor::new(vec![indices.len(), k], data)
}

/// Graph handles for the quantization loss terms.
#[derive(Clone, Copy, Debug)]
pub struct QuantLoss {
    pub l_cb: Var,
    pub l_ce: Var,
    pub l_q: Var,
}

/// Differentiable lookup of the selected codewords: `onehot · E`.
pub fn lookup(g: &mut Graph, result: &QuantizationResult, codebook: Var) -> Result<Var> {
    let k = g.shape(codebook)[0];
    let selector = g.constant(one_hot(&result.indices, k)?);
    g.matmul(selector, codebook)
}

/// `l_cb = mean ‖sg(token) − e‖²`, `l_ce = mean ‖token − sg(e)‖²`,
/// `L_q = l_cb + alpha_commit · l_ce`.
///
/// The codebook learns only from `l_cb` and the tokens only from `l_ce`.
/// With `negate_codebook_grad` the backward through the codeword lookup is
/// sign-flipped; it exists solely to prove the gradient checker notices.
pub fn quantization_loss(
    g: &mut Graph,
    tokens: Var,
    result: &QuantizationResult,
    codebook: Var,
    alpha_commit: f64,
    negate_codebook_grad: bool,
) -> Result<QuantLoss> {
    if alpha_commit < 0.0 {
        return Err(Error::Config(format!("alpha_commit must be ≥ 0, got {alpha_commit}")));
    }
    let (n, _) = g.value(tokens).dims2("quantization_loss")?;
    if result.indices.len() != n {
        return Err(Error::Contract(format!(
            "quantization result covers {} tokens, input has {n}",
            result.indices.len()
        )));
    }
    let mut selected = lookup(g, result, codebook)?;
    if negate_codebook_grad {
        selected = g.negate_grad(selected)?;
    }
    let inv_n = 1.0 / n as f64;

    let frozen_tokens = g.stop_gradient(tokens)?;
    let diff = g.sub(frozen_tokens, selected)?;
    let sq = g.mul(diff, diff)?;
    let total = g.sum(sq)?;
    let l_cb = g.scale(total, inv_n)?;

    let frozen_codes = g.stop_gradient(selected)?;
    let diff = g.sub(tokens, frozen_codes)?;
    let sq = g.mul(diff, diff)?;
    let total = g.sum(sq)?;
    let l_ce = g.scale(total, inv_n)?;

    let weighted = g.scale(l_ce, alpha_commit)?;
    let l_q = g.add(l_cb, weighted)?;
    Ok(QuantLoss { l_cb, l_ce, l_q })
}

pub fn usage_histogram(indices: &[usize], k: usize) -> Result<Vec<usize>> {
    let mut counts = vec![0; k];
    for &i in indices {
        if i >= k {
            return Err(Error::Contract(format!("codeword index {i} out of range for K={k}")));
        }
        counts[i] += 1;
    }
    Ok(counts)
}

/// `exp(H)` of the empirical code distribution; 1 for a single code, K for
/// uniform usage.
pub fn codebook_perplexity(indices: &[usize], k: usize) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::Contract("perplexity of an empty index list".into()));
    }
    let counts = usage_histogram(indices, k)?;
    let n = indices.len() as f64;
    let entropy: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum();
    Ok(entropy.exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    fn cb(rows: &[Vec<f64>]) -> Codebook {
        Codebook::from_embeddings(Tensor::from_rows(rows).unwrap()).unwrap()
    }

    fn scan_oracle(v: &[f64], rows: &[Vec<f64>]) -> usize {
        let mut best = 0;
        for k in 1..rows.len() {
            let dk: f64 = v.iter().zip(&rows[k]).map(|(a, b)| (a - b).powi(2)).sum();
            let db: f64 = v.iter().zip(&rows[best]).map(|(a, b)| (a - b).powi(2)).sum();
            if dk < db {
                best = k;
            }
        }
        best
    }

    #[test]
    fn init_ranges_and_determinism() {
        let c = Codebook::init(1024, 512, 7).unwrap();
        assert_eq!(c.embeddings().shape(), &[1024, 512]);
        let b = 1.0 / 1024.0;
        assert!(c.embeddings().data().iter().all(|v| (-b..=b).contains(v)));
        assert_eq!(c, Codebook::init(1024, 512, 7).unwrap());

        let one = Codebook::init(1, 1, 0).unwrap();
        assert!((-1.0..=1.0).contains(&one.embeddings().data()[0]));

        assert!(matches!(Codebook::init(0, 4, 0), Err(Error::Config(_))));
        assert!(matches!(Codebook::init(4, 0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn member_lookup_and_tie_break() {
        let c = Codebook::init(8, 3, 1).unwrap();
        let v = c.codeword(5).to_vec();
        assert_eq!(nearest_codeword(&v, &c).unwrap(), (5, 0.0));

        let tied = cb(&[vec![0.0, 0.0], vec![0.0, 0.0]]);
        assert_eq!(nearest_codeword(&[3.0, -1.0], &tied).unwrap().0, 0);

        assert!(matches!(nearest_codeword(&[1.0], &tied), Err(Error::Dimension { .. })));
    }

    #[test]
    fn quantize_exact_members_and_copies() {
        let c = Codebook::init(6, 4, 2).unwrap();
        let row = c.codeword(3).to_vec();
        let tokens = Tensor::from_rows(&[row.clone(), row.clone(), row]).unwrap();
        let r = quantize(&tokens, &c).unwrap();
        assert_eq!(r.indices, vec![3, 3, 3]);
        assert!(r.distances.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn quantize_random_against_scan() {
        let mut rng = rng::seeded(11);
        let rows: Vec<Vec<f64>> = (0..4).map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let c = cb(&rows);
        let toks: Vec<Vec<f64>> = (0..16).map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let r = quantize(&Tensor::from_rows(&toks).unwrap(), &c).unwrap();
        for (i, t) in toks.iter().enumerate() {
            let k = scan_oracle(t, &rows);
            assert_eq!(r.indices[i], k);
            assert_eq!(r.quantized.row(i), rows[k].as_slice());
            let d: f64 = t.iter().zip(&rows[k]).map(|(a, b)| (a - b).powi(2)).sum();
            assert!((r.distances[i] - d).abs() < 1e-12);
        }
        let single = quantize(&Tensor::from_rows(&toks[..1]).unwrap(), &c).unwrap();
        assert_eq!(single.indices[0], nearest_codeword(&toks[0], &c).unwrap().0);
    }

    #[test]
    fn loss_zero_on_codewords_and_unit_distance() {
        let c = cb(&[vec![0.0, 0.0], vec![5.0, 5.0]]);
        let mut g = Graph::new();
        let toks = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let r = quantize(&toks, &c).unwrap();
        let t = g.param(toks);
        let e = g.param(c.embeddings().clone());
        let q = quantization_loss(&mut g, t, &r, e, 0.5, false).unwrap();
        assert_eq!(g.value(q.l_cb).item(), 1.0);
        assert_eq!(g.value(q.l_ce).item(), 1.0);
        assert_eq!(g.value(q.l_q).item(), 1.5);

        let on = Tensor::from_rows(&[vec![5.0, 5.0], vec![0.0, 0.0]]).unwrap();
        let r = quantize(&on, &c).unwrap();
        let t = g.param(on);
        let q = quantization_loss(&mut g, t, &r, e, 0.5, false).unwrap();
        assert_eq!(g.value(q.l_q).item(), 0.0);
    }

    #[test]
    fn codebook_step_moves_toward_token() {
        let c = cb(&[vec![0.0, 0.0]]);
        let toks = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let r = quantize(&toks, &c).unwrap();
        let mut g = Graph::new();
        let t = g.param(toks);
        let e = g.param(c.embeddings().clone());
        let q = quantization_loss(&mut g, t, &r, e, 0.5, false).unwrap();
        g.backward(q.l_cb).unwrap();
        let grad = g.grad(e).unwrap().to_vec();
        assert_eq!(grad, vec![-2.0, 0.0]);
        let moved: Vec<f64> = c.embeddings().data().iter().zip(&grad).map(|(p, gr)| p - 0.1 * gr).collect();
        assert_eq!(moved, vec![0.2, 0.0]);
        assert!(g.grad(t).map_or(true, |gr| gr.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn loss_rejects_mismatched_result() {
        let c = cb(&[vec![0.0, 0.0]]);
        let bad = QuantizationResult {
            indices: vec![3],
            quantized: Tensor::zeros(&[1, 2]),
            distances: vec![0.0],
        };
        let mut g = Graph::new();
        let t = g.param(Tensor::zeros(&[1, 2]));
        let e = g.param(c.embeddings().clone());
        assert!(matches!(quantization_loss(&mut g, t, &bad, e, 0.5, false), Err(Error::Contract(_))));
    }

    #[test]
    fn perplexity_cases() {
        assert_eq!(codebook_perplexity(&[2, 2, 2], 4).unwrap(), 1.0);
        assert!((codebook_perplexity(&[0, 1, 2, 3], 4).unwrap() - 4.0).abs() < 1e-12);
        let expected = (-(0.75f64 * 0.75f64.ln() + 0.25 * 0.25f64.ln())).exp();
        let p = codebook_perplexity(&[0, 0, 0, 1], 2).unwrap();
        assert!((p - expected).abs() < 1e-12);
        assert!((p - 1.7548).abs() < 1e-4);
        assert!(matches!(codebook_perplexity(&[], 2), Err(Error::Contract(_))));
    }

    #[test]
    fn histogram_cases() {
        assert_eq!(usage_histogram(&[0, 0, 2], 3).unwrap(), vec![2, 0, 1]);
        assert_eq!(usage_histogram(&[0, 1, 2, 3], 4).unwrap(), vec![1; 4]);
        assert!(matches!(usage_histogram(&[5], 3), Err(Error::Contract(_))));

        let mut rng = rng::seeded(3);
        let idx: Vec<usize> = (0..10_000).map(|_| rng.gen_range(0..17)).collect();
        let mut tally = std::collections::HashMap::new();
        for &i in &idx {
            *tally.entry(i).or_insert(0usize) += 1;
        }
        let counts = usage_histogram(&idx, 17).unwrap();
        for (k, &c) in counts.iter().enumerate() {
            assert_eq!(c, tally.get(&k).copied().unwrap_or(0));
        }
    }

    proptest! {
        #[test]
        fn quantize_is_idempotent(seed in 0u64..1000, k in 1usize..16, d in 1usize..8, n in 1usize..12) {
            let c = Codebook::init(k, d, seed).unwrap();
            let mut r = rng::seeded(seed ^ 0xABCD);
            let toks = Tensor::new(vec![n, d], (0..n * d).map(|_| r.gen_range(-0.5..0.5)).collect()).unwrap();
            let first = quantize(&toks, &c).unwrap();
            let second = quantize(&first.quantized, &c).unwrap();
            prop_assert!(second.distances.iter().all(|&x| x == 0.0));
            // duplicate codewords may map to a lower index holding the same vector
            for (a, b) in first.indices.iter().zip(&second.indices) {
                prop_assert_eq!(c.codeword(*a), c.codeword(*b));
            }
        }

        #[test]
        fn codebook_steps_reduce_distance(seed in 0u64..500) {
            let c = Codebook::init(4, 3, seed).unwrap();
            let mut r = rng::seeded(seed + 1);
            let toks = Tensor::new(vec![6, 3], (0..18).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
            let assign = quantize(&toks, &c).unwrap();
            let mut emb = c.embeddings().clone();
            let mut prev = f64::INFINITY;
            for _ in 0..5 {
                let mut g = Graph::new();
                let t = g.constant(toks.clone());
                let e = g.param(emb.clone());
                let q = quantization_loss(&mut g, t, &assign, e, 0.5, false).unwrap();
                let cur = g.value(q.l_cb).item();
                prop_assert!(cur < prev || cur == 0.0);
                prev = cur;
                g.backward(q.l_cb).unwrap();
                let grad = g.grad(e).unwrap().to_vec();
                emb.data_mut().iter_mut().zip(&grad).for_each(|(p, gr)| *p -= 0.1 * gr);
            }
        }
    }
}
