//! Per-op gradient checks and forward oracles for the autodiff engine.

use proptest::prelude::*;
use rand::Rng;

use coboom::autodiff::{grad_check, Graph, Tensor, Var};
use coboom::rng::seeded;
use coboom::Result;

const EPS: f64 = 1e-5;
// Summed conv outputs can cancel to ~1e-5, where central differences
// only resolve about six digits.
const TOL: f64 = 1e-5;

fn random(seed: u64, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let mut r = seeded(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero, so kinks and poles stay outside ±eps.
fn away_from_zero(seed: u64, shape: &[usize], min: f64) -> Tensor {
    let mut t = random(seed, shape, -2.0, 2.0);
    for v in t.data_mut() {
        if v.abs() < min {
            *v = if *v < 0.0 { -min - v.abs() } else { min + *v };
        }
    }
    t
}

/// `Σ w ⊙ out` with a fixed random `w`, so every output coordinate matters.
fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    if g.value(out).is_scalar() {
        return Ok(out);
    }
    let w = random(seed ^ 0xFFFF, g.shape(out), -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(out, w)?;
    g.sum(p)
}

fn check(seed: u64, inputs: Vec<Tensor>, op: impl Fn(&mut Graph, &[Var]) -> Result<Var>) {
    let params: Vec<(String, Tensor)> = inputs.into_iter().enumerate().map(|(i, t)| (format!("x{i}"), t)).collect();
    let report = grad_check(&params, EPS, |g, vars| {
        let out = op(g, vars)?;
        project(g, out, seed)
    })
    .unwrap();
    assert!(report.passes(TOL), "seed {seed}: {:?}", report.worst_param());
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 128, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn unary_elementwise(seed in 0u64..1_000_000) {
        let x = away_from_zero(seed, &[3, 4], 0.05);
        check(seed, vec![x.clone()], |g, v| g.relu(v[0]));
        check(seed, vec![x.clone()], |g, v| g.softplus(v[0]));
        check(seed, vec![x.clone()], |g, v| g.scale(v[0], -1.7));
        check(seed, vec![x], |g, v| g.l2_norm(v[0]));
    }

    #[test]
    fn binary_elementwise(seed in 0u64..1_000_000) {
        let a = random(seed, &[2, 5], -2.0, 2.0);
        let b = away_from_zero(seed + 1, &[2, 5], 0.5);
        check(seed, vec![a.clone(), b.clone()], |g, v| g.add(v[0], v[1]));
        check(seed, vec![a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]));
        check(seed, vec![a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]));
        check(seed, vec![a, b], |g, v| g.div(v[0], v[1]));
    }

    #[test]
    fn reductions_and_layout(seed in 0u64..1_000_000) {
        let x = random(seed, &[3, 4], -2.0, 2.0);
        check(seed, vec![x.clone()], |g, v| g.sum(v[0]));
        check(seed, vec![x.clone()], |g, v| g.mean(v[0]));
        check(seed, vec![x.clone()], |g, v| g.mean_rows(v[0]));
        check(seed, vec![x.clone()], |g, v| g.transpose(v[0]));
        check(seed, vec![x.clone()], |g, v| g.reshape(v[0], &[2, 6]));
        check(seed, vec![x.clone()], |g, v| g.softmax_rows(v[0]));
        let y = random(seed + 2, &[3, 2], -2.0, 2.0);
        check(seed, vec![x, y], |g, v| g.concat_cols(&[v[0], v[1], v[0]]));
    }

    #[test]
    fn bias_and_upsample(seed in 0u64..1_000_000) {
        let m = random(seed, &[3, 4], -1.0, 1.0);
        let b = random(seed + 1, &[4], -1.0, 1.0);
        check(seed, vec![m, b], |g, v| g.add_bias(v[0], v[1]));
        let map = random(seed + 2, &[2, 3, 3], -1.0, 1.0);
        let cb = random(seed + 3, &[2], -1.0, 1.0);
        check(seed, vec![map.clone(), cb], |g, v| g.add_bias(v[0], v[1]));
        check(seed, vec![map], |g, v| g.upsample2x(v[0]));
    }

    #[test]
    fn matmul_gradients_and_oracle(seed in 0u64..1_000_000, m in 1usize..6, k in 1usize..6, n in 1usize..6) {
        let a = random(seed, &[m, k], -1.0, 1.0);
        let b = random(seed + 1, &[k, n], -1.0, 1.0);
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let c = g.matmul(va, vb).unwrap();
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|t| a.data()[i * k + t] * b.data()[t * n + j]).sum();
                prop_assert!((g.value(c).data()[i * n + j] - want).abs() < 1e-12);
            }
        }
        check(seed, vec![a, b], |g, v| g.matmul(v[0], v[1]));
    }

    #[test]
    fn conv_gradients_and_oracle(
        seed in 0u64..1_000_000,
        c_in in 1usize..3,
        c_out in 1usize..3,
        side in 3usize..7,
        stride in 1usize..3,
        pad in 0usize..2,
    ) {
        let x = random(seed, &[c_in, side, side], -1.0, 1.0);
        let k = random(seed + 1, &[c_out, c_in, 3, 3], -1.0, 1.0);
        let mut g = Graph::new();
        let (vx, vk) = (g.constant(x.clone()), g.constant(k.clone()));
        let y = g.conv2d(vx, vk, stride, pad).unwrap();
        let out = (side + 2 * pad - 3) / stride + 1;
        prop_assert_eq!(g.shape(y), &[c_out, out, out][..]);
        let at = |c: usize, i: isize, j: isize| {
            if i < 0 || j < 0 || i >= side as isize || j >= side as isize {
                0.0
            } else {
                x.data()[(c * side + i as usize) * side + j as usize]
            }
        };
        for o in 0..c_out {
            for i in 0..out {
                for j in 0..out {
                    let mut want = 0.0;
                    for c in 0..c_in {
                        for di in 0..3 {
                            for dj in 0..3 {
                                let (yi, xj) = ((i * stride + di) as isize - pad as isize, (j * stride + dj) as isize - pad as isize);
                                want += k.data()[((o * c_in + c) * 3 + di) * 3 + dj] * at(c, yi, xj);
                            }
                        }
                    }
                    prop_assert!((g.value(y).data()[(o * out + i) * out + j] - want).abs() < 1e-12);
                }
            }
        }
        check(seed, vec![x, k], |g, v| g.conv2d(v[0], v[1], stride, pad));
    }
}
