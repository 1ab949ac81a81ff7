//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only arena of nodes. Every operation pushes one
//! node whose parents have strictly smaller indices, so the arena order is
//! already a topological order and [`Graph::backward`] simply replays it in
//! reverse. Gradients accumulate across `backward` calls until
//! [`Graph::zero_grad`] is called.

use super::kernels::{self, ConvGeom};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Conv2d { input: Var, kernels: Var, geom: ConvGeom },
    Upsample2x(Var),
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// `bias[(i / group) % bias_len]` is added to element `i`.
    AddBias { x: Var, bias: Var, group: usize },
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Reshape(Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    L2Norm(Var),
    SoftmaxRows(Var),
    StopGradient(Var),
    Softplus(Var),
    NegateGrad(Var),
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul(..) => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Upsample2x(_) => "upsample2x",
            Op::Relu(_) => "relu",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddBias { .. } => "add_bias",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::MeanRows(_) => "mean_rows",
            Op::Reshape(_) => "reshape",
            Op::Transpose(_) => "transpose",
            Op::ConcatCols(_) => "concat_cols",
            Op::L2Norm(_) => "l2_norm",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::StopGradient(_) => "stop_gradient",
            Op::Softplus(_) => "softplus",
            Op::NegateGrad(_) => "negate_grad",
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Matmul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                vec![*a, *b]
            }
            Op::Conv2d { input, kernels, .. } => vec![*input, *kernels],
            Op::AddBias { x, bias, .. } => vec![*x, *bias],
            Op::ConcatCols(parts) => parts.clone(),
            Op::Upsample2x(x)
            | Op::Relu(x)
            | Op::Scale(x, _)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::MeanRows(x)
            | Op::Reshape(x)
            | Op::Transpose(x)
            | Op::L2Norm(x)
            | Op::SoftmaxRows(x)
            | Op::StopGradient(x)
            | Op::Softplus(x)
            | Op::NegateGrad(x) => vec![*x],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Stop-gradient bookkeeping used by the gradient checker.
#[derive(Default)]
enum Detached {
    #[default]
    Off,
    Record(Vec<Tensor>),
    Replay(Vec<Tensor>, usize),
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    detached: Detached,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph that remembers the value of every `stop_gradient` output.
    pub fn recording_stop_gradients() -> Self {
        Graph {
            detached: Detached::Record(Vec::new()),
            ..Self::default()
        }
    }

    /// A graph whose `stop_gradient` outputs are the given values, in call
    /// order, whatever their inputs evaluate to. Finite differences taken on
    /// such a graph see detached subexpressions as the constants the
    /// backward pass treats them as.
    pub fn replaying_stop_gradients(values: Vec<Tensor>) -> Self {
        Graph {
            detached: Detached::Replay(values, 0),
            ..Self::default()
        }
    }

    /// Values captured by a recording graph.
    pub fn recorded_stop_gradients(&self) -> &[Tensor] {
        match &self.detached {
            Detached::Record(v) => v,
            _ => &[],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient, if any backward pass reached `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Operation tag of the node, e.g. `"matmul"`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.tag()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.tag() });
        }
        let requires_grad = match op {
            Op::StopGradient(_) => false,
            _ => op.parents().iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("operand shapes {:?} and {:?} differ", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(op.tag(), a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push(value, op)
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let vx = self.value(x);
        let value = Tensor::new(vx.shape().to_vec(), vx.data().iter().map(|&v| f(v)).collect())?;
        self.push(value, op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (k2, n) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("inner dimensions disagree: {m}×{k} · {k2}×{n}"),
            ));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Tensor::new(vec![m, n], out)?, Op::Matmul(a, b))
    }

    /// 3×3 convolution of a `C_in×H×W` map with `C_out×C_in×3×3` kernels.
    pub fn conv2d(&mut self, input: Var, kernels: Var, stride: usize, pad: usize) -> Result<Var> {
        let (c_in, h, w) = self.value(input).dims3("conv2d")?;
        let kshape = self.shape(kernels).to_vec();
        if kshape.len() != 4 || kshape[1] != c_in || kshape[2] != 3 || kshape[3] != 3 {
            return Err(Error::dim(
                "conv2d",
                format!("kernels {kshape:?} do not fit input [{c_in}, {h}, {w}]"),
            ));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d", "stride must be positive"));
        }
        let (h_out, w_out) = match (
            ConvGeom::out_extent(h, stride, pad),
            ConvGeom::out_extent(w, stride, pad),
        ) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => {
                return Err(Error::dim(
                    "conv2d",
                    format!("input {h}×{w} with pad {pad} is smaller than the 3×3 kernel"),
                ))
            }
        };
        let geom = ConvGeom {
            c_in,
            h,
            w,
            c_out: kshape[0],
            stride,
            pad,
            h_out,
            w_out,
        };
        let out = kernels::conv2d_forward(self.value(input).data(), self.value(kernels).data(), &geom);
        self.push(
            Tensor::new(vec![geom.c_out, h_out, w_out], out)?,
            Op::Conv2d { input, kernels, geom },
        )
    }

    /// Nearest-neighbour ×2 upsampling of a `C×H×W` map.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3("upsample2x")?;
        let src = self.value(x).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * h2 * w2];
        for ch in 0..c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    out[(ch * h2 + y) * w2 + xx] = src[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        self.push(Tensor::new(vec![c, h2, w2], out)?, Op::Upsample2x(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Softplus(x), kernels::softplus)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// Adds a bias broadcast along the leading axes.
    ///
    /// For an `N×M` matrix the bias has `M` entries (one per column); for a
    /// `C×H×W` map it has `C` entries (one per channel).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let blen = self.value(bias).numel();
        let group = match shape[..] {
            [_, m] if m == blen => 1,
            [c, h, w] if c == blen => h * w,
            [m] if m == blen => 1,
            _ => {
                return Err(Error::dim(
                    "add_bias",
                    format!("bias of {blen} values does not broadcast onto {shape:?}"),
                ))
            }
        };
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[(i / group) % blen])
            .collect();
        self.push(Tensor::new(shape, data)?, Op::AddBias { x, bias, group })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Column means of an `N×D` matrix, as a `1×D` row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (n, d) = self.value(x).dims2("mean_rows")?;
        let src = self.value(x).data();
        let mut out = vec![0.0; d];
        for r in 0..n {
            for (o, v) in out.iter_mut().zip(&src[r * d..(r + 1) * d]) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= n as f64;
        }
        self.push(Tensor::new(vec![1, d], out)?, Op::MeanRows(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape.to_vec())?;
        self.push(value, Op::Reshape(x))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2("transpose")?;
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(x))
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::dim("concat_cols", "nothing to concatenate"));
        };
        let (rows, _) = self.value(first).dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2("concat_cols")?;
            if r != rows {
                return Err(Error::dim("concat_cols", format!("row counts {rows} and {r} differ")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        self.push(Tensor::new(vec![rows, total], out)?, Op::ConcatCols(parts.to_vec()))
    }

    /// Euclidean norm of all elements.
    pub fn l2_norm(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).l2_norm();
        self.push(Tensor::scalar(n), Op::L2Norm(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2("softmax_rows")?;
        let out = kernels::softmax_rows(self.value(x).data(), r, c);
        self.push(Tensor::new(vec![r, c], out)?, Op::SoftmaxRows(x))
    }

    /// Identity on values; blocks all gradient flow into `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        let mut value = self.value(x).clone();
        match &mut self.detached {
            Detached::Off => {}
            Detached::Record(seen) => seen.push(value.clone()),
            Detached::Replay(saved, next) => {
                let Some(v) = saved.get(*next) else {
                    return Err(Error::Contract("more stop_gradient calls than recorded".into()));
                };
                if v.shape() != value.shape() {
                    return Err(Error::dim("stop_gradient", format!("replayed {:?} for {:?}", v.shape(), value.shape())));
                }
                value = v.clone();
                *next += 1;
            }
        }
        self.push(value, Op::StopGradient(x))
    }

    /// Identity on values with a negated backward. Only used to plant
    /// deliberate gradient bugs for detector tests.
    #[doc(hidden)]
    pub fn negate_grad(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).clone();
        self.push(value, Op::NegateGrad(x))
    }

    /// Reverse sweep from a scalar `loss`, accumulating into every node that
    /// requires gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite {
                    op: self.nodes[i].op.tag(),
                });
            }
            self.propagate(i, &g, &mut adj);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let parent = &self.nodes[v.0];
            if !parent.requires_grad {
                return;
            }
            let buf = adj[v.0].get_or_insert_with(|| vec![0.0; parent.value.numel()]);
            f(buf);
        };
        let val = |v: Var| self.nodes[v.0].value.data();

        match &node.op {
            Op::Leaf | Op::StopGradient(_) => {}
            Op::Matmul(a, b) => {
                let (m, k) = (self.nodes[a.0].value.shape()[0], self.nodes[a.0].value.shape()[1]);
                let n = self.nodes[b.0].value.shape()[1];
                acc(*a, &mut |buf| kernels::matmul_nt_acc(g, val(*b), buf, m, k, n));
                acc(*b, &mut |buf| kernels::matmul_tn_acc(val(*a), g, buf, m, k, n));
            }
            Op::Conv2d { input, kernels: kv, geom } => {
                acc(*input, &mut |buf| {
                    kernels::conv2d_backward(val(*input), val(*kv), g, geom, Some(buf), None)
                });
                acc(*kv, &mut |buf| {
                    kernels::conv2d_backward(val(*input), val(*kv), g, geom, None, Some(buf))
                });
            }
            Op::Upsample2x(x) => {
                let shape = self.nodes[x.0].value.shape();
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let (h2, w2) = (2 * h, 2 * w);
                acc(*x, &mut |buf| {
                    for ch in 0..c {
                        for y in 0..h2 {
                            for xx in 0..w2 {
                                buf[(ch * h + y / 2) * w + xx / 2] += g[(ch * h2 + y) * w2 + xx];
                            }
                        }
                    }
                });
            }
            Op::Relu(x) => acc(*x, &mut |buf| {
                for ((b, &gv), &xv) in buf.iter_mut().zip(g).zip(val(*x)) {
                    if xv > 0.0 {
                        *b += gv;
                    }
                }
            }),
            Op::Softplus(x) => acc(*x, &mut |buf| {
                for ((b, &gv), &xv) in buf.iter_mut().zip(g).zip(val(*x)) {
                    *b += gv * kernels::sigmoid(xv);
                }
            }),
            Op::Add(a, b) => {
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| add_into(buf, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| buf.iter_mut().zip(g).for_each(|(o, v)| *o -= v));
            }
            Op::Mul(a, b) => {
                acc(*a, &mut |buf| {
                    for ((o, &gv), &bv) in buf.iter_mut().zip(g).zip(val(*b)) {
                        *o += gv * bv;
                    }
                });
                acc(*b, &mut |buf| {
                    for ((o, &gv), &av) in buf.iter_mut().zip(g).zip(val(*a)) {
                        *o += gv * av;
                    }
                });
            }
            Op::Div(a, b) => {
                acc(*a, &mut |buf| {
                    for ((o, &gv), &bv) in buf.iter_mut().zip(g).zip(val(*b)) {
                        *o += gv / bv;
                    }
                });
                acc(*b, &mut |buf| {
                    for ((o, &gv), (&yv, &bv)) in buf.iter_mut().zip(g).zip(out.iter().zip(val(*b))) {
                        *o -= gv * yv / bv;
                    }
                });
            }
            Op::AddBias { x, bias, group } => {
                acc(*x, &mut |buf| add_into(buf, g));
                acc(*bias, &mut |buf| {
                    let blen = buf.len();
                    for (i, &gv) in g.iter().enumerate() {
                        buf[(i / group) % blen] += gv;
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |buf| {
                buf.iter_mut().zip(g).for_each(|(o, v)| *o += c * v)
            }),
            Op::Sum(x) => acc(*x, &mut |buf| buf.iter_mut().for_each(|o| *o += g[0])),
            Op::Mean(x) => acc(*x, &mut |buf| {
                let s = g[0] / buf.len() as f64;
                buf.iter_mut().for_each(|o| *o += s);
            }),
            Op::MeanRows(x) => acc(*x, &mut |buf| {
                let d = g.len();
                let n = buf.len() / d;
                for r in 0..n {
                    for (o, &gv) in buf[r * d..(r + 1) * d].iter_mut().zip(g) {
                        *o += gv / n as f64;
                    }
                }
            }),
            Op::Reshape(x) => acc(*x, &mut |buf| add_into(buf, g)),
            Op::NegateGrad(x) => acc(*x, &mut |buf| {
                buf.iter_mut().zip(g).for_each(|(o, v)| *o -= v)
            }),
            Op::Transpose(x) => {
                let (r, c) = (self.nodes[x.0].value.shape()[0], self.nodes[x.0].value.shape()[1]);
                acc(*x, &mut |buf| {
                    for i in 0..r {
                        for j in 0..c {
                            buf[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let rows = node.value.shape()[0];
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.shape()[1];
                    acc(p, &mut |buf| {
                        for r in 0..rows {
                            for j in 0..w {
                                buf[r * w + j] += g[r * total + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::L2Norm(x) => {
                let norm = out[0];
                acc(*x, &mut |buf| {
                    if norm > 0.0 {
                        for (o, &xv) in buf.iter_mut().zip(val(*x)) {
                            *o += g[0] * xv / norm;
                        }
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let cols = node.value.shape()[1];
                acc(*x, &mut |buf| {
                    for (r, (yrow, grow)) in out.chunks(cols).zip(g.chunks(cols)).enumerate() {
                        let dot: f64 = yrow.iter().zip(grow).map(|(y, gv)| y * gv).sum();
                        for j in 0..cols {
                            buf[r * cols + j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
        }
    }
}

fn add_into(buf: &mut [f64], g: &[f64]) {
    buf.iter_mut().zip(g).for_each(|(o, v)| *o += v);
}
