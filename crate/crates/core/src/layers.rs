//! Convolutional encoder, MLP heads and upsampling decoder.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};

fn normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("positive shape")
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    /// He-normal kernels, zero bias.
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let std = (2.0 / (c_in * 9) as f64).sqrt();
        Conv {
            weight: store.add(format!("{name}.weight"), normal(&[c_out, c_in, 3, 3], std, rng)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[c_out])),
            stride,
            pad: 1,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.conv2d(x, p[self.weight], self.stride, self.pad)?;
        g.add_bias(y, p[self.bias])
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn init(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, gain: f64, rng: &mut impl Rng) -> Self {
        let std = (gain / fan_in as f64).sqrt();
        Linear {
            weight: store.add(format!("{name}.weight"), normal(&[fan_in, fan_out], std, rng)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])),
        }
    }

    /// `x[1×in] · W + b`
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.weight])?;
        g.add_bias(y, p[self.bias])
    }
}

/// Three linear layers with ReLU between them.
#[derive(Clone, Debug)]
pub struct MlpHead {
    pub layers: [Linear; 3],
    pub in_dim: usize,
    pub out_dim: usize,
}

impl MlpHead {
    pub fn init(store: &mut ParamStore, name: &str, in_dim: usize, hidden: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let layers = [
            Linear::init(store, &format!("{name}.fc0"), in_dim, hidden, 2.0, rng),
            Linear::init(store, &format!("{name}.fc1"), hidden, hidden, 2.0, rng),
            Linear::init(store, &format!("{name}.fc2"), hidden, out_dim, 1.0, rng),
        ];
        MlpHead { layers, in_dim, out_dim }
    }

    /// Maps a `1 × in_dim` row to `1 × out_dim`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let width = g.value(x).numel();
        if width != self.in_dim {
            return Err(Error::dim(
                "project",
                format!("head expects width {}, got {width}", self.in_dim),
            ));
        }
        let x = g.reshape(x, &[1, width])?;
        let h = self.layers[0].forward(g, p, x)?;
        let h = g.relu(h)?;
        let h = self.layers[1].forward(g, p, h)?;
        let h = g.relu(h)?;
        self.layers[2].forward(g, p, h)
    }
}

/// Stack of stride-2 convolutions producing `N × D` tokens.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub convs: Vec<Conv>,
    pub image_size: usize,
}

impl Encoder {
    pub fn init(store: &mut ParamStore, name: &str, image_size: usize, widths: &[usize], rng: &mut impl Rng) -> Self {
        let mut c_in = 1;
        let convs = widths
            .iter()
            .enumerate()
            .map(|(i, &c_out)| {
                let conv = Conv::init(store, &format!("{name}.conv{i}"), c_in, c_out, 2, rng);
                c_in = c_out;
                conv
            })
            .collect();
        Encoder { convs, image_size }
    }

    /// Feature map `C×H'×W'` flattened to `H'·W'` row-major tokens of width `C`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, image: Var) -> Result<Var> {
        let expected = [1, self.image_size, self.image_size];
        if g.shape(image) != expected {
            return Err(Error::dim(
                "encode",
                format!("image shape {:?}, expected {expected:?}", g.shape(image)),
            ));
        }
        let mut x = image;
        for conv in &self.convs {
            let y = conv.forward(g, p, x)?;
            x = g.relu(y)?;
        }
        let (c, h, w) = g.value(x).dims3("encode")?;
        let flat = g.reshape(x, &[c, h * w])?;
        g.transpose(flat)
    }
}

/// Nearest ×2 upsampling + 3×3 convolution per stage, then a one-channel
/// output convolution.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub stages: Vec<Conv>,
    pub head: Conv,
    pub token_side: usize,
}

const DECODER_BIAS: f64 = 0.01;

impl Decoder {
    pub fn init(store: &mut ParamStore, name: &str, d: usize, token_side: usize, widths: &[usize], rng: &mut impl Rng) -> Self {
        let mut c_in = d;
        let stages = widths
            .iter()
            .enumerate()
            .map(|(i, &c_out)| {
                let conv = Conv::init(store, &format!("{name}.up{i}"), c_in, c_out, 1, rng);
                // narrow stages often see all-zero neighbourhoods; a zero bias
                // would park those units exactly on the ReLU kink
                store.get_mut(conv.bias).data_mut().fill(DECODER_BIAS);
                c_in = c_out;
                conv
            })
            .collect();
        let head = Conv::init(store, &format!("{name}.out"), c_in, 1, 1, rng);
        Decoder { stages, head, token_side }
    }

    /// Tokens `N × D` back to a `1 × H × W` image.
    pub fn forward(&self, g: &mut Graph, p: &Bound, tokens: Var) -> Result<Var> {
        let (n, d) = g.value(tokens).dims2("decode")?;
        if n != self.token_side * self.token_side {
            return Err(Error::dim(
                "decode",
                format!("{n} tokens do not tile a {0}×{0} map", self.token_side),
            ));
        }
        let cn = g.transpose(tokens)?;
        let mut x = g.reshape(cn, &[d, self.token_side, self.token_side])?;
        for stage in &self.stages {
            let up = g.upsample2x(x)?;
            let y = stage.forward(g, p, up)?;
            x = g.relu(y)?;
        }
        self.head.forward(g, p, x)
    }
}
