use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::{Real, Tensor};
use crate::error::Result;

/// Affine map `y = x·W + b`; `W` stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let std = 1.0 / (d_in as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), Tensor::randn(&[d_in, d_out], std, rng))?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]))?)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.linear(x, w, b)
    }

    pub fn num_params(&self) -> usize {
        self.d_in * self.d_out + if self.bias.is_some() { self.d_out } else { 0 }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.add(format!("{name}.weight"), Tensor::full(&[d], T::one()))?,
            beta: store.add(format!("{name}.bias"), Tensor::zeros(&[d]))?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (gm, bt) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gm, bt)
    }
}

/// Pre-norm transformer block: `x + MHSA(LN(x))`, then `+ MLP(LN(·))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
}

pub const MLP_RATIO: usize = 4;

impl TransformerBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(TransformerBlock {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim)?,
            qkv: Linear::new(store, &format!("{name}.attn.qkv"), dim, 3 * dim, true, rng)?,
            proj: Linear::new(store, &format!("{name}.attn.proj"), dim, dim, true, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim)?,
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), dim, MLP_RATIO * dim, true, rng)?,
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), MLP_RATIO * dim, dim, true, rng)?,
            heads,
        })
    }

    /// `x` is `[batch·seq, dim]`; see [`Graph::attention`] for `key_mask`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        batch: usize,
        seq: usize,
        key_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let h = self.ln1.forward(g, x)?;
        let qkv = self.qkv.forward(g, h)?;
        let a = g.attention(qkv, batch, seq, self.heads, key_mask)?;
        let a = self.proj.forward(g, a)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, x)?;
        let h = self.fc1.forward(g, h)?;
        let h = g.gelu(h);
        let h = self.fc2.forward(g, h)?;
        g.add(x, h)
    }

    /// Output projections of both residual branches.
    pub fn residual_outputs(&self) -> [ParamId; 4] {
        [
            self.proj.weight,
            self.proj.bias.expect("proj has bias"),
            self.fc2.weight,
            self.fc2.bias.expect("fc2 has bias"),
        ]
    }
}

/// 2-d convolution with square kernel and bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fan_in = (c_in * kernel * kernel) as f64;
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::randn(&[c_out, c_in, kernel, kernel], 1.0 / fan_in.sqrt(), rng),
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]))?;
        Ok(Conv2d {
            weight,
            bias,
            stride,
            pad,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Sinusoidal features of a scalar in `[0, 1]`: `dim/2` sines then `dim/2` cosines
/// over geometrically spaced frequencies.
pub fn sinusoidal_embedding(x: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        // frequencies from 1 to 1000 (x is already normalized to [0, 1])
        let freq = 1000f64.powf(i as f64 / half.max(1) as f64);
        out[i] = (x * freq).sin();
        out[half + i] = (x * freq).cos();
    }
    out
}
