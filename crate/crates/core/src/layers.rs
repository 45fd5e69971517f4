//! Building blocks shared by the visual and numerical forecasters.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, ParamGroup, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Standard deviation of every randomly initialised weight.
pub const INIT_STD: f64 = 0.02;

/// Normal samples truncated to two standard deviations.
pub fn trunc_normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches sample count")
}

/// Dense layer `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        group: ParamGroup,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{name}.weight"),
            trunc_normal(rng, &[fan_in, fan_out], INIT_STD),
            group,
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]), group)?;
        Ok(Linear { weight, bias })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, group: ParamGroup) -> Result<Self> {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0), group)?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]), group)?;
        Ok(LayerNorm { gamma, beta })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Pre-norm transformer encoder block: multi-head self-attention then a GELU MLP,
/// each wrapped in a residual connection.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    dim: usize,
    heads: usize,
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

pub struct BlockGroups {
    pub norm: ParamGroup,
    pub other: ParamGroup,
}

impl TransformerBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        groups: BlockGroups,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("dim {dim} is not divisible by {heads} heads")));
        }
        let hidden = dim * mlp_ratio.max(1);
        Ok(TransformerBlock {
            dim,
            heads,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim, groups.norm)?,
            qkv: Linear::new(store, rng, &format!("{name}.attn.qkv"), dim, 3 * dim, groups.other)?,
            proj: Linear::new(store, rng, &format!("{name}.attn.proj"), dim, dim, groups.other)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim, groups.norm)?,
            fc1: Linear::new(store, rng, &format!("{name}.mlp.fc1"), dim, hidden, groups.other)?,
            fc2: Linear::new(store, rng, &format!("{name}.mlp.fc2"), hidden, dim, groups.other)?,
        })
    }

    /// `x: [tokens, dim]` -> `[tokens, dim]`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.norm1.forward(g, x)?;
        let a = self.attention(g, h)?;
        let x = g.add(x, a)?;
        let h = self.norm2.forward(g, x)?;
        let h = self.fc1.forward(g, h)?;
        let h = g.gelu(h);
        let h = self.fc2.forward(g, h)?;
        g.add(x, h)
    }

    fn attention(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let head_dim = self.dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let qkv = self.qkv.forward(g, x)?;
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = g.slice(qkv, 1, h * head_dim, head_dim)?;
            let k = g.slice(qkv, 1, self.dim + h * head_dim, head_dim)?;
            let v = g.slice(qkv, 1, 2 * self.dim + h * head_dim, head_dim)?;
            let kt = g.transpose(k)?;
            let scores = g.matmul(q, kt)?;
            let scores = g.scale(scores, scale);
            let attn = g.softmax(scores);
            outs.push(g.matmul(attn, v)?);
        }
        let merged = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 1)? };
        self.proj.forward(g, merged)
    }
}

/// Draws a seed for a child RNG so sub-components stay independent of call order.
pub fn child_seed(rng: &mut ChaCha8Rng) -> u64 {
    rng.gen()
}
