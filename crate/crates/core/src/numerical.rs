//! Numerical forecasters for the trend view.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamGroup, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::layers::{trunc_normal, BlockGroups, TransformerBlock, INIT_STD};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NumericalKind {
    Linear,
    PatchTransformer,
}

impl NumericalKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(NumericalKind::Linear),
            "patch_transformer" | "patch-transformer" => Ok(NumericalKind::PatchTransformer),
            other => Err(Error::Config(format!("unknown numerical forecaster '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchTransformerConfig {
    pub patch_len: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for PatchTransformerConfig {
    fn default() -> Self {
        PatchTransformerConfig {
            patch_len: 16,
            dim: 64,
            depth: 2,
            heads: 4,
            mlp_ratio: 4,
        }
    }
}

/// Patch count for a length-`t` input: non-overlapping stride-`l` patches plus one
/// tail patch padded with the final value.
pub fn patch_count(t: usize, l: usize) -> usize {
    t / l + 1
}

fn check_input(g: &Graph, x: Var, len: usize, op: &'static str) -> Result<usize> {
    let (rows, cols) = g.value(x).dims2()?;
    if cols != len {
        return Err(Error::ShapeMismatch {
            op,
            left: vec![rows, cols],
            right: vec![len],
        });
    }
    Ok(rows)
}

/// `y = W x + b` with `W: [H, T']`.
#[derive(Clone, Debug)]
pub struct LinearForecaster {
    pub weight: ParamId,
    pub bias: ParamId,
    input_len: usize,
    horizon: usize,
}

impl LinearForecaster {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, input_len: usize, horizon: usize) -> Result<Self> {
        let weight = store.add(
            format!("{name}.weight"),
            trunc_normal(rng, &[horizon, input_len], INIT_STD),
            ParamGroup::Numerical,
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[horizon]), ParamGroup::Numerical)?;
        Ok(LinearForecaster {
            weight,
            bias,
            input_len,
            horizon,
        })
    }

    /// `x: [B, T']` -> `[B, H]`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        check_input(g, x, self.input_len, "linear_forecast")?;
        let w = g.param(self.weight);
        let wt = g.transpose(w)?;
        let y = g.matmul(x, wt)?;
        let b = g.param(self.bias);
        g.add(y, b)
    }
}

/// Patch embedding, learned positions, transformer blocks and a flatten head.
#[derive(Clone, Debug)]
pub struct PatchTransformerForecaster {
    config: PatchTransformerConfig,
    input_len: usize,
    horizon: usize,
    n_patches: usize,
    /// `[D', L]`
    pub w_pro: ParamId,
    pub b_pro: ParamId,
    /// `[D', N]`
    pub w_pos: ParamId,
    blocks: Vec<TransformerBlock>,
    /// `[H, D' * N]`
    pub head_weight: ParamId,
    pub head_bias: ParamId,
}

impl PatchTransformerForecaster {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        config: PatchTransformerConfig,
        input_len: usize,
        horizon: usize,
    ) -> Result<Self> {
        if config.patch_len == 0 || input_len < config.patch_len {
            return Err(Error::ShapeMismatch {
                op: "patch_transformer",
                left: vec![input_len],
                right: vec![config.patch_len],
            });
        }
        let n = patch_count(input_len, config.patch_len);
        let d = config.dim;
        let group = ParamGroup::Numerical;
        let w_pro = store.add(format!("{name}.w_pro"), trunc_normal(rng, &[d, config.patch_len], INIT_STD), group)?;
        let b_pro = store.add(format!("{name}.b_pro"), Tensor::zeros(&[d]), group)?;
        let w_pos = store.add(format!("{name}.w_pos"), trunc_normal(rng, &[d, n], INIT_STD), group)?;
        let blocks = (0..config.depth)
            .map(|i| {
                TransformerBlock::new(
                    store,
                    rng,
                    &format!("{name}.block.{i}"),
                    d,
                    config.heads,
                    config.mlp_ratio,
                    BlockGroups { norm: group, other: group },
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let head_weight = store.add(format!("{name}.head.weight"), trunc_normal(rng, &[horizon, d * n], INIT_STD), group)?;
        let head_bias = store.add(format!("{name}.head.bias"), Tensor::zeros(&[horizon]), group)?;
        Ok(PatchTransformerForecaster {
            config,
            input_len,
            horizon,
            n_patches: n,
            w_pro,
            b_pro,
            w_pos,
            blocks,
            head_weight,
            head_bias,
        })
    }

    pub fn n_patches(&self) -> usize {
        self.n_patches
    }

    /// Flat indices into a length-`T` input laying out `[N, L]` patches with
    /// last-value tail padding.
    fn patch_index(&self) -> Vec<usize> {
        let l = self.config.patch_len;
        (0..self.n_patches * l).map(|i| i.min(self.input_len - 1)).collect()
    }

    fn forward_one(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (n, l) = (self.n_patches, self.config.patch_len);
        let patches = g.gather(x, self.patch_index(), &[n, l])?;
        let w = g.param(self.w_pro);
        let wt = g.transpose(w)?;
        let z = g.matmul(patches, wt)?;
        let b = g.param(self.b_pro);
        let z = g.add(z, b)?;
        let pos = g.param(self.w_pos);
        let pos = g.transpose(pos)?;
        let mut z = g.add(z, pos)?;
        for block in &self.blocks {
            z = block.forward(g, z)?;
        }
        let flat = g.reshape(z, &[1, n * self.config.dim])?;
        let hw = g.param(self.head_weight);
        let hwt = g.transpose(hw)?;
        let y = g.matmul(flat, hwt)?;
        let hb = g.param(self.head_bias);
        g.add(y, hb)
    }

    /// `x: [B, T]` -> `[B, H]`; rows are forecast independently.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let rows = check_input(g, x, self.input_len, "patch_transformer_forecast")?;
        if rows == 1 {
            return self.forward_one(g, x);
        }
        let outs = (0..rows)
            .map(|r| {
                let xr = g.slice(x, 0, r, 1)?;
                self.forward_one(g, xr)
            })
            .collect::<Result<Vec<_>>>()?;
        g.concat(&outs, 0)
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }
}

/// Either numerical forecaster behind one interface.
#[derive(Clone, Debug)]
pub enum NumericalForecaster {
    Linear(LinearForecaster),
    PatchTransformer(PatchTransformerForecaster),
}

impl NumericalForecaster {
    pub fn new(
        kind: NumericalKind,
        pt: &PatchTransformerConfig,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        input_len: usize,
        horizon: usize,
    ) -> Result<Self> {
        Ok(match kind {
            NumericalKind::Linear => NumericalForecaster::Linear(LinearForecaster::new(store, rng, "num.linear", input_len, horizon)?),
            NumericalKind::PatchTransformer => NumericalForecaster::PatchTransformer(PatchTransformerForecaster::new(
                store,
                rng,
                "num.pt",
                pt.clone(),
                input_len,
                horizon,
            )?),
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        match self {
            NumericalForecaster::Linear(m) => m.forward(g, x),
            NumericalForecaster::PatchTransformer(m) => m.forward(g, x),
        }
    }

    pub fn input_len(&self) -> usize {
        match self {
            NumericalForecaster::Linear(m) => m.input_len,
            NumericalForecaster::PatchTransformer(m) => m.input_len,
        }
    }

    pub fn horizon(&self) -> usize {
        match self {
            NumericalForecaster::Linear(m) => m.horizon,
            NumericalForecaster::PatchTransformer(m) => m.horizon,
        }
    }
}

/// Evaluates a forecaster on one input sequence.
pub fn forecast_values(f: &NumericalForecaster, store: &ParamStore, x: &[f64]) -> Result<Vec<f64>> {
    let mut g = Graph::new(store);
    let xv = g.constant(Tensor::row(x.to_vec()));
    let y = f.forward(&mut g, xv)?;
    Ok(g.value(y).data().to_vec())
}
