//! DMMV assembly: decompositions, the gate, and full per-window forward passes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Graph, ParamGroup, ParamId, ParamStore, Var};
use crate::codec::{encode_lookback, instance_normalize, ImagingGeometry};
use crate::error::{Error, Result};
use crate::numerical::{NumericalForecaster, NumericalKind, PatchTransformerConfig};
use crate::tensor::Tensor;
use crate::visual::{backcast_graph, forecast_graph, BackcastMasks, MaeConfig, MaskedAutoencoder, PatchMask};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Moving-average decomposition.
    S,
    /// Backcast-residual decomposition.
    A,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    Gate,
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    Bcmask,
    None,
    Random,
}

/// Which views contribute to the output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Composition {
    Dmmv,
    VisualOnly,
    NumericalOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub period: usize,
    pub lookback: usize,
    pub horizon: usize,
    pub mae: MaeConfig,
    pub numerical: NumericalKind,
    pub patch_transformer: PatchTransformerConfig,
    pub fusion: Fusion,
    pub mask_mode: MaskMode,
    pub decomposition: bool,
    pub detach_backcast: bool,
    pub composition: Composition,
    /// Variant A only: run f_num in the retained look-back's z-scored space,
    /// i.e. feed it the residual divided by the window std (minus the mean
    /// when the input is the raw window) and map its output back with the
    /// same std, adding the window mean unless sum fusion of a residual
    /// input already gets the level from the season forecast.
    #[serde(default)]
    pub residual_norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::A,
            period: 24,
            lookback: 336,
            horizon: 96,
            mae: MaeConfig::default(),
            numerical: NumericalKind::Linear,
            patch_transformer: PatchTransformerConfig::default(),
            fusion: Fusion::Gate,
            mask_mode: MaskMode::Bcmask,
            decomposition: true,
            detach_backcast: false,
            composition: Composition::Dmmv,
            residual_norm: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.mae.validate()?;
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be positive".into()));
        }
        if self.period == 0 || self.lookback < 2 * self.period {
            return Err(Error::Config(format!(
                "look-back {} must cover at least two periods of {}",
                self.lookback, self.period
            )));
        }
        self.forecast_geometry()?;
        if self.uses_backcast() {
            self.backcast_geometry()?;
        }
        if self.numerical == NumericalKind::PatchTransformer && self.numerical_input_len() < self.patch_transformer.patch_len {
            return Err(Error::Config("numerical input is shorter than one patch".into()));
        }
        Ok(())
    }

    pub fn forecast_geometry(&self) -> Result<ImagingGeometry> {
        ImagingGeometry::forecast(
            self.period,
            self.lookback,
            self.horizon,
            self.mae.image_size,
            self.mae.patch_size,
            self.mae.channels,
        )
    }

    pub fn backcast_geometry(&self) -> Result<ImagingGeometry> {
        ImagingGeometry::backcast(self.period, self.lookback, self.mae.image_size, self.mae.patch_size, self.mae.channels)
    }

    pub fn retained_len(&self) -> usize {
        (self.lookback / self.period) * self.period
    }

    /// True when the model runs the two backcast passes.
    pub fn uses_backcast(&self) -> bool {
        self.composition == Composition::Dmmv && self.variant == Variant::A && self.decomposition && self.mask_mode != MaskMode::None
    }

    pub fn uses_visual(&self) -> bool {
        self.composition != Composition::NumericalOnly
    }

    pub fn uses_numerical(&self) -> bool {
        self.composition != Composition::VisualOnly
    }

    /// Variant A feeds the numerical view only the retained look-back.
    pub fn numerical_input_len(&self) -> usize {
        match (self.composition, self.variant) {
            (Composition::Dmmv, Variant::A) => self.retained_len(),
            _ => self.lookback,
        }
    }

    /// Moving-average kernel size.
    pub fn kernel(&self) -> usize {
        2 * (self.period / 2) + 1
    }
}

/// Components of one window's decomposition.
#[derive(Clone, Debug, PartialEq)]
pub struct DecompositionResult {
    pub trend: Vec<f64>,
    pub seasonal: Vec<f64>,
    pub backcast: Option<Vec<f64>>,
}

/// Centred moving average over the replicate-padded series; `seasonal = x - trend`.
pub fn moving_average_decompose(x: &[f64], period: usize) -> DecompositionResult {
    let half = period / 2;
    let k = 2 * half + 1;
    let n = x.len();
    if n == 0 {
        return DecompositionResult {
            trend: vec![],
            seasonal: vec![],
            backcast: None,
        };
    }
    let at = |i: isize| x[i.clamp(0, n as isize - 1) as usize];
    let trend: Vec<f64> = (0..n as isize)
        .map(|t| (t - half as isize..=t + half as isize).map(at).sum::<f64>() / k as f64)
        .collect();
    let seasonal = x.iter().zip(&trend).map(|(v, m)| v - m).collect();
    DecompositionResult {
        trend,
        seasonal,
        backcast: None,
    }
}

pub fn gate_value(w_g: f64) -> f64 {
    sigmoid(w_g)
}

/// `g * season + (1 - g) * trend`.
pub fn fuse(season: &[f64], trend: &[f64], g: f64) -> Result<Vec<f64>> {
    if season.len() != trend.len() {
        return Err(Error::ShapeMismatch {
            op: "fuse",
            left: vec![season.len()],
            right: vec![trend.len()],
        });
    }
    Ok(season.iter().zip(trend).map(|(s, t)| g * s + (1.0 - g) * t).collect())
}

pub fn fuse_sum(season: &[f64], trend: &[f64]) -> Result<Vec<f64>> {
    if season.len() != trend.len() {
        return Err(Error::ShapeMismatch {
            op: "fuse_sum",
            left: vec![season.len()],
            right: vec![trend.len()],
        });
    }
    Ok(season.iter().zip(trend).map(|(s, t)| s + t).collect())
}

/// Visual-view outputs of one window, cached while the visual parameters are frozen.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualTerms {
    pub season: Vec<f64>,
    pub backcast: Option<Vec<f64>>,
}

/// Per-call inputs beyond the look-back itself.
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardCtx<'a> {
    /// Seeds the random backcast mask (mask mode `random` only).
    pub mask_seed: u64,
    pub visual: Option<&'a VisualTerms>,
}

/// Graph handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardParts {
    pub output: Var,
    pub season: Option<Var>,
    pub trend: Option<Var>,
    /// What the numerical view received.
    pub trend_input: Option<Var>,
    pub backcast: Option<Var>,
}

/// Per-window values of a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardValues {
    pub output: Vec<f64>,
    pub season: Option<Vec<f64>>,
    pub trend: Option<Vec<f64>>,
    pub trend_input: Option<Vec<f64>>,
    pub backcast: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct DmmvModel {
    config: ModelConfig,
    pub store: ParamStore,
    pub mae: MaskedAutoencoder,
    pub numerical: NumericalForecaster,
    pub gate: ParamId,
}

impl DmmvModel {
    /// Builds a freshly initialised model. Parameter creation order is fixed, so
    /// equal seeds give bitwise-equal models.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mae = MaskedAutoencoder::new(config.mae.clone(), &mut store, &mut rng)?;
        let numerical = NumericalForecaster::new(
            config.numerical,
            &config.patch_transformer,
            &mut store,
            &mut rng,
            config.numerical_input_len(),
            config.horizon,
        )?;
        let gate = store.add("gate.w_g", Tensor::zeros(&[1]), ParamGroup::Gate)?;
        Ok(DmmvModel {
            config,
            store,
            mae,
            numerical,
            gate,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn gate_value(&self) -> f64 {
        gate_value(self.store.get(self.gate).value.data()[0])
    }

    fn backcast_masks(&self, seed: u64) -> Result<BackcastMasks> {
        Ok(match self.config.mask_mode {
            MaskMode::Random => {
                let side = self.config.mae.grid_side();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                BackcastMasks::Random(PatchMask::random(side, 0.5, &mut rng))
            }
            _ => BackcastMasks::BcMask,
        })
    }

    fn check_lookback(&self, lookback: &[f64]) -> Result<()> {
        if lookback.len() != self.config.lookback {
            return Err(Error::ShapeMismatch {
                op: "model_forward",
                left: vec![lookback.len()],
                right: vec![self.config.lookback],
            });
        }
        if !lookback.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidWindow("non-finite value in look-back".into()));
        }
        Ok(())
    }

    fn retained<'x>(&self, lookback: &'x [f64]) -> &'x [f64] {
        &lookback[lookback.len() - self.config.retained_len()..]
    }

    /// The series the visual view images for its forecast.
    pub fn visual_input(&self, lookback: &[f64]) -> Vec<f64> {
        let c = &self.config;
        if c.composition == Composition::Dmmv && c.variant == Variant::S && c.decomposition {
            moving_average_decompose(lookback, c.period).seasonal
        } else {
            lookback.to_vec()
        }
    }

    /// Visual season forecast `[1, H]` and, for variant A, the backcast
    /// `[1, n_lb * P]` as graph values.
    fn visual_graph(&self, g: &mut Graph, lookback: &[f64], seed: u64) -> Result<(Var, Option<Var>)> {
        let fgeo = self.config.forecast_geometry()?;
        let img = encode_lookback(&self.visual_input(lookback), &fgeo)?;
        let season = forecast_graph(g, &self.mae, &img, self.config.horizon)?;
        let backcast = if self.config.uses_backcast() {
            let bgeo = self.config.backcast_geometry()?;
            let img = encode_lookback(lookback, &bgeo)?;
            let masks = self.backcast_masks(seed)?;
            Some(backcast_graph(g, &self.mae, &img, &masks)?)
        } else {
            None
        };
        Ok((season, backcast))
    }

    /// Evaluates only the visual view (for caching while it is frozen).
    pub fn visual_terms(&self, lookback: &[f64], mask_seed: u64) -> Result<VisualTerms> {
        self.check_lookback(lookback)?;
        if !self.config.uses_visual() {
            return Ok(VisualTerms {
                season: vec![],
                backcast: None,
            });
        }
        let mut g = Graph::new(&self.store);
        let (s, b) = self.visual_graph(&mut g, lookback, mask_seed)?;
        Ok(VisualTerms {
            season: g.value(s).data().to_vec(),
            backcast: b.map(|b| g.value(b).data().to_vec()),
        })
    }

    /// Records the forward pass of one window on `g`.
    pub fn forward_graph(&self, g: &mut Graph, lookback: &[f64], ctx: ForwardCtx<'_>) -> Result<ForwardParts> {
        self.check_lookback(lookback)?;
        let c = &self.config;
        let (season, backcast) = if !c.uses_visual() {
            (None, None)
        } else if let Some(cached) = ctx.visual {
            let s = g.constant(Tensor::row(cached.season.clone()));
            let b = cached.backcast.as_ref().map(|b| g.constant(Tensor::row(b.clone())));
            (Some(s), b)
        } else {
            let (s, b) = self.visual_graph(g, lookback, ctx.mask_seed)?;
            (Some(s), b)
        };
        if c.composition == Composition::VisualOnly {
            let s = season.expect("visual view present");
            return Ok(ForwardParts {
                output: s,
                season,
                trend: None,
                trend_input: None,
                backcast: None,
            });
        }

        let trend_input = match (c.composition, c.variant) {
            (Composition::NumericalOnly, _) => g.constant(Tensor::row(lookback.to_vec())),
            (_, Variant::S) if c.decomposition => g.constant(Tensor::row(moving_average_decompose(lookback, c.period).trend)),
            (_, Variant::S) => g.constant(Tensor::row(lookback.to_vec())),
            (_, Variant::A) => {
                let retained = g.constant(Tensor::row(self.retained(lookback).to_vec()));
                match backcast {
                    Some(b) => {
                        let b = if c.detach_backcast { g.detach(b) } else { b };
                        g.sub(retained, b)?
                    }
                    // Without a masked pass the backcast copies the look-back.
                    None if c.decomposition => g.sub(retained, retained)?,
                    None => retained,
                }
            }
        };
        let trend = if c.residual_norm && c.variant == Variant::A && c.composition == Composition::Dmmv {
            let (_, stats) = instance_normalize(self.retained(lookback));
            let scale = stats.std + stats.eps;
            // The raw window still carries its level; the residual does not.
            let raw_input = matches!(backcast, None if !c.decomposition);
            let shift = if raw_input { stats.mean } else { 0.0 };
            let centred = g.add_scalar(trend_input, -shift);
            let z = g.scale(centred, 1.0 / scale);
            let out = self.numerical.forward(g, z)?;
            let out = g.scale(out, scale);
            // Summation takes the level from the season forecast.
            let level = if raw_input || c.fusion == Fusion::Gate { stats.mean } else { 0.0 };
            g.add_scalar(out, level)
        } else {
            self.numerical.forward(g, trend_input)?
        };
        let Some(season) = season else {
            return Ok(ForwardParts {
                output: trend,
                season: None,
                trend: Some(trend),
                trend_input: Some(trend_input),
                backcast: None,
            });
        };
        let output = match c.fusion {
            Fusion::Sum => g.add(season, trend)?,
            Fusion::Gate => {
                let w = g.param(self.gate);
                let gate = g.sigmoid(w);
                let diff = g.sub(season, trend)?;
                let weighted = g.mul(diff, gate)?;
                g.add(trend, weighted)?
            }
        };
        Ok(ForwardParts {
            output,
            season: Some(season),
            trend: Some(trend),
            trend_input: Some(trend_input),
            backcast,
        })
    }

    pub fn forward_values(&self, lookback: &[f64], ctx: ForwardCtx<'_>) -> Result<ForwardValues> {
        let mut g = Graph::new(&self.store);
        let parts = self.forward_graph(&mut g, lookback, ctx)?;
        let read = |v: Option<Var>| v.map(|v| g.value(v).data().to_vec());
        Ok(ForwardValues {
            output: g.value(parts.output).data().to_vec(),
            season: read(parts.season),
            trend: read(parts.trend),
            trend_input: read(parts.trend_input),
            backcast: read(parts.backcast),
        })
    }

    pub fn forecast(&self, lookback: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_values(lookback, ForwardCtx::default())?.output)
    }

    /// Decomposition of one look-back as the model sees it.
    pub fn decompose(&self, lookback: &[f64], mask_seed: u64) -> Result<DecompositionResult> {
        self.check_lookback(lookback)?;
        let c = &self.config;
        match c.variant {
            Variant::S => Ok(moving_average_decompose(lookback, c.period)),
            Variant::A => {
                let retained = self.retained(lookback);
                let backcast = if c.uses_backcast() {
                    self.visual_terms(lookback, mask_seed)?.backcast.expect("backcast requested")
                } else {
                    retained.to_vec()
                };
                let trend = retained.iter().zip(&backcast).map(|(x, b)| x - b).collect();
                Ok(DecompositionResult {
                    trend,
                    seasonal: backcast.clone(),
                    backcast: Some(backcast),
                })
            }
        }
    }
}
