//! AdamW, early stopping and the staged training procedure.
//!
//! Stages:
//!
//! * `warmup` (optional): self-supervised masked reconstruction that trains the
//!   whole visual forecaster, standing in for pretrained weights.
//! * `stage1`: numerical forecaster and gate, visual forecaster frozen.
//! * `stage2`: additionally the visual normalisation layers.
//!
//! Each supervised stage stops early on validation MSE and restores the
//! parameters of its best validation epoch.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, ParamGroup, ParamStore, Parameter};
use crate::codec::{encode_lookback, encode_with_future, ImagingGeometry};
use crate::data::{MultivariateSeries, WindowSet};
use crate::error::{Error, Result};
use crate::eval::{evaluate, mask_seed, visual_cache, EvalOptions};
use crate::model::{DmmvModel, ForwardCtx};
use crate::par::map_indexed;
use crate::tensor::Tensor;
use crate::visual::{bc_masks, forecast_mask, patchify, PatchMask, Reconstructor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WarmupConfig {
    /// 0 disables the warm-up.
    pub epochs: usize,
    pub lr: f64,
    pub mask_ratio: f64,
    /// Probability of the layout's structured mask (forecast region, or one
    /// half for the backcast layout) instead of a random one.
    pub structured_mask_prob: f64,
    pub corpus: WarmupCorpus,
    /// Images per epoch for the synthetic corpus.
    pub corpus_size: usize,
}

/// What the warm-up reconstructs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarmupCorpus {
    /// Imaged training windows, with their future in the forecast region.
    Windows,
    /// Imaged random periodic series unrelated to the data set, each
    /// segmented at a multiple of its own period.
    SyntheticPeriodic,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        WarmupConfig {
            epochs: 20,
            lr: 1e-3,
            mask_ratio: 0.5,
            structured_mask_prob: 0.5,
            corpus: WarmupCorpus::Windows,
            corpus_size: 512,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub warmup: WarmupConfig,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub seed: u64,
    /// Window stride on the training split.
    pub train_stride: usize,
    /// Window stride on the validation split.
    pub eval_stride: usize,
    /// 0 uses every available core.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage1: StageConfig {
                lr: 0.01,
                max_epochs: 50,
                patience: 10,
            },
            stage2: StageConfig {
                lr: 0.005,
                max_epochs: 5,
                patience: 2,
            },
            warmup: WarmupConfig::default(),
            adam: AdamConfig::default(),
            batch_size: 64,
            seed: 0,
            train_stride: 1,
            eval_stride: 1,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, s) in [("stage1", &self.stage1), ("stage2", &self.stage2)] {
            if !(s.lr > 0.0) || !s.lr.is_finite() {
                return Err(Error::Config(format!("{name} learning rate must be positive")));
            }
            if s.patience > s.max_epochs {
                return Err(Error::Config(format!("{name} patience exceeds max_epochs")));
            }
        }
        if self.warmup.epochs > 0 && !(self.warmup.lr > 0.0) {
            return Err(Error::Config("warm-up learning rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup.mask_ratio) || !(0.0..=1.0).contains(&self.warmup.structured_mask_prob) {
            return Err(Error::Config("warm-up probabilities must lie in [0, 1]".into()));
        }
        if self.batch_size == 0 || self.train_stride == 0 || self.eval_stride == 0 {
            return Err(Error::Config("batch_size and strides must be positive".into()));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.eps <= 0.0 || a.weight_decay < 0.0 {
            return Err(Error::Config("invalid AdamW hyper-parameters".into()));
        }
        Ok(())
    }
}

/// Gate scalars and normalisation parameters are not decayed.
pub fn decays(p: &Parameter) -> bool {
    !matches!(p.group, ParamGroup::Gate | ParamGroup::VisualNorm) && !p.name.contains("norm")
}

#[derive(Clone, Debug, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

/// AdamW with decoupled weight decay; the step count is tracked per parameter.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamConfig,
    state: Vec<Moments>,
}

impl AdamW {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        AdamW {
            config,
            state: vec![Moments::default(); store.len()],
        }
    }

    /// Updates every trainable parameter from its accumulated gradient.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        let c = self.config;
        for (p, st) in store.iter_mut().zip(&mut self.state) {
            if !p.trainable {
                continue;
            }
            if st.m.is_empty() {
                st.m = vec![0.0; p.value.numel()];
                st.v = vec![0.0; p.value.numel()];
            }
            st.step += 1;
            let bc1 = 1.0 - c.beta1.powi(st.step as i32);
            let bc2 = 1.0 - c.beta2.powi(st.step as i32);
            let wd = if decays(p) { c.weight_decay } else { 0.0 };
            let grads = p.grad.data().to_vec();
            for (i, (theta, g)) in p.value.data_mut().iter_mut().zip(grads).enumerate() {
                *theta *= 1.0 - lr * wd;
                st.m[i] = c.beta1 * st.m[i] + (1.0 - c.beta1) * g;
                st.v[i] = c.beta2 * st.v[i] + (1.0 - c.beta2) * g * g;
                let m_hat = st.m[i] / bc1;
                let v_hat = st.v[i] / bc2;
                *theta -= lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
    }
}

/// Tracks the best validation score and decides when to stop.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
        }
    }

    /// Records the validation loss of `epoch` (0 = stage entry); returns true
    /// when it is a new best.
    pub fn observe(&mut self, epoch: usize, val: f64) -> bool {
        if val < self.best {
            self.best = val;
            self.best_epoch = epoch;
            true
        } else {
            false
        }
    }

    pub fn should_stop(&self, epoch: usize) -> bool {
        epoch >= self.best_epoch + self.patience
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub stage: String,
    pub train_mse: f64,
    pub val_mse: f64,
    pub gate_value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: String,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<HistoryRow>,
    pub stages: Vec<StageSummary>,
}

impl TrainReport {
    pub fn stage(&self, name: &str) -> Option<&StageSummary> {
        self.stages.iter().find(|s| s.stage == name)
    }
}

pub fn write_history(rows: &[HistoryRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn check_finite(loss: f64, stage: &str, epoch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::DivergedLoss {
            stage: stage.to_string(),
            epoch,
            loss,
        })
    }
}

/// Adds per-sample gradients into the store in sample order.
fn accumulate_all(store: &mut ParamStore, grads: &[Gradients], scale: f64) {
    for g in grads {
        store.accumulate(g, scale);
    }
}

fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

fn stage_rng(seed: u64, stage: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (stage << 56) ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

struct SupervisedStage<'a> {
    name: &'static str,
    index: u64,
    cfg: StageConfig,
    groups: &'a [ParamGroup],
}

/// One supervised stage: mini-batch AdamW on forecast MSE with early stopping.
fn run_stage(
    model: &mut DmmvModel,
    train: &WindowSet<'_>,
    val: &WindowSet<'_>,
    tc: &TrainConfig,
    stage: SupervisedStage<'_>,
    report: &mut TrainReport,
) -> Result<()> {
    model.store.set_trainable_groups(stage.groups);
    let visual_frozen = !stage.groups.iter().any(|g| g.is_visual());
    let workers = tc.workers;
    let (train_cache, val_cache) = if visual_frozen && model.config().uses_visual() {
        (Some(visual_cache(model, train, workers)?), Some(visual_cache(model, val, workers)?))
    } else {
        (None, None)
    };
    let mut opt = AdamW::new(tc.adam, &model.store);
    let mut stopper = EarlyStopping::new(stage.cfg.patience);
    // The entry parameters compete as epoch 0, so a stage never ends worse
    // on validation than it started.
    let entry_val = evaluate(
        model,
        val,
        EvalOptions {
            raw: None,
            cache: val_cache.as_deref(),
            workers,
        },
    )?
    .mse;
    check_finite(entry_val, stage.name, 0)?;
    stopper.observe(0, entry_val);
    let mut best_values = model.store.values();
    let mut epochs_run = 0;

    for epoch in 1..=stage.cfg.max_epochs {
        let mut rng = stage_rng(tc.seed, stage.index, epoch);
        let order = shuffled(train.len(), &mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(tc.batch_size) {
            let model_ref: &DmmvModel = model;
            let results = map_indexed(batch.len(), workers, |k| -> Result<(f64, Gradients)> {
                let i = batch[k];
                let r = train.refs[i];
                let mut g = Graph::new(&model_ref.store);
                let ctx = ForwardCtx {
                    mask_seed: mask_seed(r),
                    visual: train_cache.as_ref().map(|c| &c[i]),
                };
                let parts = model_ref.forward_graph(&mut g, train.lookback(r), ctx)?;
                let target = g.constant(Tensor::row(train.target(r).to_vec()));
                let loss = g.mse(parts.output, target)?;
                let value = g.value(loss).data()[0];
                Ok((value, g.backward(loss)?))
            });
            let mut grads = Vec::with_capacity(batch.len());
            for res in results {
                let (l, gr) = res?;
                check_finite(l, stage.name, epoch)?;
                loss_sum += l;
                grads.push(gr);
            }
            model.store.zero_grad();
            accumulate_all(&mut model.store, &grads, 1.0 / batch.len() as f64);
            opt.step(&mut model.store, stage.cfg.lr);
        }
        let train_mse = loss_sum / train.len().max(1) as f64;
        let val_mse = evaluate(
            model,
            val,
            EvalOptions {
                raw: None,
                cache: val_cache.as_deref(),
                workers,
            },
        )?
        .mse;
        check_finite(val_mse, stage.name, epoch)?;
        epochs_run = epoch;
        report.history.push(HistoryRow {
            epoch,
            stage: stage.name.into(),
            train_mse,
            val_mse,
            gate_value: model.gate_value(),
        });
        if stopper.observe(epoch, val_mse) {
            best_values = model.store.values();
        }
        if stopper.should_stop(epoch) {
            break;
        }
    }
    model.store.restore_values(&best_values);
    report.stages.push(StageSummary {
        stage: stage.name.into(),
        epochs_run,
        best_epoch: stopper.best_epoch,
        best_val: stopper.best,
    });
    Ok(())
}

/// A fully imaged warm-up sample and the structured masks that suit its layout.
struct WarmSample {
    tokens: Tensor,
    structured: Vec<PatchMask>,
}

fn window_samples(model: &DmmvModel, series: &MultivariateSeries, stride: usize) -> Result<Vec<WarmSample>> {
    let cfg = model.config();
    let fgeo = cfg.forecast_geometry()?;
    let patch = cfg.mae.patch_size;
    let future = fgeo.forecast_len();
    let set = WindowSet::new(series, cfg.lookback, future, stride);
    let mut out = Vec::new();
    for &r in &set.refs {
        let span: Vec<f64> = [set.lookback(r), set.target(r)].concat();
        let vis = model.visual_input(&span);
        let img = encode_with_future(&vis[..cfg.lookback], &vis[cfg.lookback..], &fgeo)?;
        out.push(WarmSample {
            tokens: patchify(&img.pixels, patch)?,
            structured: vec![forecast_mask(&fgeo)],
        });
        if cfg.uses_backcast() {
            let bgeo = cfg.backcast_geometry()?;
            let img = encode_lookback(set.lookback(r), &bgeo)?;
            let (left, right) = bc_masks(&bgeo);
            out.push(WarmSample {
                tokens: patchify(&img.pixels, patch)?,
                structured: vec![left, right],
            });
        }
    }
    Ok(out)
}

/// A random periodic series for the synthetic corpus: one to three harmonics
/// of `period` with random amplitudes and phases under a linear amplitude
/// envelope, plus a small drift and Gaussian noise.
pub fn periodic_series(len: usize, period: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let tau = std::f64::consts::TAU;
    let harmonics: Vec<(f64, f64, f64)> = (1..=rng.gen_range(1..=3))
        .map(|h| (h as f64, rng.gen_range(0.2..1.0) / h as f64, rng.gen_range(0.0..tau)))
        .collect();
    let (a0, a1) = (rng.gen_range(0.2..1.0), rng.gen_range(0.2..1.0));
    let drift = rng.gen_range(-0.5..0.5);
    let noise = rand_distr::Normal::new(0.0, rng.gen_range(0.0..0.05)).expect("finite std");
    (0..len)
        .map(|t| {
            let u = t as f64 / len as f64;
            let phase = tau * t as f64 / period as f64;
            let wave: f64 = harmonics.iter().map(|&(h, a, ph)| a * (h * phase + ph).sin()).sum();
            (a0 + (a1 - a0) * u) * wave + drift * u + rng.sample(noise)
        })
        .collect()
}

/// Imaged random periodic series, each segmented at one or two of its own
/// periods, in the model's forecast (and, if used, backcast) layout.
fn synthetic_samples(model: &DmmvModel, count: usize, seed: u64) -> Result<Vec<WarmSample>> {
    let cfg = model.config();
    let mae = &cfg.mae;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let period = rng.gen_range(8..=64usize);
        let segment = period * rng.gen_range(1..=2usize);
        if segment > cfg.lookback {
            continue;
        }
        let fgeo = ImagingGeometry::forecast(segment, cfg.lookback, cfg.horizon, mae.image_size, mae.patch_size, mae.channels)?;
        let offset = rng.gen_range(0..period);
        let series = periodic_series(offset + cfg.lookback + fgeo.forecast_len(), period, &mut rng);
        let span = &series[offset..];
        let img = encode_with_future(&span[..cfg.lookback], &span[cfg.lookback..], &fgeo)?;
        out.push(WarmSample {
            tokens: patchify(&img.pixels, mae.patch_size)?,
            structured: vec![forecast_mask(&fgeo)],
        });
        if cfg.uses_backcast() {
            let bgeo = ImagingGeometry::backcast(segment, cfg.lookback, mae.image_size, mae.patch_size, mae.channels)?;
            let img = encode_lookback(&span[..cfg.lookback], &bgeo)?;
            let (left, right) = bc_masks(&bgeo);
            out.push(WarmSample {
                tokens: patchify(&img.pixels, mae.patch_size)?,
                structured: vec![left, right],
            });
        }
    }
    out.truncate(count);
    Ok(out)
}

fn reconstruction_loss(g: &mut Graph<'_>, recon: &dyn Reconstructor, s: &WarmSample, mask: &PatchMask) -> Result<crate::autodiff::Var> {
    let pred = recon.predict_masked(g, &s.tokens, mask)?;
    let all = g.constant(s.tokens.clone());
    let target = g.gather_rows(all, &mask.masked_indices())?;
    g.mse(pred, target)
}

/// Self-supervised masked reconstruction updating every visual parameter.
/// The corpus is either the training windows or imaged synthetic series.
pub fn warm_up(model: &mut DmmvModel, train: &MultivariateSeries, val: &MultivariateSeries, tc: &TrainConfig, report: &mut TrainReport) -> Result<()> {
    let wc = tc.warmup;
    if wc.epochs == 0 || !model.config().uses_visual() {
        return Ok(());
    }
    let (train_samples, val_samples) = match wc.corpus {
        WarmupCorpus::Windows => (window_samples(model, train, tc.train_stride)?, window_samples(model, val, tc.eval_stride)?),
        WarmupCorpus::SyntheticPeriodic => (
            synthetic_samples(model, wc.corpus_size, tc.seed)?,
            synthetic_samples(model, (wc.corpus_size / 8).max(1), tc.seed ^ 0xF1E1D)?,
        ),
    };
    if train_samples.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    model.store.set_trainable_groups(&[ParamGroup::VisualNorm, ParamGroup::VisualOther]);
    let mut opt = AdamW::new(tc.adam, &model.store);
    let side = model.config().mae.grid_side();
    for epoch in 1..=wc.epochs {
        let mut rng = stage_rng(tc.seed, 0, epoch);
        let order = shuffled(train_samples.len(), &mut rng);
        let masks: Vec<PatchMask> = order
            .iter()
            .map(|&i| {
                let options = &train_samples[i].structured;
                if rng.gen::<f64>() < wc.structured_mask_prob {
                    options[rng.gen_range(0..options.len())].clone()
                } else {
                    PatchMask::random(side, wc.mask_ratio, &mut rng)
                }
            })
            .collect();
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(tc.batch_size).enumerate() {
            let model_ref: &DmmvModel = model;
            let results = map_indexed(batch.len(), tc.workers, |k| -> Result<(f64, Gradients)> {
                let s = &train_samples[batch[k]];
                let mask = &masks[b * tc.batch_size + k];
                let mut g = Graph::new(&model_ref.store);
                let loss = reconstruction_loss(&mut g, &model_ref.mae, s, mask)?;
                let value = g.value(loss).data()[0];
                Ok((value, g.backward(loss)?))
            });
            let mut grads = Vec::with_capacity(batch.len());
            for res in results {
                let (l, gr) = res?;
                check_finite(l, "warmup", epoch)?;
                loss_sum += l;
                grads.push(gr);
            }
            model.store.zero_grad();
            accumulate_all(&mut model.store, &grads, 1.0 / batch.len() as f64);
            opt.step(&mut model.store, wc.lr);
        }
        let model_ref: &DmmvModel = model;
        let val_losses = map_indexed(val_samples.len(), tc.workers, |i| -> Result<f64> {
            let s = &val_samples[i];
            let mut g = Graph::new(&model_ref.store);
            let loss = reconstruction_loss(&mut g, &model_ref.mae, s, &s.structured[0])?;
            Ok(g.value(loss).data()[0])
        });
        let val_mse = val_losses.into_iter().sum::<Result<f64>>()? / val_samples.len().max(1) as f64;
        report.history.push(HistoryRow {
            epoch,
            stage: "warmup".into(),
            train_mse: loss_sum / train_samples.len() as f64,
            val_mse,
            gate_value: model.gate_value(),
        });
    }
    report.stages.push(StageSummary {
        stage: "warmup".into(),
        epochs_run: wc.epochs,
        best_epoch: wc.epochs,
        best_val: report.history.last().map_or(f64::NAN, |r| r.val_mse),
    });
    Ok(())
}

pub const STAGE1_GROUPS: [ParamGroup; 2] = [ParamGroup::Numerical, ParamGroup::Gate];
pub const STAGE2_GROUPS: [ParamGroup; 3] = [ParamGroup::Numerical, ParamGroup::Gate, ParamGroup::VisualNorm];

/// Options beyond [`TrainConfig`] that change which stages run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Schedule {
    pub warmup: bool,
    /// When false the visual forecaster stays frozen throughout.
    pub stage2: bool,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            warmup: true,
            stage2: true,
        }
    }
}

/// Warm-up (optional), stage 1 and stage 2 on standardised train / val splits.
pub fn train_two_stage(
    model: &mut DmmvModel,
    train: &MultivariateSeries,
    val: &MultivariateSeries,
    tc: &TrainConfig,
    schedule: Schedule,
) -> Result<TrainReport> {
    train_two_stage_with(model, train, val, tc, schedule, &mut |_, _| Ok(()))
}

/// [`train_two_stage`] calling `on_stage(name, model)` after each stage
/// (`"warmup"`, `"stage1"`, `"stage2"`) with that stage's final parameters.
pub fn train_two_stage_with(
    model: &mut DmmvModel,
    train: &MultivariateSeries,
    val: &MultivariateSeries,
    tc: &TrainConfig,
    schedule: Schedule,
    on_stage: &mut dyn FnMut(&str, &DmmvModel) -> Result<()>,
) -> Result<TrainReport> {
    tc.validate()?;
    let cfg = model.config().clone();
    let train_set = WindowSet::new(train, cfg.lookback, cfg.horizon, tc.train_stride);
    let val_set = WindowSet::new(val, cfg.lookback, cfg.horizon, tc.eval_stride);
    if train_set.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    if val_set.is_empty() {
        return Err(Error::EmptySplit("val"));
    }
    let mut report = TrainReport::default();
    if schedule.warmup {
        warm_up(model, train, val, tc, &mut report)?;
        on_stage("warmup", model)?;
    }
    run_stage(
        model,
        &train_set,
        &val_set,
        tc,
        SupervisedStage {
            name: "stage1",
            index: 1,
            cfg: tc.stage1,
            groups: &STAGE1_GROUPS,
        },
        &mut report,
    )?;
    on_stage("stage1", model)?;
    if schedule.stage2 {
        run_stage(
            model,
            &train_set,
            &val_set,
            tc,
            SupervisedStage {
                name: "stage2",
                index: 2,
                cfg: tc.stage2,
                groups: &STAGE2_GROUPS,
            },
            &mut report,
        )?;
        on_stage("stage2", model)?;
    }
    model.store.set_trainable_groups(&[]);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(theta: f64, group: ParamGroup) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::scalar(theta), group).unwrap();
        s
    }

    #[test]
    fn adamw_zero_grad_no_decay_is_identity() {
        let mut s = scalar_store(1.5, ParamGroup::Numerical);
        let mut opt = AdamW::new(
            AdamConfig {
                weight_decay: 0.0,
                ..AdamConfig::default()
            },
            &s,
        );
        opt.step(&mut s, 0.1);
        assert_eq!(s.values()[0].data()[0], 1.5);
    }

    #[test]
    fn adamw_first_step_by_hand() {
        let (theta, g, lr, wd, eps) = (2.0, -0.3, 0.01, 0.01, 1e-8);
        let mut s = scalar_store(theta, ParamGroup::Numerical);
        s.get_mut(s.id("w").unwrap()).grad = Tensor::scalar(g);
        let mut opt = AdamW::new(AdamConfig::default(), &s);
        opt.step(&mut s, lr);
        let expected = theta * (1.0 - lr * wd) - lr * g / (g.abs() + eps);
        assert!((s.values()[0].data()[0] - expected).abs() < 1e-15);

        let mut s = scalar_store(theta, ParamGroup::Gate);
        s.get_mut(s.id("w").unwrap()).grad = Tensor::scalar(g);
        AdamW::new(AdamConfig::default(), &s).step(&mut s, lr);
        let expected = theta - lr * g / (g.abs() + eps);
        assert!((s.values()[0].data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut s = scalar_store(1.0, ParamGroup::VisualOther);
        s.get_mut(s.id("w").unwrap()).grad = Tensor::scalar(5.0);
        s.set_trainable_groups(&[ParamGroup::Numerical]);
        AdamW::new(AdamConfig::default(), &s).step(&mut s, 0.1);
        assert_eq!(s.values()[0].data()[0], 1.0);
    }

    #[test]
    fn early_stopping_rule() {
        let mut es = EarlyStopping::new(2);
        let vals = [1.0, 0.5, 0.6, 0.7, 0.4];
        let mut stopped = None;
        for (i, v) in vals.iter().enumerate() {
            es.observe(i + 1, *v);
            if es.should_stop(i + 1) {
                stopped = Some(i + 1);
                break;
            }
        }
        assert_eq!(stopped, Some(4));
        assert_eq!(es.best_epoch, 2);
    }

    #[test]
    fn periodic_series_repeats_up_to_envelope() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = periodic_series(200, 20, &mut rng);
        let b = periodic_series(200, 20, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a.len(), 200);
        assert_eq!(a, b);
        // Envelope, drift and noise are small over one period.
        let corr: f64 = (0..180).map(|t| a[t] * a[t + 20]).sum::<f64>() / (0..180).map(|t| a[t] * a[t]).sum::<f64>();
        assert!(corr > 0.8, "{corr}");
    }

    use crate::model::{Composition, ModelConfig};

    fn tiny_model(composition: Composition) -> DmmvModel {
        let cfg = ModelConfig {
            period: 8,
            lookback: 48,
            horizon: 12,
            composition,
            mae: crate::visual::MaeConfig {
                image_size: 16,
                patch_size: 4,
                channels: 1,
                enc_dim: 8,
                enc_depth: 1,
                enc_heads: 2,
                dec_dim: 8,
                dec_depth: 1,
                dec_heads: 2,
                mlp_ratio: 2,
            },
            ..ModelConfig::default()
        };
        DmmvModel::new(cfg, 0).unwrap()
    }

    #[test]
    fn synthetic_corpus_has_both_layouts() {
        let model = tiny_model(Composition::Dmmv);
        let samples = synthetic_samples(&model, 9, 1).unwrap();
        assert_eq!(samples.len(), 9);
        for pair in samples.chunks(2) {
            assert_eq!(pair[0].structured.len(), 1);
            if let Some(b) = pair.get(1) {
                assert_eq!(b.structured.len(), 2);
            }
        }
        assert!(samples.iter().all(|s| s.tokens.data().iter().all(|v| v.is_finite())));
    }

    #[test]
    fn stage_never_ends_worse_than_entry() {
        let data = crate::data::synth_trend_sine(400, 8, 0.01, 1.0, 0.1, 0).unwrap();
        let (train, val) = (data.slice(0, 300), data.slice(300, 400));
        let mut model = tiny_model(Composition::NumericalOnly);
        let tc = TrainConfig {
            stage1: StageConfig {
                lr: 5.0,
                max_epochs: 3,
                patience: 1,
            },
            stage2: StageConfig {
                lr: 5.0,
                max_epochs: 3,
                patience: 1,
            },
            batch_size: 16,
            train_stride: 4,
            ..TrainConfig::default()
        };
        let val_set = WindowSet::new(&val, 48, 12, 1);
        let entry = evaluate(&model, &val_set, EvalOptions::default()).unwrap().mse;
        let report = train_two_stage(&mut model, &train, &val, &tc, Schedule::default()).unwrap();
        let after = evaluate(&model, &val_set, EvalOptions::default()).unwrap().mse;
        assert!(after <= entry);
        assert_eq!(report.stage("stage2").unwrap().best_val, after);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let mut c = TrainConfig::default();
        c.stage2.patience = 9;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.stage1.lr = 0.0;
        assert!(c.validate().is_err());
    }
}
