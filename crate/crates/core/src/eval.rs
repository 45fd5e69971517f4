//! Metrics, the segment-length sweep and the ablation suite.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{chronological_split, standardize, MultivariateSeries, SplitSpec, Standardizer, WindowRef, WindowSet};
use crate::error::{Error, Result};
use crate::model::{Composition, DmmvModel, ForwardCtx, Fusion, MaskMode, ModelConfig, Variant, VisualTerms};
use crate::par::map_indexed;
use crate::train::{train_two_stage, Schedule, TrainConfig, TrainReport, WarmupCorpus};

/// Deterministic per-window seed for the random backcast mask.
pub fn mask_seed(r: WindowRef) -> u64 {
    let mut z = ((r.variate as u64) << 32 ^ r.start as u64).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mse: f64,
    pub mae: f64,
    pub per_horizon_mse: Vec<f64>,
    pub per_horizon_mae: Vec<f64>,
    pub windows: usize,
    /// `standardized` or `raw`.
    pub scale: String,
}

/// MSE and MAE over equally long prediction / target rows.
pub fn metrics(preds: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<MetricReport> {
    if preds.len() != targets.len() {
        return Err(Error::ShapeMismatch {
            op: "metrics",
            left: vec![preds.len()],
            right: vec![targets.len()],
        });
    }
    let h = targets.first().map_or(0, Vec::len);
    let mut se = vec![0.0; h];
    let mut ae = vec![0.0; h];
    for (p, t) in preds.iter().zip(targets) {
        if p.len() != h || t.len() != h {
            return Err(Error::ShapeMismatch {
                op: "metrics",
                left: vec![p.len()],
                right: vec![t.len()],
            });
        }
        for k in 0..h {
            let d = p[k] - t[k];
            se[k] += d * d;
            ae[k] += d.abs();
        }
    }
    let w = preds.len().max(1) as f64;
    let per_horizon_mse: Vec<f64> = se.iter().map(|s| s / w).collect();
    let per_horizon_mae: Vec<f64> = ae.iter().map(|s| s / w).collect();
    let denom = h.max(1) as f64;
    Ok(MetricReport {
        mse: per_horizon_mse.iter().sum::<f64>() / denom,
        mae: per_horizon_mae.iter().sum::<f64>() / denom,
        per_horizon_mse,
        per_horizon_mae,
        windows: preds.len(),
        scale: "standardized".into(),
    })
}

/// Forecasts for every window of `set`, in window order. `cache` holds
/// precomputed visual terms aligned with `set.refs`.
pub fn predict_set(model: &DmmvModel, set: &WindowSet<'_>, cache: Option<&[VisualTerms]>, workers: usize) -> Result<Vec<Vec<f64>>> {
    map_indexed(set.len(), workers, |i| {
        let r = set.refs[i];
        let ctx = ForwardCtx {
            mask_seed: mask_seed(r),
            visual: cache.map(|c| &c[i]),
        };
        model.forward_values(set.lookback(r), ctx).map(|v| v.output)
    })
    .into_iter()
    .collect()
}

pub fn visual_cache(model: &DmmvModel, set: &WindowSet<'_>, workers: usize) -> Result<Vec<VisualTerms>> {
    map_indexed(set.len(), workers, |i| {
        let r = set.refs[i];
        model.visual_terms(set.lookback(r), mask_seed(r))
    })
    .into_iter()
    .collect()
}

#[derive(Clone, Copy, Debug, Default)]
pub struct EvalOptions<'a> {
    /// Report in original units using these statistics.
    pub raw: Option<&'a Standardizer>,
    pub cache: Option<&'a [VisualTerms]>,
    pub workers: usize,
}

pub fn evaluate(model: &DmmvModel, set: &WindowSet<'_>, opts: EvalOptions<'_>) -> Result<MetricReport> {
    let mut preds = predict_set(model, set, opts.cache, opts.workers)?;
    let mut targets: Vec<Vec<f64>> = set.refs.iter().map(|&r| set.target(r).to_vec()).collect();
    if let Some(st) = opts.raw {
        for (i, r) in set.refs.iter().enumerate() {
            let d = r.variate;
            preds[i].iter_mut().for_each(|v| *v = st.inverse_value(d, *v));
            targets[i].iter_mut().for_each(|v| *v = st.inverse_value(d, *v));
        }
    }
    let mut report = metrics(&preds, &targets)?;
    if opts.raw.is_some() {
        report.scale = "raw".into();
    }
    Ok(report)
}

pub fn write_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// One end-to-end run: split, standardise, train, evaluate on test.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub model: DmmvModel,
    pub report: TrainReport,
    pub test: MetricReport,
    pub standardizer: Standardizer,
}

pub fn fit_and_evaluate(
    series: &MultivariateSeries,
    split: &SplitSpec,
    model_cfg: &ModelConfig,
    tc: &TrainConfig,
    schedule: Schedule,
) -> Result<RunOutcome> {
    let splits = chronological_split(series, split)?;
    let (z, standardizer) = standardize(&splits);
    let mut model = DmmvModel::new(model_cfg.clone(), tc.seed)?;
    let report = train_two_stage(&mut model, &z.train, &z.val, tc, schedule)?;
    let test_set = WindowSet::new(&z.test, model_cfg.lookback, model_cfg.horizon, tc.eval_stride);
    if test_set.is_empty() {
        return Err(Error::EmptySplit("test"));
    }
    let test = evaluate(
        &model,
        &test_set,
        EvalOptions {
            workers: tc.workers,
            ..EvalOptions::default()
        },
    )?;
    Ok(RunOutcome {
        model,
        report,
        test,
        standardizer,
    })
}

/// Segment lengths of the synthetic study.
pub const DEFAULT_SEGMENT_LENGTHS: [usize; 9] = [16, 20, 24, 28, 32, 36, 40, 44, 48];

/// `k * P / 6` for `k = 1..=6` (rounded, at least 1).
pub fn sixth_period_grid(period: usize) -> Vec<usize> {
    (1..=6).map(|k| ((k * period) as f64 / 6.0).round().max(1.0) as usize).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub segment_length: usize,
    pub seed: u64,
    pub mse: f64,
    pub mae: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn lengths(&self) -> Vec<usize> {
        let mut l: Vec<usize> = self.rows.iter().map(|r| r.segment_length).collect();
        l.dedup();
        l
    }

    /// Mean `(mse, mae)` over seeds for one segment length.
    pub fn mean(&self, length: usize) -> Option<(f64, f64)> {
        let rows: Vec<&SweepRow> = self.rows.iter().filter(|r| r.segment_length == length).collect();
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        Some((rows.iter().map(|r| r.mse).sum::<f64>() / n, rows.iter().map(|r| r.mae).sum::<f64>() / n))
    }

    pub fn seed_mse(&self, length: usize, seed: u64) -> Option<f64> {
        self.rows.iter().find(|r| r.segment_length == length && r.seed == seed).map(|r| r.mse)
    }

    /// Transposed layout: a `Segment Length` header row then MSE and MAE rows of seed means.
    pub fn write_wide_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        let lengths = self.lengths();
        let mut header = vec!["Segment Length".to_string()];
        header.extend(lengths.iter().map(|l| l.to_string()));
        w.write_record(&header)?;
        for (name, pick) in [("MSE", 0), ("MAE", 1)] {
            let mut rec = vec![name.to_string()];
            for &l in &lengths {
                let (mse, mae) = self.mean(l).expect("length present");
                rec.push(format!("{:.6}", if pick == 0 { mse } else { mae }));
            }
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn write_long_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut long = Vec::new();
        for r in &self.rows {
            let config = format!("segment={};seed={}", r.segment_length, r.seed);
            long.push(LongRow::new(&config, "mse", r.mse));
            long.push(LongRow::new(&config, "mae", r.mae));
        }
        write_long_csv(&long, path)
    }
}

/// Trains and tests the configured model once per (segment length, seed) with
/// the imaging period set to the segment length.
pub fn bias_sweep(
    series: &MultivariateSeries,
    split: &SplitSpec,
    base: &ModelConfig,
    tc: &TrainConfig,
    schedule: Schedule,
    lengths: &[usize],
    seeds: &[u64],
) -> Result<SweepTable> {
    // Synthetic-corpus pretraining does not see the data, and visual parameter
    // shapes do not depend on the period, so one warm-up per seed is shared.
    let shared = schedule.warmup && tc.warmup.corpus == WarmupCorpus::SyntheticPeriodic && base.uses_visual();
    let splits = chronological_split(series, split)?;
    let (z, _) = standardize(&splits);
    let mut pretrained = Vec::new();
    if shared {
        let first = *lengths.first().ok_or(Error::Config("empty segment length list".into()))?;
        for &seed in seeds {
            let tc = TrainConfig { seed, ..*tc };
            let cfg = ModelConfig { period: first, ..base.clone() };
            let mut model = DmmvModel::new(cfg, seed)?;
            crate::train::warm_up(&mut model, &z.train, &z.val, &tc, &mut TrainReport::default())?;
            pretrained.push(visual_values(&model));
        }
    }
    let mut rows = Vec::new();
    for &length in lengths {
        let cfg = ModelConfig {
            period: length,
            ..base.clone()
        };
        for (k, &seed) in seeds.iter().enumerate() {
            let tc = TrainConfig { seed, ..*tc };
            let test = if shared {
                let mut model = DmmvModel::new(cfg.clone(), seed)?;
                set_visual_values(&mut model, &pretrained[k]);
                train_two_stage(&mut model, &z.train, &z.val, &tc, Schedule { warmup: false, ..schedule })?;
                let test_set = WindowSet::new(&z.test, cfg.lookback, cfg.horizon, tc.eval_stride);
                if test_set.is_empty() {
                    return Err(Error::EmptySplit("test"));
                }
                evaluate(&model, &test_set, EvalOptions { workers: tc.workers, ..EvalOptions::default() })?
            } else {
                fit_and_evaluate(series, split, &cfg, &tc, schedule)?.test
            };
            rows.push(SweepRow {
                segment_length: length,
                seed,
                mse: test.mse,
                mae: test.mae,
            });
        }
    }
    Ok(SweepTable { rows })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// The configured model unchanged.
    Full,
    /// (c) gate replaced by a plain sum.
    GateToSum,
    /// (d) no backcast mask.
    NoMask,
    /// (e) random patch mask instead of left/right halves.
    RandomMask,
    /// (f) visual forecaster never fine-tuned.
    FreezeVisual,
    /// (g) both views see the raw window.
    NoDecomposition,
}

impl AblationMode {
    pub const TABLE: [AblationMode; 5] = [
        AblationMode::GateToSum,
        AblationMode::NoMask,
        AblationMode::RandomMask,
        AblationMode::FreezeVisual,
        AblationMode::NoDecomposition,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "full" | "a" => AblationMode::Full,
            "c" | "gate_to_sum" | "sum" => AblationMode::GateToSum,
            "d" | "no_mask" => AblationMode::NoMask,
            "e" | "random_mask" => AblationMode::RandomMask,
            "f" | "freeze_visual" | "freeze" => AblationMode::FreezeVisual,
            "g" | "no_decomposition" => AblationMode::NoDecomposition,
            other => return Err(Error::Config(format!("unknown ablation mode '{other}'"))),
        })
    }

    pub fn label(self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::GateToSum => "(c) gate_to_sum",
            AblationMode::NoMask => "(d) no_mask",
            AblationMode::RandomMask => "(e) random_mask",
            AblationMode::FreezeVisual => "(f) freeze_visual",
            AblationMode::NoDecomposition => "(g) no_decomposition",
        }
    }

    /// Model configuration and schedule for this mode.
    pub fn apply(self, base: &ModelConfig, schedule: Schedule) -> (ModelConfig, Schedule) {
        let mut cfg = base.clone();
        let mut sch = schedule;
        match self {
            AblationMode::Full => {}
            AblationMode::GateToSum => cfg.fusion = Fusion::Sum,
            AblationMode::NoMask => cfg.mask_mode = MaskMode::None,
            AblationMode::RandomMask => cfg.mask_mode = MaskMode::Random,
            AblationMode::FreezeVisual => sch.stage2 = false,
            AblationMode::NoDecomposition => cfg.decomposition = false,
        }
        (cfg, sch)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: AblationMode,
    pub label: String,
    pub mse: f64,
    pub mae: f64,
    pub seed_mse: Vec<f64>,
    /// Largest |input| the numerical view received on the test split
    /// (variant A only).
    pub max_abs_trend_input: Option<f64>,
    /// Visual parameters bitwise unchanged by supervised training.
    pub visual_unchanged_by_training: bool,
}

fn max_abs_trend_input(model: &DmmvModel, set: &WindowSet<'_>, workers: usize) -> Result<f64> {
    let vals = map_indexed(set.len(), workers, |i| -> Result<f64> {
        let r = set.refs[i];
        let v = model.forward_values(
            set.lookback(r),
            ForwardCtx {
                mask_seed: mask_seed(r),
                visual: None,
            },
        )?;
        Ok(v.trend_input.unwrap_or_default().iter().fold(0.0, |m: f64, x| m.max(x.abs())))
    });
    vals.into_iter().try_fold(0.0, |m: f64, v| v.map(|v| m.max(v)))
}

/// Runs every mode over every seed and reports seed means.
pub fn ablation_suite(
    series: &MultivariateSeries,
    split: &SplitSpec,
    base: &ModelConfig,
    tc: &TrainConfig,
    schedule: Schedule,
    modes: &[AblationMode],
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &mode in modes {
        let (cfg, sch) = mode.apply(base, schedule);
        let mut seed_mse = Vec::new();
        let mut maes = Vec::new();
        let mut max_input: Option<f64> = None;
        let mut unchanged = true;
        for &seed in seeds {
            let tc = TrainConfig { seed, ..*tc };
            let splits = chronological_split(series, split)?;
            let (z, _) = standardize(&splits);
            let mut model = DmmvModel::new(cfg.clone(), seed)?;
            if sch.warmup {
                let mut scratch = TrainReport::default();
                crate::train::warm_up(&mut model, &z.train, &z.val, &tc, &mut scratch)?;
            }
            let before: Vec<_> = visual_values(&model);
            train_two_stage(&mut model, &z.train, &z.val, &tc, Schedule { warmup: false, ..sch })?;
            unchanged &= before == visual_values(&model);
            let test_set = WindowSet::new(&z.test, cfg.lookback, cfg.horizon, tc.eval_stride);
            let test = evaluate(
                &model,
                &test_set,
                EvalOptions {
                    workers: tc.workers,
                    ..EvalOptions::default()
                },
            )?;
            seed_mse.push(test.mse);
            maes.push(test.mae);
            if cfg.variant == Variant::A && cfg.composition == Composition::Dmmv {
                let m = max_abs_trend_input(&model, &test_set, tc.workers)?;
                max_input = Some(max_input.map_or(m, |x| x.max(m)));
            }
        }
        let n = seeds.len().max(1) as f64;
        rows.push(AblationRow {
            mode,
            label: mode.label().into(),
            mse: seed_mse.iter().sum::<f64>() / n,
            mae: maes.iter().sum::<f64>() / n,
            seed_mse,
            max_abs_trend_input: max_input,
            visual_unchanged_by_training: unchanged,
        });
    }
    Ok(rows)
}

fn set_visual_values(model: &mut DmmvModel, values: &[crate::tensor::Tensor]) {
    let visual = model.store.iter_mut().filter(|p| p.group.is_visual());
    for (p, v) in visual.zip(values) {
        p.value = v.clone();
    }
}

fn visual_values(model: &DmmvModel) -> Vec<crate::tensor::Tensor> {
    model
        .store
        .iter()
        .filter(|(_, p)| p.group.is_visual())
        .map(|(_, p)| p.value.clone())
        .collect()
}

pub fn write_ablation_csv(rows: &[AblationRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["mode", "mse", "mae", "seeds", "max_abs_trend_input", "visual_unchanged_by_training"])?;
    for r in rows {
        w.write_record([
            r.label.clone(),
            format!("{:.6}", r.mse),
            format!("{:.6}", r.mae),
            r.seed_mse.len().to_string(),
            r.max_abs_trend_input.map_or_else(String::new, |v| format!("{v:e}")),
            r.visual_unchanged_by_training.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Plot-ready `(config, metric, value)` row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LongRow {
    pub config: String,
    pub metric: String,
    pub value: f64,
}

impl LongRow {
    pub fn new(config: &str, metric: &str, value: f64) -> Self {
        LongRow {
            config: config.into(),
            metric: metric.into(),
            value,
        }
    }
}

pub fn write_long_csv(rows: &[LongRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
