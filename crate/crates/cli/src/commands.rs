use std::path::{Path, PathBuf};

use dmmv_core::checkpoint;
use dmmv_core::data::{chronological_split, load_csv, standardize, synth_decaying_sine, synth_trend_sine, write_csv, MultivariateSeries, Splits, WindowSet};
use dmmv_core::eval::{ablation_suite, bias_sweep, evaluate, mask_seed, sixth_period_grid, write_ablation_csv, write_json, AblationMode, EvalOptions, LongRow};
use dmmv_core::model::{DmmvModel, ForwardCtx};
use dmmv_core::train::{train_two_stage_with, write_history, Schedule};
use dmmv_core::{Error, Result};
use serde_json::json;

use crate::config::{build, read_config_file, touches_model, RunConfig};
use crate::{RunArgs, SplitName, SynthArgs, SynthKind};

pub const WORKERS_ENV: &str = "DMMV_WORKERS";

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// File, then shorthand flags, then `--set`, then the worker override.
fn load(run: &RunArgs) -> Result<(Vec<(String, String)>, RunConfig)> {
    let mut assignments = match &run.config {
        Some(path) => read_config_file(path)?,
        None => Vec::new(),
    };
    let mut short = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            assignments.push((k.to_string(), v));
        }
    };
    short("data.path", run.data.as_ref().map(|p| p.display().to_string()));
    short("out", run.out.as_ref().map(|p| p.display().to_string()));
    short("model.variant", run.variant.clone());
    short("model.mask_mode", run.mask_mode.clone());
    short("train.seed", run.seed.map(|s| s.to_string()));
    assignments.extend(run.sets.iter().cloned());
    let mut cfg = build(&assignments)?;
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        cfg.train.workers = v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{WORKERS_ENV} must be a non-negative integer, got '{v}'")))?;
    }
    cfg.validate()?;
    Ok((assignments, cfg))
}

fn load_series(cfg: &RunConfig) -> Result<MultivariateSeries> {
    cfg.require_data()?;
    let s = &cfg.synth;
    match s.kind.as_str() {
        "decaying_sine" => Ok(synth_decaying_sine(s.len, s.period, s.a_start, s.a_end)),
        "trend_sine" => synth_trend_sine(s.len, s.period, s.slope, s.amp, s.noise_std, s.seed),
        _ => {
            let path = Path::new(&cfg.data.path);
            if !path.exists() {
                return Err(Error::Config(format!("dataset {} does not exist", path.display())));
            }
            load_csv(path)
        }
    }
}

fn standardized(cfg: &RunConfig, series: &MultivariateSeries) -> Result<(Splits, dmmv_core::data::Standardizer)> {
    let splits = chronological_split(series, &cfg.split_spec()?)?;
    Ok(standardize(&splits))
}

fn pick(z: &Splits, split: SplitName) -> &MultivariateSeries {
    match split {
        SplitName::Train => &z.train,
        SplitName::Val => &z.val,
        SplitName::Test => &z.test,
    }
}

fn split_name(split: SplitName) -> &'static str {
    match split {
        SplitName::Train => "train",
        SplitName::Val => "val",
        SplitName::Test => "test",
    }
}

/// Creates the output directory with `checkpoints/` and `tables/`, and
/// snapshots the resolved configuration.
fn prepare_out(cfg: &RunConfig) -> Result<PathBuf> {
    let out = PathBuf::from(&cfg.out);
    for dir in [out.clone(), out.join("checkpoints"), out.join("tables")] {
        std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    }
    let snap = out.join("config.txt");
    std::fs::write(&snap, cfg.to_text()).map_err(|e| io_err(&snap, e))?;
    Ok(out)
}

fn schedule(cfg: &RunConfig) -> Schedule {
    Schedule {
        warmup: cfg.schedule.warmup && cfg.train.warmup.epochs > 0,
        stage2: cfg.schedule.stage2,
    }
}

fn eval_split(model: &DmmvModel, cfg: &RunConfig, z: &Splits, st: &dmmv_core::data::Standardizer, split: SplitName) -> Result<dmmv_core::eval::MetricReport> {
    let m = model.config();
    let set = WindowSet::new(pick(z, split), m.lookback, m.horizon, cfg.train.eval_stride);
    if set.is_empty() {
        return Err(Error::EmptySplit(split_name(split)));
    }
    evaluate(
        model,
        &set,
        EvalOptions {
            raw: cfg.data.raw_metrics.then_some(st),
            cache: None,
            workers: cfg.train.workers,
        },
    )
}

pub fn train(run: &RunArgs) -> Result<()> {
    let (_, cfg) = load(run)?;
    let series = load_series(&cfg)?;
    let (z, st) = standardized(&cfg, &series)?;
    let out = prepare_out(&cfg)?;
    let mut model = DmmvModel::new(cfg.model.clone(), cfg.train.seed)?;
    let ck_dir = out.join("checkpoints");
    let report = train_two_stage_with(&mut model, &z.train, &z.val, &cfg.train, schedule(&cfg), &mut |stage, m| {
        checkpoint::save(m, ck_dir.join(format!("{stage}.json")))
    })?;
    checkpoint::save(&model, ck_dir.join("final.json"))?;
    write_history(&report.history, out.join("history.csv"))?;
    let val = eval_split(&model, &cfg, &z, &st, SplitName::Val)?;
    let test = eval_split(&model, &cfg, &z, &st, SplitName::Test)?;
    write_json(
        &json!({
            "seed": cfg.train.seed,
            "gate_value": model.gate_value(),
            "stages": report.stages,
            "val": val,
            "test": test,
        }),
        out.join("metrics.json"),
    )?;
    println!("test mse {:.6} mae {:.6} over {} windows; outputs in {}", test.mse, test.mae, test.windows, out.display());
    Ok(())
}

fn load_checkpoint(assignments: &[(String, String)], cfg: &RunConfig, path: &Path) -> Result<DmmvModel> {
    if touches_model(assignments) {
        checkpoint::load_matching(path, &cfg.model)
    } else {
        checkpoint::load(path)
    }
}

pub fn eval(run: &RunArgs, ck: &Path, split: SplitName) -> Result<()> {
    let (assignments, cfg) = load(run)?;
    let model = load_checkpoint(&assignments, &cfg, ck)?;
    let series = load_series(&cfg)?;
    let (z, st) = standardized(&cfg, &series)?;
    let report = eval_split(&model, &cfg, &z, &st, split)?;
    let out = prepare_out(&cfg)?;
    let path = out.join(format!("eval_{}.json", split_name(split)));
    write_json(&report, &path)?;
    println!("{} mse {:.6} mae {:.6} over {} windows -> {}", split_name(split), report.mse, report.mae, report.windows, path.display());
    Ok(())
}

pub fn sweep_bias(run: &RunArgs, lengths: Option<Vec<usize>>, sixth_grid: bool) -> Result<()> {
    let (_, cfg) = load(run)?;
    let lengths = match (lengths, sixth_grid) {
        (Some(l), _) => l,
        (None, true) => sixth_period_grid(cfg.model.period),
        (None, false) => cfg.sweep.lengths.clone(),
    };
    if lengths.is_empty() || cfg.sweep.seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one length and one seed".into()));
    }
    for &l in &lengths {
        dmmv_core::model::ModelConfig { period: l, ..cfg.model.clone() }.validate()?;
    }
    let series = load_series(&cfg)?;
    let out = prepare_out(&cfg)?;
    let table = bias_sweep(&series, &cfg.split_spec()?, &cfg.model, &cfg.train, schedule(&cfg), &lengths, &cfg.sweep.seeds)?;
    table.write_wide_csv(out.join("tables/bias_sweep.csv"))?;
    table.write_long_csv(out.join("tables/bias_sweep_long.csv"))?;
    println!("segment_length,mse,mae");
    for l in table.lengths() {
        let (mse, mae) = table.mean(l).expect("length present");
        println!("{l},{mse:.6},{mae:.6}");
    }
    Ok(())
}

pub fn ablate(run: &RunArgs, modes: Option<Vec<String>>) -> Result<()> {
    let (_, cfg) = load(run)?;
    let names = modes.unwrap_or_else(|| cfg.ablate.modes.clone());
    let modes: Vec<AblationMode> = names.iter().map(|m| AblationMode::parse(m)).collect::<Result<_>>()?;
    if modes.is_empty() || cfg.ablate.seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one mode and one seed".into()));
    }
    for &m in &modes {
        m.apply(&cfg.model, schedule(&cfg)).0.validate()?;
    }
    let series = load_series(&cfg)?;
    let out = prepare_out(&cfg)?;
    let rows = ablation_suite(&series, &cfg.split_spec()?, &cfg.model, &cfg.train, schedule(&cfg), &modes, &cfg.ablate.seeds)?;
    write_ablation_csv(&rows, out.join("tables/ablation.csv"))?;
    let long: Vec<LongRow> = rows
        .iter()
        .flat_map(|r| [LongRow::new(&r.label, "mse", r.mse), LongRow::new(&r.label, "mae", r.mae)])
        .collect();
    dmmv_core::eval::write_long_csv(&long, out.join("tables/ablation_long.csv"))?;
    println!("mode,mse,mae");
    for r in &rows {
        println!("{},{:.6},{:.6}", r.label, r.mse, r.mae);
    }
    Ok(())
}

pub fn synth(args: &SynthArgs) -> Result<()> {
    if args.len == 0 || args.period == 0 {
        return Err(Error::Config("len and period must be positive".into()));
    }
    let series = match args.kind {
        SynthKind::DecayingSine => synth_decaying_sine(args.len, args.period, args.a_start, args.a_end),
        SynthKind::TrendSine => synth_trend_sine(args.len, args.period, args.slope, args.amp, args.noise_std, args.seed)?,
    };
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    write_csv(&series, &args.out)?;
    println!("wrote {} rows to {}", series.len(), args.out.display());
    Ok(())
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:?}"))
}

/// Columns `t, x, trend, seasonal, forecast, truth` in standardised units.
/// For variant A `trend` is the residual and `seasonal` the backcast, both
/// defined on the retained look-back only.
pub fn decompose(run: &RunArgs, ck: &Path, window: usize, split: SplitName) -> Result<()> {
    let (assignments, cfg) = load(run)?;
    let model = load_checkpoint(&assignments, &cfg, ck)?;
    let series = load_series(&cfg)?;
    let (z, _) = standardized(&cfg, &series)?;
    let m = model.config().clone();
    let set = WindowSet::new(pick(&z, split), m.lookback, m.horizon, cfg.train.eval_stride);
    let r = *set
        .refs
        .get(window)
        .ok_or_else(|| Error::Config(format!("window {window} out of range: {} has {} windows", split_name(split), set.len())))?;
    let x = set.lookback(r);
    let truth = set.target(r);
    let seed = mask_seed(r);
    let d = model.decompose(x, seed)?;
    let forecast = model.forward_values(x, ForwardCtx { mask_seed: seed, visual: None })?.output;
    let offset = x.len() - d.trend.len();

    let out = prepare_out(&cfg)?;
    let path = out.join(format!("tables/decompose_{}_{window}.csv", split_name(split)));
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["t", "x", "trend", "seasonal", "forecast", "truth"])?;
    for (t, &xv) in x.iter().enumerate() {
        let k = t.checked_sub(offset);
        w.write_record([
            t.to_string(),
            cell(Some(xv)),
            cell(k.map(|k| d.trend[k])),
            cell(k.map(|k| d.seasonal[k])),
            String::new(),
            String::new(),
        ])?;
    }
    for (h, (f, y)) in forecast.iter().zip(truth).enumerate() {
        w.write_record([(x.len() + h).to_string(), String::new(), String::new(), String::new(), cell(Some(*f)), cell(Some(*y))])?;
    }
    w.flush().map_err(|e| io_err(&path, e))?;
    println!("variate {} start {} -> {}", r.variate, r.start, path.display());
    Ok(())
}
