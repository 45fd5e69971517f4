//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. `ACCEPTANCE_ONLY=2,3` restricts the run.

mod common;

use common::{gradient_cases, tiny_model_config, wavy, TOLERANCE};
use dmmv_core::autodiff::{Graph, ParamGroup, ParamStore, Var};
use dmmv_core::codec::*;
use dmmv_core::data::*;
use dmmv_core::eval::*;
use dmmv_core::model::*;
use dmmv_core::tensor::Tensor;
use dmmv_core::train::*;
use dmmv_core::visual::{bc_masks, vf_backcast, MaeConfig, PatchMask, Reconstructor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::{Duration, Instant};

const EXACT: f64 = 1e-9;
const INTEGER_MULTIPLE: f64 = 1e-6;
const METRIC: f64 = 1e-12;
const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn toy_mae() -> MaeConfig {
    MaeConfig {
        image_size: 32,
        patch_size: 4,
        channels: 1,
        enc_dim: 32,
        enc_depth: 2,
        enc_heads: 4,
        dec_dim: 32,
        dec_depth: 1,
        dec_heads: 4,
        mlp_ratio: 2,
    }
}

fn experiment_config() -> TrainConfig {
    let mut tc = TrainConfig::default();
    tc.warmup.epochs = 30;
    tc.warmup.corpus = WarmupCorpus::SyntheticPeriodic;
    tc.warmup.corpus_size = 512;
    tc.train_stride = 8;
    tc.eval_stride = 8;
    tc.batch_size = 32;
    tc
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn noisy(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..len).map(|t| (t as f64 * 0.37).sin() * 3.0 + rng.gen_range(-0.5..0.5) + 10.0).collect()
}

struct Perfect;

impl Reconstructor for Perfect {
    fn predict_masked(&self, g: &mut Graph, tokens: &Tensor, mask: &PatchMask) -> dmmv_core::Result<Var> {
        let t = g.constant(tokens.clone());
        g.gather_rows(t, &mask.masked_indices())
    }
}

fn gradients() -> Outcome {
    let cases = gradient_cases();
    let mut worst = (String::new(), 0.0f64);
    let mut failed = Vec::new();
    for (name, r) in &cases {
        match r {
            Ok(e) => {
                if *e > worst.1 {
                    worst = (name.clone(), *e);
                }
                if *e > TOLERANCE {
                    failed.push(name.clone());
                }
            }
            Err(e) => failed.push(format!("{name} ({e})")),
        }
    }
    outcome(
        failed.is_empty(),
        format!("{} cases, worst {:.2e} in {}, tolerance {TOLERANCE:.0e}, failed {failed:?}", cases.len(), worst.1, worst.0),
    )
}

fn codec_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut identity = 0.0f64;
    for s in [8usize, 16, 32] {
        for extra in 0..5 {
            let x = noisy(s * s + extra, &mut rng);
            let geo = ImagingGeometry::backcast(s, x.len(), s, 4, 1).unwrap();
            let img = encode_lookback(&x, &geo).unwrap();
            let back = decode_backcast(&img.pixels, &geo, &img.stats).unwrap();
            identity = identity.max(max_abs_diff(&back, &x[extra..]));
        }
    }
    let mut multiple = 0.0f64;
    for period in [2usize, 4, 8, 16] {
        for cols in [2usize, 4, 8, 16] {
            let x = noisy(period * cols, &mut rng);
            let geo = ImagingGeometry::backcast(period, x.len(), 16, 4, 1).unwrap();
            let img = encode_lookback(&x, &geo).unwrap();
            let back = decode_backcast(&img.pixels, &geo, &img.stats).unwrap();
            multiple = multiple.max(max_abs_diff(&back, &x));
        }
    }
    let mut stacking = true;
    for period in 1..12 {
        for cols in 1..12 {
            let x = noisy(period * cols, &mut rng);
            stacking &= unstack(&segment_stack(&x, period).unwrap()).unwrap() == x;
        }
    }
    outcome(
        identity <= EXACT && multiple <= INTEGER_MULTIPLE && stacking,
        format!("identity resize {identity:.1e} (<= {EXACT:.0e}), integer multiple {multiple:.1e} (<= {INTEGER_MULTIPLE:.0e}), unstack identity {stacking}"),
    )
}

/// Backcast error against the retained look-back over the test windows.
fn backcast_mse(model: &DmmvModel, set: &WindowSet<'_>) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for &r in &set.refs {
        let x = set.lookback(r);
        let v = model.forward_values(x, ForwardCtx { mask_seed: mask_seed(r), visual: None }).unwrap();
        let b = v.backcast.unwrap();
        let tail = &x[x.len() - b.len()..];
        total += b.iter().zip(tail).map(|(p, t)| (p - t).powi(2)).sum::<f64>();
        n += b.len();
    }
    total / n as f64
}

fn decomposition() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut additivity = 0.0f64;
    for _ in 0..1000 {
        let len = rng.gen_range(1..400);
        let period = rng.gen_range(1..60);
        let x: Vec<f64> = (0..len).map(|_| rng.gen_range(-50.0..50.0)).collect();
        let d = moving_average_decompose(&x, period);
        for i in 0..len {
            additivity = additivity.max((d.trend[i] + d.seasonal[i] - x[i]).abs());
        }
    }
    let mut geometries = 0;
    let mut partition = true;
    for period in 2..30 {
        for mult in 2..8 {
            for (s, p) in [(8usize, 2usize), (16, 4), (32, 4), (64, 8)] {
                let geo = ImagingGeometry::backcast(period, period * mult, s, p, 1).unwrap();
                let (a, b) = bc_masks(&geo);
                partition &= (0..a.side() * a.side()).all(|i| a.is_masked(i) ^ b.is_masked(i));
                geometries += 1;
            }
        }
    }
    let mut stub = 0.0f64;
    for seed in 0..50 {
        let x = wavy(64 + (seed as usize % 8), seed);
        let extra = x.len() - 64;
        let geo = ImagingGeometry::backcast(8, x.len(), 8, 2, 1).unwrap();
        let back = vf_backcast(&Perfect, &ParamStore::new(), &UnivariateWindow::new(x.clone(), None, 0), &geo).unwrap();
        stub = stub.max(max_abs_diff(&back, &x[extra..]));
    }

    // Warm-up on imaged periodic series lowers the backcast error on the decaying sine.
    let series = synth_decaying_sine(2400, 24, 1.0, 0.2);
    let splits = chronological_split(&series, &SplitSpec::ETT).unwrap();
    let (z, _) = standardize(&splits);
    let cfg = ModelConfig {
        lookback: 336,
        horizon: 48,
        mae: toy_mae(),
        ..ModelConfig::default()
    };
    let mut tc = experiment_config();
    tc.warmup.epochs = 10;
    let mut model = DmmvModel::new(cfg.clone(), 0).unwrap();
    let set = WindowSet::new(&z.test, cfg.lookback, cfg.horizon, 24);
    let before = backcast_mse(&model, &set);
    warm_up(&mut model, &z.train, &z.val, &tc, &mut TrainReport::default()).unwrap();
    let after = backcast_mse(&model, &set);

    outcome(
        additivity <= EXACT && partition && stub <= EXACT && after < before,
        format!(
            "additivity {additivity:.1e} over 1000 windows, bc_masks partition {partition} over {geometries} geometries, perfect-stub backcast {stub:.1e}, backcast mse trained {after:.4} < untrained {before:.4}"
        ),
    )
}

fn fusion() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut envelope = true;
    let mut mean = true;
    let mut sum = true;
    for _ in 0..500 {
        let n = rng.gen_range(1..64);
        let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let out = fuse(&a, &b, gate_value(rng.gen_range(-8.0..8.0))).unwrap();
        envelope &= (0..n).all(|i| out[i] >= a[i].min(b[i]) - 1e-12 && out[i] <= a[i].max(b[i]) + 1e-12);
        let mid = fuse(&a, &b, gate_value(0.0)).unwrap();
        mean &= (0..n).all(|i| mid[i] == 0.5 * a[i] + 0.5 * b[i]);
        let s = fuse_sum(&a, &b).unwrap();
        sum &= (0..n).all(|i| s[i] == a[i] + b[i]);
    }
    outcome(envelope && mean && sum, format!("envelope {envelope}, w_g=0 exact mean {mean}, sum exact {sum}"))
}

fn inductive_bias() -> Outcome {
    let series = synth_decaying_sine(2400, 24, 1.0, 0.2);
    let base = ModelConfig {
        composition: Composition::VisualOnly,
        lookback: 336,
        horizon: 48,
        mae: toy_mae(),
        ..ModelConfig::default()
    };
    let table = bias_sweep(&series, &SplitSpec::ETT, &base, &experiment_config(), Schedule::default(), &DEFAULT_SEGMENT_LENGTHS, &SEEDS).unwrap();
    let others = [16usize, 20, 28, 32, 36, 40, 44];
    let mut pass = true;
    let mut detail = Vec::new();
    for &seed in &SEEDS {
        let min_other = others.iter().map(|&l| table.seed_mse(l, seed).unwrap()).fold(f64::INFINITY, f64::min);
        let at24 = table.seed_mse(24, seed).unwrap();
        let at48 = table.seed_mse(48, seed).unwrap();
        pass &= at24 < min_other && at48 < min_other;
        detail.push(format!("seed {seed}: 24 {at24:.4}, 48 {at48:.4}, others min {min_other:.4}"));
    }
    outcome(pass, detail.join("; "))
}

fn decomposition_benefit() -> Outcome {
    let arms = [("dmmv_a", Composition::Dmmv), ("visual", Composition::VisualOnly), ("linear", Composition::NumericalOnly)];
    let mut means = [0.0f64; 3];
    for &seed in &SEEDS {
        let series = synth_trend_sine(2400, 24, 0.005, 1.0, 0.1, seed).unwrap();
        for (k, (_, composition)) in arms.iter().enumerate() {
            let cfg = ModelConfig {
                composition: *composition,
                lookback: 336,
                horizon: 96,
                mae: toy_mae(),
                residual_norm: true,
                ..ModelConfig::default()
            };
            let tc = TrainConfig { seed, ..experiment_config() };
            let out = fit_and_evaluate(&series, &SplitSpec::ETT, &cfg, &tc, Schedule::default()).unwrap();
            means[k] += out.test.mse / SEEDS.len() as f64;
        }
    }
    outcome(
        means[0] < means[1] && means[0] < means[2],
        format!("mean test mse: dmmv_a {:.4}, visual-only {:.4}, linear-only {:.4}", means[0], means[1], means[2]),
    )
}

fn snapshot(m: &DmmvModel) -> Vec<(ParamGroup, Tensor)> {
    m.store.iter().map(|(_, p)| (p.group, p.value.clone())).collect()
}

fn moved(a: &[(ParamGroup, Tensor)], b: &[(ParamGroup, Tensor)]) -> Vec<ParamGroup> {
    a.iter().zip(b).filter(|(x, y)| x.1 != y.1).map(|(x, _)| x.0).collect()
}

fn training_contract() -> Outcome {
    let s = synth_trend_sine(360, 8, 0.01, 1.0, 0.1, 1).unwrap();
    let (train, val) = (s.slice(0, 260), s.slice(260, 360));
    let tc = TrainConfig {
        stage1: StageConfig { lr: 0.01, max_epochs: 8, patience: 2 },
        stage2: StageConfig { lr: 0.005, max_epochs: 4, patience: 2 },
        warmup: WarmupConfig { epochs: 2, ..WarmupConfig::default() },
        batch_size: 16,
        train_stride: 6,
        eval_stride: 6,
        workers: 2,
        ..TrainConfig::default()
    };
    let mut stage1_ok = true;
    let mut stage2_ok = true;
    let mut patience_ok = true;
    for variant in [Variant::S, Variant::A] {
        let mut warmed = DmmvModel::new(tiny_model_config(variant), 3).unwrap();
        warm_up(&mut warmed, &train, &val, &tc, &mut TrainReport::default()).unwrap();
        let entry = snapshot(&warmed);
        let mut one = warmed.clone();
        let mut both = warmed.clone();
        let r1 = train_two_stage(&mut one, &train, &val, &tc, Schedule { warmup: false, stage2: false }).unwrap();
        let r2 = train_two_stage(&mut both, &train, &val, &tc, Schedule { warmup: false, stage2: true }).unwrap();
        let after1 = snapshot(&one);
        let m1 = moved(&entry, &after1);
        stage1_ok &= m1.iter().all(|g| !g.is_visual()) && m1.contains(&ParamGroup::Numerical);
        stage2_ok &= moved(&after1, &snapshot(&both)).iter().all(|g| *g != ParamGroup::VisualOther);
        for (report, stages) in [(&r1, &["stage1"][..]), (&r2, &["stage1", "stage2"][..])] {
            for name in stages {
                let st = report.stage(name).unwrap();
                let patience = if *name == "stage1" { tc.stage1.patience } else { tc.stage2.patience };
                let max = if *name == "stage1" { tc.stage1.max_epochs } else { tc.stage2.max_epochs };
                patience_ok &= st.epochs_run <= st.best_epoch + patience;
                patience_ok &= st.epochs_run == max || st.epochs_run == st.best_epoch + patience;
            }
        }
    }
    let run = |workers| {
        let mut m = DmmvModel::new(tiny_model_config(Variant::A), 5).unwrap();
        let r = train_two_stage(&mut m, &train, &val, &TrainConfig { workers, ..tc }, Schedule::default()).unwrap();
        (m.store.values(), r.history)
    };
    let a = run(2);
    let b = run(2);
    let c = run(1);
    let reproducible = a == b && a.0 == c.0;
    outcome(
        stage1_ok && stage2_ok && patience_ok && reproducible,
        format!("stage 1 leaves visual untouched {stage1_ok}, stage 2 only visual_norm/numerical/gate {stage2_ok}, early stopping within patience {patience_ok}, bitwise reruns {reproducible}"),
    )
}

fn ablation() -> Outcome {
    let base = ModelConfig {
        lookback: 336,
        mae: toy_mae(),
        residual_norm: true,
        ..ModelConfig::default()
    };
    let datasets = [
        ("trend_sine", synth_trend_sine(2400, 24, 0.005, 1.0, 0.1, 0).unwrap(), 96),
        ("decaying_sine", synth_decaying_sine(2400, 24, 1.0, 0.2), 48),
    ];
    let mut pass = true;
    let mut detail = Vec::new();
    for (name, series, horizon) in &datasets {
        let cfg = ModelConfig { horizon: *horizon, ..base.clone() };
        let rows = ablation_suite(series, &SplitSpec::ETT, &cfg, &experiment_config(), Schedule::default(), &AblationMode::TABLE, &[0]).unwrap();
        pass &= rows.len() == AblationMode::TABLE.len() && rows.iter().all(|r| r.mse.is_finite());
        let no_mask = rows.iter().find(|r| r.mode == AblationMode::NoMask).and_then(|r| r.max_abs_trend_input);
        pass &= no_mask == Some(0.0);
        let freeze = rows.iter().find(|r| r.mode == AblationMode::FreezeVisual).is_some_and(|r| r.visual_unchanged_by_training);
        pass &= freeze;
        let cells: Vec<String> = rows.iter().map(|r| format!("{} {:.4}", r.label, r.mse)).collect();
        detail.push(format!("{name}: [{}], no-mask max |f_num input| {:?}, frozen visual unchanged {freeze}", cells.join(", "), no_mask));
    }
    outcome(pass, detail.join("; "))
}

fn protocol() -> Outcome {
    let ramp = |len: usize| MultivariateSeries::new(vec!["v".into()], vec![(0..len).map(|t| t as f64).collect()]).unwrap();
    let mut splits_ok = true;
    for len in (10..3000).step_by(7) {
        for spec in [SplitSpec::ETT, SplitSpec::STANDARD] {
            let s = chronological_split(&ramp(len), &spec).unwrap();
            let n = len as f64;
            splits_ok &= (s.train.len() as f64 - spec.train * n).abs() <= 1.0
                && (s.val.len() as f64 - spec.val * n).abs() <= 1.0
                && (s.test.len() as f64 - spec.test * n).abs() <= 1.0
                && s.val.values[0][0] == s.train.len() as f64
                && s.test.values[0][0] == (s.train.len() + s.val.len()) as f64;
        }
    }
    let mut windows_ok = true;
    for len in (0..200).step_by(3) {
        for (t, h, stride) in [(4, 2, 1), (24, 12, 5), (7, 30, 3), (50, 1, 50)] {
            let brute = (0..len).filter(|&s| s % stride == 0 && s + t + h <= len).count();
            windows_ok &= window_count(len, t, h, stride) == brute;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut metric_err = 0.0f64;
    for _ in 0..50 {
        let (w, h) = (rng.gen_range(1..6), rng.gen_range(1..8));
        let preds: Vec<Vec<f64>> = (0..w).map(|_| (0..h).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
        let targets: Vec<Vec<f64>> = (0..w).map(|_| (0..h).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
        let r = metrics(&preds, &targets).unwrap();
        let pairs = preds.iter().flatten().zip(targets.iter().flatten());
        let n = (w * h) as f64;
        let mse = pairs.clone().map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n;
        let mae = pairs.map(|(p, t)| (p - t).abs()).sum::<f64>() / n;
        metric_err = metric_err.max((r.mse - mse).abs()).max((r.mae - mae).abs());
    }
    outcome(
        splits_ok && windows_ok && metric_err <= METRIC,
        format!("splits within one row {splits_ok}, window counts match enumeration {windows_ok}, metric error {metric_err:.1e} (<= {METRIC:.0e})"),
    )
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let criteria: [(usize, &str, Duration, fn() -> Outcome); 9] = [
        (1, "gradient correctness", Duration::from_secs(60), gradients),
        (2, "codec round trip", Duration::from_secs(30), codec_round_trip),
        (3, "decomposition identities", Duration::from_secs(300), decomposition),
        (4, "fusion contracts", Duration::from_secs(30), fusion),
        (5, "inductive bias toward the period", Duration::from_secs(15 * 60), inductive_bias),
        (6, "decomposition benefit", Duration::from_secs(20 * 60), decomposition_benefit),
        (7, "two-stage training contract", Duration::from_secs(5 * 60), training_contract),
        (8, "ablation harness", Duration::from_secs(30 * 60), ablation),
        (9, "protocol fidelity", Duration::from_secs(30), protocol),
    ];
    let mut failures = 0;
    for (n, name, budget, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let r = run();
        let took = start.elapsed();
        let pass = r.pass && took <= budget;
        if !pass {
            failures += 1;
        }
        println!(
            "criterion {n} {name}: {} ({}; {:.1}s of {}s budget)",
            if pass { "PASS" } else { "FAIL" },
            r.detail,
            took.as_secs_f64(),
            budget.as_secs()
        );
    }
    if failures > 0 {
        std::process::exit(1);
    }
}
