//! Finite-difference gradient oracle and the gradient cases shared by the
//! integration tests and the acceptance binary.
#![allow(dead_code)]

use dmmv_core::autodiff::{Gradients, Graph, ParamGroup, ParamId, ParamStore, Var};
use dmmv_core::codec::{encode_window, ImagingGeometry, UnivariateWindow};
use dmmv_core::layers::{BlockGroups, LayerNorm, Linear, TransformerBlock};
use dmmv_core::model::{DmmvModel, Fusion, ModelConfig, Variant};
use dmmv_core::numerical::{LinearForecaster, NumericalKind, PatchTransformerConfig, PatchTransformerForecaster};
use dmmv_core::tensor::Tensor;
use dmmv_core::visual::{backcast_graph, forecast_graph, BackcastMasks, MaeConfig, MaskedAutoencoder, PatchMask, Reconstructor};
use dmmv_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// Relative error with a floor so that two near-zero derivatives compare as equal.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Compares the tape gradient of `loss` with central differences for up to
/// `per_param` entries of every trainable parameter. Returns the worst
/// relative error.
pub fn check_store(store: &mut ParamStore, per_param: usize, seed: u64, loss: impl Fn(&ParamStore) -> Result<(f64, Gradients)>) -> Result<f64> {
    let (_, grads) = loss(store)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<(ParamId, usize)> = store.iter().filter(|(_, p)| p.trainable).map(|(id, p)| (id, p.value.numel())).collect();
    let mut worst = 0.0f64;
    for (id, n) in ids {
        let picks: Vec<usize> = if n <= per_param { (0..n).collect() } else { (0..per_param).map(|_| rng.gen_range(0..n)).collect() };
        for i in picks {
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[i]);
            let original = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = original + STEP;
            let plus = loss(store)?.0;
            store.get_mut(id).value.data_mut()[i] = original - STEP;
            let minus = loss(store)?.0;
            store.get_mut(id).value.data_mut()[i] = original;
            worst = worst.max(rel_error(analytic, (plus - minus) / (2.0 * STEP)));
        }
    }
    Ok(worst)
}

/// `sum(out * r)` for a fixed random `r`, so every output element matters.
pub fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let r = random_tensor(&mut ChaCha8Rng::seed_from_u64(seed), g.shape(out));
    let r = g.constant(r);
    let p = g.mul(out, r)?;
    Ok(g.sum(p))
}

fn run(store: &ParamStore, build: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>) -> Result<(f64, Gradients)> {
    let mut g = Graph::new(store);
    let inputs: Vec<Var> = store.iter().map(|(id, _)| g.param(id)).collect();
    let out = build(&mut g, &inputs)?;
    let loss = project(&mut g, out, 99)?;
    let value = g.value(loss).data()[0];
    Ok((value, g.backward(loss)?))
}

/// Gradient check of one graph built from freshly drawn parameters.
fn op_case(shapes: &[&[usize]], seed: u64, build: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (i, s) in shapes.iter().enumerate() {
        store.add(format!("x{i}"), random_tensor(&mut rng, s), ParamGroup::Numerical)?;
    }
    check_store(&mut store, usize::MAX, seed, |s| run(s, build))
}

pub fn tiny_mae() -> MaeConfig {
    MaeConfig {
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
    }
}

pub fn tiny_model_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        period: 8,
        lookback: 48,
        horizon: 12,
        mae: tiny_mae(),
        ..ModelConfig::default()
    }
}

pub fn wavy(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|t| (t as f64 * 0.8).sin() + 0.03 * t as f64 + rng.gen_range(-0.1..0.1)).collect()
}

/// Perturbs every parameter away from its initial value so that zero-initialised
/// biases and unit gains do not hide errors.
fn jitter(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
}

fn model_case(cfg: ModelConfig, seed: u64) -> Result<f64> {
    let model = DmmvModel::new(cfg, seed)?;
    let mut store = model.store.clone();
    jitter(&mut store, seed);
    let x = wavy(model.config().lookback, seed);
    let y = wavy(model.config().horizon, seed + 1);
    check_store(&mut store, 3, seed, |s| {
        let mut g = Graph::new(s);
        let parts = model.forward_graph(&mut g, &x, Default::default())?;
        let t = g.constant(Tensor::row(y.clone()));
        let loss = g.mse(parts.output, t)?;
        let v = g.value(loss).data()[0];
        Ok((v, g.backward(loss)?))
    })
}

/// Every differentiable operation, the layers, both forecasters, the visual
/// forecaster and full model forwards, as `(name, worst relative error)`.
pub fn gradient_cases() -> Vec<(String, Result<f64>)> {
    let mut out: Vec<(String, Result<f64>)> = Vec::new();
    let mut add = |name: &str, r: Result<f64>| out.push((name.to_string(), r));

    add("matmul", op_case(&[&[3, 4], &[4, 2]], 1, &|g, x| g.matmul(x[0], x[1])));
    add("add", op_case(&[&[3, 4], &[3, 4]], 2, &|g, x| g.add(x[0], x[1])));
    add("add_row", op_case(&[&[3, 4], &[4]], 3, &|g, x| g.add(x[0], x[1])));
    add("add_scalar_tensor", op_case(&[&[3, 4], &[1]], 4, &|g, x| g.add(x[0], x[1])));
    add("sub", op_case(&[&[3, 4], &[3, 4]], 5, &|g, x| g.sub(x[0], x[1])));
    add("sub_row", op_case(&[&[3, 4], &[4]], 6, &|g, x| g.sub(x[0], x[1])));
    add("sub_scalar_tensor", op_case(&[&[2, 3], &[1]], 7, &|g, x| g.sub(x[0], x[1])));
    add("mul", op_case(&[&[3, 4], &[3, 4]], 8, &|g, x| g.mul(x[0], x[1])));
    add("mul_row", op_case(&[&[3, 4], &[4]], 9, &|g, x| g.mul(x[0], x[1])));
    add("mul_scalar_tensor", op_case(&[&[3, 4], &[1]], 10, &|g, x| g.mul(x[0], x[1])));
    add("scale", op_case(&[&[2, 5]], 11, &|g, x| Ok(g.scale(x[0], -1.7))));
    add("add_scalar", op_case(&[&[2, 5]], 12, &|g, x| Ok(g.add_scalar(x[0], 0.3))));
    add("transpose", op_case(&[&[2, 5]], 13, &|g, x| g.transpose(x[0])));
    add("reshape", op_case(&[&[2, 6]], 14, &|g, x| g.reshape(x[0], &[3, 4])));
    add("slice_rows", op_case(&[&[5, 3]], 15, &|g, x| g.slice(x[0], 0, 1, 3)));
    add("slice_cols", op_case(&[&[3, 5]], 16, &|g, x| g.slice(x[0], 1, 2, 2)));
    add("concat_rows", op_case(&[&[2, 3], &[1, 3]], 17, &|g, x| g.concat(&[x[0], x[1]], 0)));
    add("concat_cols", op_case(&[&[2, 3], &[2, 2]], 18, &|g, x| g.concat(&[x[0], x[1]], 1)));
    add("gather_repeated", op_case(&[&[2, 3]], 19, &|g, x| g.gather(x[0], vec![5, 0, 0, 2], &[2, 2])));
    add("gather_rows", op_case(&[&[4, 3]], 20, &|g, x| g.gather_rows(x[0], &[3, 1, 3])));
    add("sum", op_case(&[&[3, 3]], 21, &|g, x| Ok(g.sum(x[0]))));
    add("mean", op_case(&[&[3, 3]], 22, &|g, x| Ok(g.mean(x[0]))));
    add("softmax", op_case(&[&[3, 5]], 23, &|g, x| Ok(g.softmax(x[0]))));
    add("gelu", op_case(&[&[3, 5]], 24, &|g, x| Ok(g.gelu(x[0]))));
    add("sigmoid", op_case(&[&[3, 5]], 25, &|g, x| Ok(g.sigmoid(x[0]))));
    add("layer_norm", op_case(&[&[3, 6], &[6], &[6]], 26, &|g, x| g.layer_norm(x[0], x[1], x[2])));
    add("mse", op_case(&[&[2, 4], &[2, 4]], 27, &|g, x| g.mse(x[0], x[1])));

    add("linear_layer", layer_case(30, |store, rng| {
        let l = Linear::new(store, rng, "l", 5, 3, ParamGroup::Numerical)?;
        Ok(Box::new(move |g: &mut Graph, x: Var| l.forward(g, x)))
    }));
    add("layer_norm_layer", layer_case(31, |store, _| {
        let l = LayerNorm::new(store, "n", 5, ParamGroup::Numerical)?;
        Ok(Box::new(move |g: &mut Graph, x: Var| l.forward(g, x)))
    }));
    add("transformer_block", layer_case(32, |store, rng| {
        let groups = BlockGroups {
            norm: ParamGroup::Numerical,
            other: ParamGroup::Numerical,
        };
        let b = TransformerBlock::new(store, rng, "b", 5, 1, 2, groups)?;
        Ok(Box::new(move |g: &mut Graph, x: Var| b.forward(g, x)))
    }));

    add("linear_forecaster", forecaster_case(40, |store, rng| {
        let f = LinearForecaster::new(store, rng, "lin", 20, 6)?;
        Ok(Box::new(move |g: &mut Graph, x: Var| f.forward(g, x)))
    }));
    add("patch_transformer_forecaster", forecaster_case(41, |store, rng| {
        let cfg = PatchTransformerConfig {
            patch_len: 6,
            dim: 8,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
        };
        let f = PatchTransformerForecaster::new(store, rng, "pt", cfg, 20, 6)?;
        Ok(Box::new(move |g: &mut Graph, x: Var| f.forward(g, x)))
    }));

    add("mae_masked_prediction", mae_case(50));
    add("visual_forecast", visual_case(51, false));
    add("visual_backcast", visual_case(52, true));

    add("dmmv_s", model_case(tiny_model_config(Variant::S), 60));
    add("dmmv_a", model_case(tiny_model_config(Variant::A), 61));
    add(
        "dmmv_a_residual_norm",
        model_case(
            ModelConfig {
                residual_norm: true,
                ..tiny_model_config(Variant::A)
            },
            62,
        ),
    );
    add(
        "dmmv_a_sum_patch_transformer",
        model_case(
            ModelConfig {
                fusion: Fusion::Sum,
                numerical: NumericalKind::PatchTransformer,
                patch_transformer: PatchTransformerConfig {
                    patch_len: 16,
                    dim: 8,
                    depth: 1,
                    heads: 2,
                    mlp_ratio: 2,
                },
                ..tiny_model_config(Variant::A)
            },
            63,
        ),
    );
    out
}

type Forward = Box<dyn Fn(&mut Graph, Var) -> Result<Var>>;

/// Layer applied to a random `[4, 5]` input that is itself checked too.
fn layer_case(seed: u64, make: impl FnOnce(&mut ParamStore, &mut ChaCha8Rng) -> Result<Forward>) -> Result<f64> {
    shaped_case(seed, &[4, 5], make)
}

fn forecaster_case(seed: u64, make: impl FnOnce(&mut ParamStore, &mut ChaCha8Rng) -> Result<Forward>) -> Result<f64> {
    shaped_case(seed, &[1, 20], make)
}

fn shaped_case(seed: u64, shape: &[usize], make: impl FnOnce(&mut ParamStore, &mut ChaCha8Rng) -> Result<Forward>) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let input = store.add("input", random_tensor(&mut rng, shape), ParamGroup::Numerical)?;
    let f = make(&mut store, &mut rng)?;
    jitter(&mut store, seed);
    check_store(&mut store, 4, seed, |s| {
        let mut g = Graph::new(s);
        let x = g.param(input);
        let y = f(&mut g, x)?;
        let loss = project(&mut g, y, seed)?;
        let v = g.value(loss).data()[0];
        Ok((v, g.backward(loss)?))
    })
}

fn mae_case(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cfg = tiny_mae();
    let mae = MaskedAutoencoder::new(cfg.clone(), &mut store, &mut rng)?;
    jitter(&mut store, seed);
    let tokens = random_tensor(&mut rng, &[cfg.num_patches(), cfg.token_len()]);
    let mask = PatchMask::random(cfg.grid_side(), 0.5, &mut rng);
    check_store(&mut store, 3, seed, |s| {
        let mut g = Graph::new(s);
        let y = mae.predict_masked(&mut g, &tokens, &mask)?;
        let loss = project(&mut g, y, seed)?;
        let v = g.value(loss).data()[0];
        Ok((v, g.backward(loss)?))
    })
}

/// Forecast or BCMask backcast through imaging, the MAE and decoding, with
/// non-identity resizes on both axes.
fn visual_case(seed: u64, backcast: bool) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cfg = tiny_mae();
    let mae = MaskedAutoencoder::new(cfg.clone(), &mut store, &mut rng)?;
    jitter(&mut store, seed);
    let x = wavy(60, seed);
    let geo = if backcast {
        ImagingGeometry::backcast(10, 60, cfg.image_size, cfg.patch_size, 1)?
    } else {
        ImagingGeometry::forecast(10, 60, 15, cfg.image_size, cfg.patch_size, 1)?
    };
    let img = encode_window(&UnivariateWindow::new(x, None, 0), &geo)?;
    check_store(&mut store, 3, seed, |s| {
        let mut g = Graph::new(s);
        let y = if backcast {
            backcast_graph(&mut g, &mae, &img, &BackcastMasks::BcMask)?
        } else {
            forecast_graph(&mut g, &mae, &img, 15)?
        };
        let loss = project(&mut g, y, seed)?;
        let v = g.value(loss).data()[0];
        Ok((v, g.backward(loss)?))
    })
}
