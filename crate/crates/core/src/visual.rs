//! The visual forecaster: a small masked autoencoder over imaged windows, the
//! patch masks it is driven with, and the forecast / backcast entry points.
//!
//! Every entry point comes in two flavours. The `*_graph` functions record on a
//! [`Graph`] so losses can be differentiated through the reconstruction and the
//! decoding; the plain functions evaluate and return values.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamGroup, ParamId, ParamStore, Var};
use crate::codec::{decode_matrix, encode_window, Image, ImagedWindow, ImagingGeometry, NormStats, UnivariateWindow};
use crate::error::{Error, Result};
use crate::layers::{trunc_normal, BlockGroups, LayerNorm, Linear, TransformerBlock, INIT_STD};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaeConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub enc_dim: usize,
    pub enc_depth: usize,
    pub enc_heads: usize,
    pub dec_dim: usize,
    pub dec_depth: usize,
    pub dec_heads: usize,
    pub mlp_ratio: usize,
}

impl Default for MaeConfig {
    fn default() -> Self {
        MaeConfig {
            image_size: 64,
            patch_size: 8,
            channels: 1,
            enc_dim: 64,
            enc_depth: 3,
            enc_heads: 4,
            dec_dim: 48,
            dec_depth: 2,
            dec_heads: 4,
            mlp_ratio: 4,
        }
    }
}

impl MaeConfig {
    pub fn validate(&self) -> Result<()> {
        let (s, p) = (self.image_size, self.patch_size);
        if p == 0 || s % p != 0 || (s / 2) % p != 0 {
            return Err(Error::Config(format!("image size {s} and its half must be multiples of patch size {p}")));
        }
        if self.enc_heads == 0 || self.enc_dim % self.enc_heads != 0 {
            return Err(Error::Config("enc_dim must be divisible by enc_heads".into()));
        }
        if self.dec_heads == 0 || self.dec_dim % self.dec_heads != 0 {
            return Err(Error::Config("dec_dim must be divisible by dec_heads".into()));
        }
        if self.channels == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("channels and mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn token_len(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

/// Boolean mask over the `side x side` patch grid, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchMask {
    side: usize,
    masked: Vec<bool>,
}

impl PatchMask {
    pub fn new(side: usize, masked: Vec<bool>) -> Result<Self> {
        if masked.len() != side * side {
            return Err(Error::ShapeMismatch {
                op: "patch_mask",
                left: vec![side, side],
                right: vec![masked.len()],
            });
        }
        Ok(PatchMask { side, masked })
    }

    pub fn none(side: usize) -> Self {
        PatchMask {
            side,
            masked: vec![false; side * side],
        }
    }

    fn from_columns(side: usize, masked_col: impl Fn(usize) -> bool) -> Self {
        let masked = (0..side * side).map(|g| masked_col(g % side)).collect();
        PatchMask { side, masked }
    }

    /// Independent Bernoulli(`ratio`) mask, repaired so at least one patch is
    /// masked and one visible.
    pub fn random(side: usize, ratio: f64, rng: &mut ChaCha8Rng) -> Self {
        let n = side * side;
        let mut masked: Vec<bool> = (0..n).map(|_| rng.gen::<f64>() < ratio).collect();
        if masked.iter().all(|&m| m) {
            masked[rng.gen_range(0..n)] = false;
        }
        if masked.iter().all(|&m| !m) {
            masked[rng.gen_range(0..n)] = true;
        }
        PatchMask { side, masked }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn is_masked(&self, patch: usize) -> bool {
        self.masked[patch]
    }

    pub fn flags(&self) -> &[bool] {
        &self.masked
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.masked.len()).filter(|&g| self.masked[g]).collect()
    }

    pub fn visible_indices(&self) -> Vec<usize> {
        (0..self.masked.len()).filter(|&g| !self.masked[g]).collect()
    }

    pub fn masked_count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    pub fn complement(&self) -> Self {
        PatchMask {
            side: self.side,
            masked: self.masked.iter().map(|m| !m).collect(),
        }
    }
}

/// Masks every patch column at or right of the forecast boundary.
pub fn forecast_mask(geo: &ImagingGeometry) -> PatchMask {
    let p = geo.patch_size;
    PatchMask::from_columns(geo.grid_side(), |c| c * p >= geo.b_col)
}

/// The two backcast masks: `.0` hides the left half, `.1` hides the right half.
pub fn bc_masks(geo: &ImagingGeometry) -> (PatchMask, PatchMask) {
    let (p, half) = (geo.patch_size, geo.image_size / 2);
    let side = geo.grid_side();
    (
        PatchMask::from_columns(side, |c| c * p < half),
        PatchMask::from_columns(side, |c| c * p >= half),
    )
}

/// `[C][S][S]` image -> `[(S/p)^2, p*p*C]` tokens. Token elements are ordered
/// `(dy, dx, channel)`; patch `g = row * (S/p) + col`.
pub fn patchify(img: &Image, patch: usize) -> Result<Tensor> {
    let s = img.size;
    if patch == 0 || s % patch != 0 {
        return Err(Error::ShapeMismatch {
            op: "patchify",
            left: vec![img.channels, s, s],
            right: vec![patch],
        });
    }
    let side = s / patch;
    let c = img.channels;
    let tok = patch * patch * c;
    let mut data = vec![0.0; side * side * tok];
    for ch in 0..c {
        for y in 0..s {
            for x in 0..s {
                let g = (y / patch) * side + x / patch;
                let e = ((y % patch) * patch + x % patch) * c + ch;
                data[g * tok + e] = img.get(ch, y, x);
            }
        }
    }
    Tensor::matrix(side * side, tok, data)
}

pub fn unpatchify(tokens: &Tensor, patch: usize, channels: usize) -> Result<Image> {
    let (n, tok) = tokens.dims2()?;
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n || tok != patch * patch * channels {
        return Err(Error::ShapeMismatch {
            op: "unpatchify",
            left: tokens.shape().to_vec(),
            right: vec![patch, channels],
        });
    }
    let s = side * patch;
    let mut img = Image::zeros(channels, s);
    for ch in 0..channels {
        for y in 0..s {
            for x in 0..s {
                let g = (y / patch) * side + x / patch;
                let e = ((y % patch) * patch + x % patch) * channels + ch;
                img.set(ch, y, x, tokens.at(g, e));
            }
        }
    }
    Ok(img)
}

/// Anything that predicts the pixels of masked patches from the visible ones.
pub trait Reconstructor: Send + Sync {
    /// Returns `[masked_count, token_len]` predictions for the masked patches in
    /// increasing patch order. `tokens` holds the full patchified input.
    fn predict_masked(&self, g: &mut Graph, tokens: &Tensor, mask: &PatchMask) -> Result<Var>;
}

/// Toy ViT masked autoencoder: the encoder sees visible patches only, the
/// decoder fills masked slots with a shared learned token.
#[derive(Clone, Debug)]
pub struct MaskedAutoencoder {
    config: MaeConfig,
    patch_embed: Linear,
    enc_pos: ParamId,
    encoder: Vec<TransformerBlock>,
    enc_norm: LayerNorm,
    dec_embed: Linear,
    mask_token: ParamId,
    dec_pos: ParamId,
    decoder: Vec<TransformerBlock>,
    dec_norm: LayerNorm,
    head: Linear,
}

impl MaskedAutoencoder {
    pub fn new(config: MaeConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let (norm, other) = (ParamGroup::VisualNorm, ParamGroup::VisualOther);
        let groups = || BlockGroups { norm, other };
        let n = config.num_patches();
        let patch_embed = Linear::new(store, rng, "vis.patch_embed", config.token_len(), config.enc_dim, other)?;
        let enc_pos = store.add("vis.enc_pos", trunc_normal(rng, &[n, config.enc_dim], INIT_STD), other)?;
        let encoder = (0..config.enc_depth)
            .map(|i| {
                TransformerBlock::new(store, rng, &format!("vis.enc.{i}"), config.enc_dim, config.enc_heads, config.mlp_ratio, groups())
            })
            .collect::<Result<Vec<_>>>()?;
        let enc_norm = LayerNorm::new(store, "vis.enc_norm", config.enc_dim, norm)?;
        let dec_embed = Linear::new(store, rng, "vis.dec_embed", config.enc_dim, config.dec_dim, other)?;
        let mask_token = store.add("vis.mask_token", trunc_normal(rng, &[1, config.dec_dim], INIT_STD), other)?;
        let dec_pos = store.add("vis.dec_pos", trunc_normal(rng, &[n, config.dec_dim], INIT_STD), other)?;
        let decoder = (0..config.dec_depth)
            .map(|i| {
                TransformerBlock::new(store, rng, &format!("vis.dec.{i}"), config.dec_dim, config.dec_heads, config.mlp_ratio, groups())
            })
            .collect::<Result<Vec<_>>>()?;
        let dec_norm = LayerNorm::new(store, "vis.dec_norm", config.dec_dim, norm)?;
        let head = Linear::new(store, rng, "vis.head", config.dec_dim, config.token_len(), other)?;
        Ok(MaskedAutoencoder {
            config,
            patch_embed,
            enc_pos,
            encoder,
            enc_norm,
            dec_embed,
            mask_token,
            dec_pos,
            decoder,
            dec_norm,
            head,
        })
    }

    pub fn config(&self) -> &MaeConfig {
        &self.config
    }
}

impl Reconstructor for MaskedAutoencoder {
    fn predict_masked(&self, g: &mut Graph, tokens: &Tensor, mask: &PatchMask) -> Result<Var> {
        let n = self.config.num_patches();
        let (rows, tok) = tokens.dims2()?;
        if rows != n || tok != self.config.token_len() || mask.flags().len() != n {
            return Err(Error::ShapeMismatch {
                op: "mae",
                left: tokens.shape().to_vec(),
                right: vec![n, self.config.token_len()],
            });
        }
        let visible = mask.visible_indices();
        let masked = mask.masked_indices();
        if visible.is_empty() {
            return Err(Error::AllMasked);
        }

        let mut vis_data = Vec::with_capacity(visible.len() * tok);
        for &v in &visible {
            vis_data.extend_from_slice(&tokens.data()[v * tok..(v + 1) * tok]);
        }
        let x = g.constant(Tensor::matrix(visible.len(), tok, vis_data)?);
        let x = self.patch_embed.forward(g, x)?;
        let pos = g.param(self.enc_pos);
        let pos = g.gather_rows(pos, &visible)?;
        let mut x = g.add(x, pos)?;
        for block in &self.encoder {
            x = block.forward(g, x)?;
        }
        let x = self.enc_norm.forward(g, x)?;

        let d = self.dec_embed.forward(g, x)?;
        let mask_tok = g.param(self.mask_token);
        let pool = g.concat(&[d, mask_tok], 0)?;
        let mut slot = vec![visible.len(); n];
        for (k, &v) in visible.iter().enumerate() {
            slot[v] = k;
        }
        let seq = g.gather_rows(pool, &slot)?;
        let pos = g.param(self.dec_pos);
        let mut y = g.add(seq, pos)?;
        for block in &self.decoder {
            y = block.forward(g, y)?;
        }
        let y = self.dec_norm.forward(g, y)?;
        let y = self.head.forward(g, y)?;
        g.gather_rows(y, &masked)
    }
}

/// Channel-0 pixels of columns `[col_start, col_end)` assembled from the
/// masked-patch predictions of one or more passes, as an `[S, width]` grid.
/// Every pixel in the region must be masked in exactly one pass.
pub fn assemble_region(
    g: &mut Graph,
    passes: &[(Var, &PatchMask)],
    image_size: usize,
    patch: usize,
    channels: usize,
    col_start: usize,
    col_end: usize,
) -> Result<Var> {
    let side = image_size / patch;
    let tok = patch * patch * channels;
    let mut slot: Vec<Option<usize>> = vec![None; side * side];
    let mut offset = 0;
    for (_, mask) in passes {
        for (rank, gidx) in mask.masked_indices().into_iter().enumerate() {
            if slot[gidx].is_some() {
                return Err(Error::GeometryMismatch(format!("patch {gidx} is masked in more than one pass")));
            }
            slot[gidx] = Some(offset + rank);
        }
        offset += mask.masked_count();
    }
    let width = col_end - col_start;
    let mut index = Vec::with_capacity(image_size * width);
    for y in 0..image_size {
        for x in col_start..col_end {
            let gidx = (y / patch) * side + x / patch;
            let row = slot[gidx].ok_or_else(|| Error::GeometryMismatch(format!("patch {gidx} is not reconstructed by any pass")))?;
            index.push(row * tok + ((y % patch) * patch + x % patch) * channels);
        }
    }
    let vars: Vec<Var> = passes.iter().map(|(v, _)| *v).collect();
    let pool = if vars.len() == 1 { vars[0] } else { g.concat(&vars, 0)? };
    g.gather(pool, index, &[image_size, width])
}

/// Differentiable decoding of an `[S, w]` region into a `[1, take]` series in data units.
pub fn decode_region_graph(
    g: &mut Graph,
    region: Var,
    raw_rows: usize,
    raw_cols: usize,
    stats: &NormStats,
    take: usize,
) -> Result<Var> {
    let (h, w) = g.value(region).dims2()?;
    let dh = g.constant(decode_matrix(raw_rows, h));
    let dw_t = g.constant(decode_matrix(raw_cols, w).transposed()?);
    let grid = g.matmul(dh, region)?;
    let grid = g.matmul(grid, dw_t)?;
    let cols_first = g.transpose(grid)?;
    let mut seq = g.reshape(cols_first, &[1, raw_rows * raw_cols])?;
    if take < raw_rows * raw_cols {
        seq = g.slice(seq, 1, 0, take)?;
    }
    let seq = g.scale(seq, stats.scale());
    Ok(g.add_scalar(seq, stats.mean))
}

/// Output image of a masked reconstruction: visible patches copied from the
/// input, masked patches replaced by predictions.
pub fn mae_reconstruct(recon: &dyn Reconstructor, store: &ParamStore, pixels: &Image, mask: &PatchMask, patch: usize) -> Result<Image> {
    if mask.visible_indices().is_empty() {
        return Err(Error::AllMasked);
    }
    if mask.masked_count() == 0 {
        return Ok(pixels.clone());
    }
    let mut tokens = patchify(pixels, patch)?;
    let mut g = Graph::new(store);
    let pred = recon.predict_masked(&mut g, &tokens, mask)?;
    let tok = tokens.dims2()?.1;
    let pred = g.value(pred).data();
    for (k, gidx) in mask.masked_indices().into_iter().enumerate() {
        tokens.data_mut()[gidx * tok..(gidx + 1) * tok].copy_from_slice(&pred[k * tok..(k + 1) * tok]);
    }
    unpatchify(&tokens, patch, pixels.channels)
}

/// How the look-back image is hidden to obtain a backcast.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BackcastMasks {
    /// Left half then right half.
    BcMask,
    /// A random patch partition (mask and its complement).
    Random(PatchMask),
}

impl BackcastMasks {
    pub fn pair(&self, geo: &ImagingGeometry) -> (PatchMask, PatchMask) {
        match self {
            BackcastMasks::BcMask => bc_masks(geo),
            BackcastMasks::Random(m) => (m.clone(), m.complement()),
        }
    }
}

/// Forecast of `horizon` steps: encode, reconstruct under the forecast mask, decode.
pub fn forecast_graph(g: &mut Graph, recon: &dyn Reconstructor, img: &ImagedWindow, horizon: usize) -> Result<Var> {
    let geo = img.geometry;
    if geo.n_f == 0 || horizon > geo.forecast_len() {
        return Err(Error::GeometryMismatch(format!("horizon {horizon} does not fit the forecast region")));
    }
    let tokens = patchify(&img.pixels, geo.patch_size)?;
    let mask = forecast_mask(&geo);
    let pred = recon.predict_masked(g, &tokens, &mask)?;
    let region = assemble_region(g, &[(pred, &mask)], geo.image_size, geo.patch_size, geo.channels, geo.b_col, geo.image_size)?;
    decode_region_graph(g, region, geo.period, geo.n_f, &img.stats, horizon)
}

/// Backcast of the retained look-back from two complementary masked passes.
pub fn backcast_graph(g: &mut Graph, recon: &dyn Reconstructor, img: &ImagedWindow, masks: &BackcastMasks) -> Result<Var> {
    let geo = img.geometry;
    if !geo.is_backcast() {
        return Err(Error::GeometryMismatch("backcast needs the square look-back layout".into()));
    }
    let tokens = patchify(&img.pixels, geo.patch_size)?;
    let (first, second) = masks.pair(&geo);
    let p1 = recon.predict_masked(g, &tokens, &first)?;
    let p2 = recon.predict_masked(g, &tokens, &second)?;
    let region = assemble_region(
        g,
        &[(p1, &first), (p2, &second)],
        geo.image_size,
        geo.patch_size,
        geo.channels,
        0,
        geo.image_size,
    )?;
    decode_region_graph(g, region, geo.period, geo.n_lb, &img.stats, geo.retained_len())
}

/// Evaluated forecast for one window.
pub fn vf_forecast(recon: &dyn Reconstructor, store: &ParamStore, w: &UnivariateWindow, geo: &ImagingGeometry, horizon: usize) -> Result<Vec<f64>> {
    let img = encode_window(w, geo)?;
    let mut g = Graph::new(store);
    let out = forecast_graph(&mut g, recon, &img, horizon)?;
    Ok(g.value(out).data().to_vec())
}

/// Evaluated BCMask backcast for one window (backcast layout).
pub fn vf_backcast(recon: &dyn Reconstructor, store: &ParamStore, w: &UnivariateWindow, geo: &ImagingGeometry) -> Result<Vec<f64>> {
    let img = encode_window(w, geo)?;
    let mut g = Graph::new(store);
    let out = backcast_graph(&mut g, recon, &img, &BackcastMasks::BcMask)?;
    Ok(g.value(out).data().to_vec())
}
