//! Period-based imaging: turning a univariate look-back window into a square
//! gray image whose columns are consecutive periods, and reading forecasts or
//! backcasts back out of reconstructed images.
//!
//! Layout conventions:
//!
//! * A stacked grid has `P` rows and `n_lb` columns; column `j`, row `r` holds
//!   retained time index `j * P + r`.
//! * The oldest `T mod P` look-back values are dropped before stacking.
//! * Images are `[C][S][S]`, row-major within a channel. The look-back occupies
//!   pixel columns `[0, b_col)`, the forecast region `[b_col, S)`.
//! * Resizing is bilinear with half-pixel centres and edge clamping. Decoding
//!   inverts the encode resize exactly (see [`decode_matrix`]).

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-8;

/// One variate's look-back values plus (optionally) its target horizon.
#[derive(Clone, Debug, PartialEq)]
pub struct UnivariateWindow {
    pub lookback: Vec<f64>,
    pub target: Option<Vec<f64>>,
    pub variate_id: usize,
}

impl UnivariateWindow {
    pub fn new(lookback: Vec<f64>, target: Option<Vec<f64>>, variate_id: usize) -> Self {
        UnivariateWindow {
            lookback,
            target,
            variate_id,
        }
    }

    pub fn validate(&self, period: usize) -> Result<()> {
        if self.lookback.len() < 2 * period {
            return Err(Error::InvalidWindow(format!(
                "look-back length {} is shorter than two periods of {period}",
                self.lookback.len()
            )));
        }
        let finite = self.lookback.iter().chain(self.target.iter().flatten()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidWindow("non-finite value in window".into()));
        }
        Ok(())
    }
}

/// Shape of the imaged window and where the forecast region starts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImagingGeometry {
    pub period: usize,
    /// Look-back columns, `floor(T / P)`.
    pub n_lb: usize,
    /// Forecast columns, `ceil(H / P)`; zero for the backcast layout.
    pub n_f: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    /// First pixel column of the forecast region (`image_size` for the backcast layout).
    pub b_col: usize,
}

fn check_image(image_size: usize, patch_size: usize, channels: usize) -> Result<()> {
    if patch_size == 0 || image_size == 0 || channels == 0 {
        return Err(Error::Config("image size, patch size and channels must be positive".into()));
    }
    if image_size % patch_size != 0 || (image_size / 2) % patch_size != 0 || image_size % 2 != 0 {
        return Err(Error::Config(format!(
            "image size {image_size} and its half must be multiples of patch size {patch_size}"
        )));
    }
    Ok(())
}

impl ImagingGeometry {
    /// Layout with a right-appended forecast region for horizon `horizon`.
    pub fn forecast(
        period: usize,
        lookback: usize,
        horizon: usize,
        image_size: usize,
        patch_size: usize,
        channels: usize,
    ) -> Result<Self> {
        check_image(image_size, patch_size, channels)?;
        if period == 0 {
            return Err(Error::Config("period must be at least 1".into()));
        }
        if period > lookback {
            return Err(Error::PeriodTooLarge { period, len: lookback });
        }
        if horizon == 0 {
            return Err(Error::Config("forecast layout needs a positive horizon".into()));
        }
        if image_size < 2 * patch_size {
            return Err(Error::Config("image must span at least two patch columns".into()));
        }
        let n_lb = lookback / period;
        let n_f = horizon.div_ceil(period);
        Ok(ImagingGeometry {
            period,
            n_lb,
            n_f,
            image_size,
            patch_size,
            channels,
            b_col: boundary_column(image_size, patch_size, n_lb, n_f),
        })
    }

    /// Layout where the whole image is look-back (`b_col = S`).
    pub fn backcast(period: usize, lookback: usize, image_size: usize, patch_size: usize, channels: usize) -> Result<Self> {
        check_image(image_size, patch_size, channels)?;
        if period == 0 {
            return Err(Error::Config("period must be at least 1".into()));
        }
        if period > lookback {
            return Err(Error::PeriodTooLarge { period, len: lookback });
        }
        Ok(ImagingGeometry {
            period,
            n_lb: lookback / period,
            n_f: 0,
            image_size,
            patch_size,
            channels,
            b_col: image_size,
        })
    }

    pub fn retained_len(&self) -> usize {
        self.n_lb * self.period
    }

    pub fn forecast_len(&self) -> usize {
        self.n_f * self.period
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn is_backcast(&self) -> bool {
        self.b_col == self.image_size
    }
}

/// `round(S * n_lb / (n_lb + n_f))` snapped to the nearest multiple of `p`,
/// clamped to `[p, S - p]`.
pub fn boundary_column(image_size: usize, patch_size: usize, n_lb: usize, n_f: usize) -> usize {
    let raw = (image_size as f64 * n_lb as f64 / (n_lb + n_f) as f64).round();
    let snapped = (raw / patch_size as f64).round() as usize * patch_size;
    snapped.clamp(patch_size, image_size - patch_size)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
    pub eps: f64,
}

impl NormStats {
    pub fn scale(&self) -> f64 {
        self.std + self.eps
    }

    pub fn normalize(&self, v: f64) -> f64 {
        (v - self.mean) / self.scale()
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        v * self.scale() + self.mean
    }
}

/// Per-window z-score with population standard deviation.
pub fn instance_normalize(values: &[f64]) -> (Vec<f64>, NormStats) {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let stats = NormStats {
        mean,
        std: var.sqrt(),
        eps: NORM_EPS,
    };
    (values.iter().map(|&v| stats.normalize(v)).collect(), stats)
}

/// Dominant period from the FFT amplitude spectrum, restricted to periods in
/// `[min_p, max_p]`.
pub fn detect_period(values: &[f64], min_p: usize, max_p: usize) -> Result<usize> {
    let n = values.len();
    if min_p < 2 || max_p < min_p || n < 2 * max_p {
        return Err(Error::Config(format!(
            "period search needs 2 <= min_p <= max_p and length >= 2*max_p (len {n}, range {min_p}..={max_p})"
        )));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let rms = (values.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    let mut buf: Vec<Complex<f64>> = values.iter().map(|&v| Complex::new(v - mean, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);

    let mut best: Option<(usize, f64)> = None;
    for (k, c) in buf.iter().enumerate().take(n / 2 + 1).skip(1) {
        let period = n as f64 / k as f64;
        if period < min_p as f64 - 0.5 || period >= max_p as f64 + 0.5 {
            continue;
        }
        let amp = 2.0 * c.norm() / n as f64;
        if best.map_or(true, |(_, a)| amp > a) {
            best = Some((k, amp));
        }
    }
    match best {
        Some((k, amp)) if amp >= 1e-9 * rms && amp > 0.0 => Ok((n as f64 / k as f64).round() as usize),
        _ => Err(Error::NoDominantPeriod { min_p, max_p }),
    }
}

/// Stacks the most recent `floor(T/P) * P` values into a `[P, floor(T/P)]` grid.
pub fn segment_stack(values: &[f64], period: usize) -> Result<Tensor> {
    if period == 0 || period > values.len() {
        return Err(Error::PeriodTooLarge {
            period,
            len: values.len(),
        });
    }
    let cols = values.len() / period;
    let retained = &values[values.len() - cols * period..];
    let mut data = vec![0.0; cols * period];
    for (t, &v) in retained.iter().enumerate() {
        let (col, row) = (t / period, t % period);
        data[row * cols + col] = v;
    }
    Tensor::matrix(period, cols, data)
}

/// Column-major read of a `[P, W]` grid back into a sequence.
pub fn unstack(grid: &Tensor) -> Result<Vec<f64>> {
    let (rows, cols) = grid.dims2()?;
    let mut out = Vec::with_capacity(rows * cols);
    for col in 0..cols {
        for row in 0..rows {
            out.push(grid.at(row, col));
        }
    }
    Ok(out)
}

/// Interpolation weights for one axis: `(i0, i1, frac)` per output index.
fn axis_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let ratio = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| {
            let src = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Dense `[n_out, n_in]` interpolation matrix for one axis; `resize(X) = R_h X R_w^T`.
pub fn resize_matrix(n_in: usize, n_out: usize) -> Tensor {
    let mut data = vec![0.0; n_out * n_in];
    for (i, (i0, i1, f)) in axis_taps(n_in, n_out).into_iter().enumerate() {
        data[i * n_in + i0] += 1.0 - f;
        if f != 0.0 {
            data[i * n_in + i1] += f;
        }
    }
    Tensor::matrix(n_out, n_in, data).expect("consistent dims")
}

/// Bilinear resize of a 2-D grid with half-pixel centres and edge clamping.
pub fn bilinear_resize(grid: &Tensor, h_out: usize, w_out: usize) -> Result<Tensor> {
    let (h, w) = grid.dims2()?;
    if h == 0 || w == 0 || h_out == 0 || w_out == 0 {
        return Err(Error::GeometryMismatch("resize dimensions must be positive".into()));
    }
    let rows = axis_taps(h, h_out);
    let cols = axis_taps(w, w_out);
    let lerp = |a: f64, b: f64, f: f64| if f == 0.0 { a } else { a * (1.0 - f) + b * f };
    let mut out = Vec::with_capacity(h_out * w_out);
    for &(r0, r1, fr) in &rows {
        for &(c0, c1, fc) in &cols {
            let top = lerp(grid.at(r0, c0), grid.at(r0, c1), fc);
            let bottom = lerp(grid.at(r1, c0), grid.at(r1, c1), fc);
            out.push(lerp(top, bottom, fr));
        }
    }
    Tensor::matrix(h_out, w_out, out)
}

/// `[C][S][S]` pixel buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub size: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(channels: usize, size: usize) -> Self {
        Image {
            channels,
            size,
            data: vec![0.0; channels * size * size],
        }
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.size + y) * self.size + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.size + y) * self.size + x] = v;
    }

    /// Channel-0 columns `[start, end)` as an `[S, end - start]` grid.
    pub fn crop_columns(&self, start: usize, end: usize) -> Tensor {
        let w = end - start;
        let mut data = Vec::with_capacity(self.size * w);
        for y in 0..self.size {
            for x in start..end {
                data.push(self.get(0, y, x));
            }
        }
        Tensor::matrix(self.size, w, data).expect("consistent dims")
    }

    /// Writes `grid` into columns starting at `start` of every channel.
    pub fn paste_columns(&mut self, grid: &Tensor, start: usize) -> Result<()> {
        let (h, w) = grid.dims2()?;
        if h != self.size || start + w > self.size {
            return Err(Error::GeometryMismatch(format!(
                "cannot paste {h}x{w} grid at column {start} of a {s}x{s} image",
                s = self.size
            )));
        }
        for c in 0..self.channels {
            for y in 0..h {
                for x in 0..w {
                    self.set(c, y, start + x, grid.at(y, x));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImagedWindow {
    pub pixels: Image,
    pub geometry: ImagingGeometry,
    pub stats: NormStats,
    pub retained_len: usize,
}

/// Normalise, stack and resize a look-back window into its image. The
/// forecast region (if any) is left at zero.
pub fn encode_window(w: &UnivariateWindow, geo: &ImagingGeometry) -> Result<ImagedWindow> {
    encode_lookback(&w.lookback, geo)
}

pub fn encode_lookback(lookback: &[f64], geo: &ImagingGeometry) -> Result<ImagedWindow> {
    let retained_len = geo.retained_len();
    if lookback.len() < geo.period {
        return Err(Error::PeriodTooLarge {
            period: geo.period,
            len: lookback.len(),
        });
    }
    if lookback.len() / geo.period != geo.n_lb {
        return Err(Error::GeometryMismatch(format!(
            "look-back of length {} does not give {} columns at period {}",
            lookback.len(),
            geo.n_lb,
            geo.period
        )));
    }
    let retained = &lookback[lookback.len() - retained_len..];
    let (normed, stats) = instance_normalize(retained);
    let grid = segment_stack(&normed, geo.period)?;
    let resized = bilinear_resize(&grid, geo.image_size, geo.b_col)?;
    let mut pixels = Image::zeros(geo.channels, geo.image_size);
    pixels.paste_columns(&resized, 0)?;
    Ok(ImagedWindow {
        pixels,
        geometry: *geo,
        stats,
        retained_len,
    })
}

/// Image of a look-back together with its known future: the forecast region
/// holds the resized future (normalised with the look-back's statistics)
/// instead of zeros. `future` must hold at least `n_f * P` values.
pub fn encode_with_future(lookback: &[f64], future: &[f64], geo: &ImagingGeometry) -> Result<ImagedWindow> {
    let mut img = encode_lookback(lookback, geo)?;
    if geo.n_f == 0 {
        return Ok(img);
    }
    let need = geo.forecast_len();
    if future.len() < need {
        return Err(Error::GeometryMismatch(format!(
            "future of length {} is shorter than the forecast region ({need})",
            future.len()
        )));
    }
    let normed: Vec<f64> = future[..need].iter().map(|&v| img.stats.normalize(v)).collect();
    let grid = segment_stack(&normed, geo.period)?;
    let resized = bilinear_resize(&grid, geo.image_size, geo.image_size - geo.b_col)?;
    img.pixels.paste_columns(&resized, geo.b_col)?;
    Ok(img)
}

/// Linear map taking `n_pix` pixels along one axis back to `n_raw` raw cells,
/// as a `[n_raw, n_pix]` matrix.
///
/// When the encoder upsampled (`n_pix > n_raw`) this is the least-squares
/// inverse `(R^T R)^-1 R^T` of the bilinear matrix `R`, so encode followed by
/// decode is exact for every upscale factor. Equal sizes give the identity and
/// a downsampled axis is read back with an ordinary bilinear resize.
pub fn decode_matrix(n_raw: usize, n_pix: usize) -> Tensor {
    use std::cmp::Ordering;
    match n_pix.cmp(&n_raw) {
        Ordering::Equal => {
            let mut eye = Tensor::zeros(&[n_raw, n_raw]);
            for i in 0..n_raw {
                eye.data_mut()[i * n_raw + i] = 1.0;
            }
            eye
        }
        Ordering::Less => resize_matrix(n_pix, n_raw),
        Ordering::Greater => {
            let r = resize_matrix(n_raw, n_pix);
            let rt = r.transposed().expect("2-D");
            let gram = crate::tensor::matmul(rt.data(), r.data(), n_raw, n_pix, n_raw);
            let solved = cholesky_solve(&gram, n_raw, rt.data(), n_pix);
            Tensor::matrix(n_raw, n_pix, solved).expect("consistent dims")
        }
    }
}

/// Solves `A X = B` for symmetric positive definite `A: [n, n]`, `B: [n, m]`.
fn cholesky_solve(a: &[f64], n: usize, b: &[f64], m: usize) -> Vec<f64> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
            if i == j {
                l[i * n + i] = (a[i * n + i] - s).max(f64::MIN_POSITIVE).sqrt();
            } else {
                l[i * n + j] = (a[i * n + j] - s) / l[j * n + j];
            }
        }
    }
    let mut x = b.to_vec();
    for col in 0..m {
        for i in 0..n {
            let s: f64 = (0..i).map(|k| l[i * n + k] * x[k * m + col]).sum();
            x[i * m + col] = (x[i * m + col] - s) / l[i * n + i];
        }
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|k| l[k * n + i] * x[k * m + col]).sum();
            x[i * m + col] = (x[i * m + col] - s) / l[i * n + i];
        }
    }
    x
}

/// Maps a `[S, w]` pixel crop back to a `[rows, cols]` raw grid.
pub fn decode_grid(crop: &Tensor, rows: usize, cols: usize) -> Result<Tensor> {
    let (h, w) = crop.dims2()?;
    let dh = decode_matrix(rows, h);
    let dw_t = decode_matrix(cols, w).transposed()?;
    let tmp = crate::tensor::matmul(dh.data(), crop.data(), rows, h, w);
    let out = crate::tensor::matmul(&tmp, dw_t.data(), rows, w, cols);
    Tensor::matrix(rows, cols, out)
}

/// Reads the first `horizon` forecast values out of a reconstructed image.
pub fn decode_forecast(img: &ImagedWindow, horizon: usize) -> Result<Vec<f64>> {
    let geo = &img.geometry;
    if horizon > geo.forecast_len() || geo.n_f == 0 {
        return Err(Error::GeometryMismatch(format!(
            "horizon {horizon} exceeds forecast capacity {}",
            geo.forecast_len()
        )));
    }
    let crop = img.pixels.crop_columns(geo.b_col, geo.image_size);
    let grid = decode_grid(&crop, geo.period, geo.n_f)?;
    let mut seq = unstack(&grid)?;
    seq.truncate(horizon);
    Ok(seq.into_iter().map(|v| img.stats.denormalize(v)).collect())
}

/// Reads the retained look-back back out of a fully reconstructed image.
pub fn decode_backcast(pixels: &Image, geo: &ImagingGeometry, stats: &NormStats) -> Result<Vec<f64>> {
    let crop = pixels.crop_columns(0, geo.b_col);
    let grid = decode_grid(&crop, geo.period, geo.n_lb)?;
    Ok(unstack(&grid)?.into_iter().map(|v| stats.denormalize(v)).collect())
}
