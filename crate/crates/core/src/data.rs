//! Dataset ingestion, chronological splits, standardisation, windowing and
//! synthetic generators.

use std::f64::consts::PI;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::codec::UnivariateWindow;
use crate::error::{Error, Result};

/// `values[d][t]`, equal length across variates.
#[derive(Clone, Debug, PartialEq)]
pub struct MultivariateSeries {
    pub names: Vec<String>,
    pub timestamps: Option<Vec<String>>,
    pub values: Vec<Vec<f64>>,
}

impl MultivariateSeries {
    pub fn new(names: Vec<String>, values: Vec<Vec<f64>>) -> Result<Self> {
        let s = MultivariateSeries {
            names,
            timestamps: None,
            values,
        };
        s.check()?;
        Ok(s)
    }

    fn check(&self) -> Result<()> {
        if self.names.len() != self.values.len() {
            return Err(Error::Config(format!(
                "{} names for {} variates",
                self.names.len(),
                self.values.len()
            )));
        }
        let len = self.len();
        if self.values.iter().any(|v| v.len() != len) {
            return Err(Error::Config("variates differ in length".into()));
        }
        if let Some(ts) = &self.timestamps {
            if ts.len() != len {
                return Err(Error::Config("timestamp column length differs from values".into()));
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> usize {
        self.values.len()
    }

    pub fn len(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> MultivariateSeries {
        MultivariateSeries {
            names: self.names.clone(),
            timestamps: self.timestamps.as_ref().map(|t| t[start..end].to_vec()),
            values: self.values.iter().map(|v| v[start..end].to_vec()).collect(),
        }
    }
}

/// Reads a CSV whose first column is a timestamp and the rest numeric variates.
/// Row numbers in errors count the header as row 1.
pub fn load_csv(path: impl AsRef<Path>) -> Result<MultivariateSeries> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file)
}

pub fn read_csv(reader: impl std::io::Read) -> Result<MultivariateSeries> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(false).from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.len() < 2 {
        return Err(Error::Parse {
            row: 1,
            column: header.len(),
            message: "expected a timestamp column and at least one variate".into(),
        });
    }
    let names: Vec<String> = header.iter().skip(1).map(|s| s.trim().to_string()).collect();
    let mut values = vec![Vec::new(); names.len()];
    let mut timestamps = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| Error::Parse {
            row,
            column: 0,
            message: e.to_string(),
        })?;
        timestamps.push(rec.get(0).unwrap_or_default().to_string());
        for (d, col) in values.iter_mut().enumerate() {
            let column = d + 2;
            let cell = rec.get(d + 1).unwrap_or_default().trim();
            if cell.is_empty() {
                return Err(Error::Parse {
                    row,
                    column,
                    message: format!("empty numeric cell in column {:?}", names[d]),
                });
            }
            let v: f64 = cell.parse().map_err(|_| Error::NonNumericCell {
                row,
                column,
                value: cell.to_string(),
            })?;
            col.push(v);
        }
    }
    let s = MultivariateSeries {
        names,
        timestamps: Some(timestamps),
        values,
    };
    s.check()?;
    Ok(s)
}

/// Writes the loader's format; rows without timestamps get their index.
pub fn write_csv(series: &MultivariateSeries, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let mut header = vec!["date".to_string()];
    header.extend(series.names.iter().cloned());
    w.write_record(&header)?;
    for t in 0..series.len() {
        let mut rec = Vec::with_capacity(series.dims() + 1);
        rec.push(series.timestamps.as_ref().map_or_else(|| t.to_string(), |ts| ts[t].clone()));
        rec.extend(series.values.iter().map(|v| format!("{:?}", v[t])));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitSpec {
    pub const ETT: SplitSpec = SplitSpec {
        train: 0.6,
        val: 0.2,
        test: 0.2,
    };
    pub const STANDARD: SplitSpec = SplitSpec {
        train: 0.7,
        val: 0.1,
        test: 0.2,
    };

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|r| !r.is_finite() || *r < 0.0) || ((parts.iter().sum::<f64>()) - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "split ratios {}/{}/{} must be non-negative and sum to 1",
                self.train, self.val, self.test
            )));
        }
        Ok(())
    }

    /// Row boundaries `(train_end, val_end)`.
    pub fn boundaries(&self, total: usize) -> (usize, usize) {
        let floor = |r: f64| ((r * total as f64) + 1e-9).floor() as usize;
        let train_end = floor(self.train);
        let val_end = floor(self.train + self.val).max(train_end).min(total);
        (train_end, val_end)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: MultivariateSeries,
    pub val: MultivariateSeries,
    pub test: MultivariateSeries,
}

pub fn chronological_split(series: &MultivariateSeries, spec: &SplitSpec) -> Result<Splits> {
    spec.validate()?;
    let n = series.len();
    let (a, b) = spec.boundaries(n);
    let splits = Splits {
        train: series.slice(0, a),
        val: series.slice(a, b),
        test: series.slice(b, n),
    };
    for (name, s) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        if s.is_empty() {
            return Err(Error::EmptySplit(name));
        }
    }
    Ok(splits)
}

/// Per-variate z-score statistics fitted on the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(train: &MultivariateSeries) -> Self {
        let mut mean = Vec::with_capacity(train.dims());
        let mut std = Vec::with_capacity(train.dims());
        for v in &train.values {
            let n = v.len().max(1) as f64;
            let m = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
            mean.push(m);
            std.push(if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 });
        }
        Standardizer { mean, std }
    }

    pub fn transform(&self, s: &MultivariateSeries) -> MultivariateSeries {
        let mut out = s.clone();
        for (d, v) in out.values.iter_mut().enumerate() {
            v.iter_mut().for_each(|x| *x = (*x - self.mean[d]) / self.std[d]);
        }
        out
    }

    pub fn inverse(&self, s: &MultivariateSeries) -> MultivariateSeries {
        let mut out = s.clone();
        for (d, v) in out.values.iter_mut().enumerate() {
            v.iter_mut().for_each(|x| *x = *x * self.std[d] + self.mean[d]);
        }
        out
    }

    pub fn inverse_value(&self, variate: usize, v: f64) -> f64 {
        v * self.std[variate] + self.mean[variate]
    }
}

/// Fits on train and applies to all three splits.
pub fn standardize(splits: &Splits) -> (Splits, Standardizer) {
    let st = Standardizer::fit(&splits.train);
    (
        Splits {
            train: st.transform(&splits.train),
            val: st.transform(&splits.val),
            test: st.transform(&splits.test),
        },
        st,
    )
}

/// Start offsets of every window with `lookback + horizon` rows inside `len`.
pub fn window_starts(len: usize, lookback: usize, horizon: usize, stride: usize) -> Vec<usize> {
    let span = lookback + horizon;
    if stride == 0 || len < span {
        return Vec::new();
    }
    (0..=len - span).step_by(stride).collect()
}

/// Window count per variate: `floor((len - T - H) / stride) + 1`.
pub fn window_count(len: usize, lookback: usize, horizon: usize, stride: usize) -> usize {
    if stride == 0 || len < lookback + horizon {
        0
    } else {
        (len - lookback - horizon) / stride + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowRef {
    pub variate: usize,
    pub start: usize,
}

/// Index of every (variate, start) window in one split, variate-major.
#[derive(Clone, Debug)]
pub struct WindowSet<'a> {
    pub series: &'a MultivariateSeries,
    pub lookback: usize,
    pub horizon: usize,
    pub refs: Vec<WindowRef>,
}

impl<'a> WindowSet<'a> {
    pub fn new(series: &'a MultivariateSeries, lookback: usize, horizon: usize, stride: usize) -> Self {
        let starts = window_starts(series.len(), lookback, horizon, stride);
        let refs = (0..series.dims())
            .flat_map(|variate| starts.iter().map(move |&start| WindowRef { variate, start }))
            .collect();
        WindowSet {
            series,
            lookback,
            horizon,
            refs,
        }
    }

    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }

    pub fn lookback(&self, r: WindowRef) -> &'a [f64] {
        &self.series.values[r.variate][r.start..r.start + self.lookback]
    }

    pub fn target(&self, r: WindowRef) -> &'a [f64] {
        let s = r.start + self.lookback;
        &self.series.values[r.variate][s..s + self.horizon]
    }

    pub fn window(&self, r: WindowRef) -> UnivariateWindow {
        UnivariateWindow::new(self.lookback(r).to_vec(), Some(self.target(r).to_vec()), r.variate)
    }

    pub fn iter(&self) -> impl Iterator<Item = UnivariateWindow> + '_ {
        self.refs.iter().map(|&r| self.window(r))
    }
}

/// `x(t) = A(t) sin(2 pi t / P)` with `A` linear from `a_start` (t = 0) to
/// `a_end` (t = total_len - 1).
pub fn synth_decaying_sine(total_len: usize, period: usize, a_start: f64, a_end: f64) -> MultivariateSeries {
    let denom = total_len.saturating_sub(1).max(1) as f64;
    let values = (0..total_len)
        .map(|t| {
            let a = a_start + (a_end - a_start) * t as f64 / denom;
            a * (2.0 * PI * t as f64 / period as f64).sin()
        })
        .collect();
    MultivariateSeries {
        names: vec!["value".into()],
        timestamps: None,
        values: vec![values],
    }
}

/// `x(t) = slope t + amp sin(2 pi t / P) + N(0, noise_std^2)`, seeded.
pub fn synth_trend_sine(total_len: usize, period: usize, slope: f64, amp: f64, noise_std: f64, seed: u64) -> Result<MultivariateSeries> {
    let noise = Normal::new(0.0, noise_std).map_err(|e| Error::Config(format!("noise_std: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..total_len)
        .map(|t| {
            let base = slope * t as f64 + amp * (2.0 * PI * t as f64 / period as f64).sin();
            if noise_std > 0.0 {
                base + noise.sample(&mut rng)
            } else {
                base
            }
        })
        .collect();
    Ok(MultivariateSeries {
        names: vec!["value".into()],
        timestamps: None,
        values: vec![values],
    })
}

/// Default period and look-back for a sampling frequency or dataset name.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Preset {
    pub period: usize,
    pub lookback: usize,
}

pub fn preset(name: &str) -> Option<Preset> {
    let p = |period, lookback| Some(Preset { period, lookback });
    match name.to_ascii_lowercase().as_str() {
        "hourly" | "etth1" | "etth2" | "electricity" | "traffic" => p(24, 336),
        "15min" | "ettm1" | "ettm2" => p(96, 336),
        "10min" | "weather" => p(144, 336),
        // Illness has 966 rows; 336 cannot fit with long horizons.
        "weekly" | "illness" => p(52, 104),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_shapes_and_errors() {
        let s = read_csv("date,a,b\n0,1,2\n1,3,4\n2,5,6\n".as_bytes()).unwrap();
        assert_eq!(s.dims(), 2);
        assert_eq!(s.len(), 3);
        assert_eq!(s.values[1], vec![2.0, 4.0, 6.0]);

        match read_csv("date,a,b\n0,1,2\n1,,4\n".as_bytes()) {
            Err(Error::Parse { row: 3, column: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
        match read_csv("date,a\n0,x\n".as_bytes()) {
            Err(Error::NonNumericCell { row: 2, column: 2, value }) => assert_eq!(value, "x"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn split_boundaries() {
        let s = synth_decaying_sine(100, 24, 1.0, 1.0);
        let sp = chronological_split(&s, &SplitSpec::ETT).unwrap();
        assert_eq!((sp.train.len(), sp.val.len(), sp.test.len()), (60, 20, 20));
        let s = synth_decaying_sine(966, 52, 1.0, 1.0);
        let sp = chronological_split(&s, &SplitSpec::STANDARD).unwrap();
        assert_eq!((sp.train.len(), sp.val.len(), sp.test.len()), (676, 96, 194));
        let bad = SplitSpec {
            train: 0.6,
            val: 0.3,
            test: 0.2,
        };
        assert!(matches!(chronological_split(&s, &bad), Err(Error::Config(_))));
        let s = synth_decaying_sine(2, 24, 1.0, 1.0);
        assert!(matches!(chronological_split(&s, &SplitSpec::ETT), Err(Error::EmptySplit(_))));
    }

    #[test]
    fn windows() {
        assert_eq!(window_count(10, 4, 2, 1), 5);
        let s = MultivariateSeries::new(vec!["a".into()], vec![(0..10).map(f64::from).collect()]).unwrap();
        let ws = WindowSet::new(&s, 4, 2, 1);
        assert_eq!(ws.len(), 5);
        let w = ws.window(ws.refs[0]);
        assert_eq!(w.lookback, vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(w.target.unwrap(), vec![4.0, 5.0]);
    }

    #[test]
    fn standardizer_round_trip() {
        let s = synth_trend_sine(200, 24, 0.01, 1.0, 0.1, 3).unwrap();
        let sp = chronological_split(&s, &SplitSpec::ETT).unwrap();
        let (z, st) = standardize(&sp);
        let m: f64 = z.train.values[0].iter().sum::<f64>() / z.train.len() as f64;
        assert!(m.abs() < 1e-9);
        let back = st.inverse(&z.test);
        for (a, b) in back.values[0].iter().zip(&sp.test.values[0]) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn generators() {
        let s = synth_decaying_sine(200, 24, 2.0, 1.0);
        let x = &s.values[0];
        assert_eq!(x[0], 0.0);
        for t in (6..200).step_by(24) {
            let a = 2.0 - t as f64 / 199.0;
            assert!((x[t] - a).abs() < 1e-12);
        }
        let a = synth_trend_sine(300, 24, 0.005, 1.0, 0.1, 9).unwrap();
        let b = synth_trend_sine(300, 24, 0.005, 1.0, 0.1, 9).unwrap();
        assert_eq!(a, b);
        let ramp = synth_trend_sine(10, 24, 0.5, 0.0, 0.0, 0).unwrap();
        assert_eq!(ramp.values[0][4], 2.0);
    }

    #[test]
    fn presets() {
        assert_eq!(preset("ETTh1").unwrap().period, 24);
        assert_eq!(preset("illness").unwrap().lookback, 104);
        assert!(preset("unknown").is_none());
    }
}
