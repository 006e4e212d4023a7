//! Dataset construction: AR(p) simulation, CSV ingestion, sliding-window
//! pair extraction, chronological splits, and normalization.

use crate::error::{Result, SigflowError};
use crate::signature::Stream;
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// Sliding-window geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub input_len: usize,
    pub output_len: usize,
    pub stride: usize,
}

impl WindowSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_len == 0 || self.output_len == 0 || self.stride == 0 {
            return Err(SigflowError::Config(
                "window lengths and stride must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Training-set normalization statistics (mean/std of training input values).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn invert(&self, v: f64) -> f64 {
        v * self.std + self.mean
    }
}

/// Windowed (x, y) pairs with split tags and normalization stats.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<(Stream, Stream)>,
    pub val: Vec<(Stream, Stream)>,
    pub test: Vec<(Stream, Stream)>,
    pub norm: NormStats,
}

/// Simulate a stationary AR(p) process with unit-spaced timestamps.
pub fn simulate_ar(
    coeffs: &[f64],
    noise_std: f64,
    length: usize,
    burn_in: usize,
    seed: u64,
) -> Result<Stream> {
    if coeffs.is_empty() {
        return Err(SigflowError::Config("AR needs at least one coefficient".into()));
    }
    if !is_stationary(coeffs) {
        return Err(SigflowError::Config(
            "AR coefficients are non-stationary (companion spectral radius >= 1)".into(),
        ));
    }
    if length < 2 {
        return Err(SigflowError::Config("series length must be >= 2".into()));
    }
    let p = coeffs.len();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut history = vec![0.0f64; p];
    let mut out = Vec::with_capacity(length);
    for t in 0..burn_in + length {
        let mut x = 0.0;
        for (i, &phi) in coeffs.iter().enumerate() {
            x += phi * history[i];
        }
        let eps: f64 = rng.sample(StandardNormal);
        x += noise_std * eps;
        history.rotate_right(1);
        history[0] = x;
        if t >= burn_in {
            out.push(x);
        }
    }
    let timestamps = (0..length).map(|i| i as f64).collect();
    Stream::new(timestamps, out.into_iter().map(|v| vec![v]).collect())
}

/// Stationarity check via the companion-matrix spectral radius (power
/// iteration on the companion matrix is avoided: we check the roots of the
/// characteristic polynomial by evaluating the companion matrix's
/// eigenvalues with nalgebra).
fn is_stationary(coeffs: &[f64]) -> bool {
    let p = coeffs.len();
    if coeffs.iter().all(|&c| c == 0.0) {
        return true;
    }
    let mut m = nalgebra::DMatrix::<f64>::zeros(p, p);
    for (j, &c) in coeffs.iter().enumerate() {
        m[(0, j)] = c;
    }
    for i in 1..p {
        m[(i, i - 1)] = 1.0;
    }
    m.complex_eigenvalues().iter().all(|e| e.norm() < 1.0)
}

/// Parse a `t,v1[,v2,...]` CSV into a Stream. `log_transform` applies ln to
/// every value column (price-style data).
pub fn load_csv(path: &Path, log_transform: bool) -> Result<Stream> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| SigflowError::Data(format!("cannot read {}: {e}", path.display())))?;
    parse_csv(&text, log_transform)
}

pub fn parse_csv(text: &str, log_transform: bool) -> Result<Stream> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| SigflowError::Data("empty CSV file".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 2 || cols[0].trim() != "t" {
        return Err(SigflowError::Data(
            "CSV header must be `t,v1[,v2,...]`".into(),
        ));
    }
    let n_channels = cols.len() - 1;
    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    for (lineno, line) in lines {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != cols.len() {
            return Err(SigflowError::Data(format!(
                "row {} has {} cells, expected {}",
                lineno + 1,
                cells.len(),
                cols.len()
            )));
        }
        let mut parsed = Vec::with_capacity(cells.len());
        for (col, cell) in cells.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| {
                SigflowError::Data(format!(
                    "non-numeric cell at row {}, column {}",
                    lineno + 1,
                    col + 1
                ))
            })?;
            parsed.push(v);
        }
        if let Some(&last) = timestamps.last() {
            if parsed[0] <= last {
                return Err(SigflowError::Data(format!(
                    "non-increasing timestamp at row {}",
                    lineno + 1
                )));
            }
        }
        timestamps.push(parsed[0]);
        let mut row = parsed[1..].to_vec();
        if log_transform {
            for v in row.iter_mut() {
                if *v <= 0.0 {
                    return Err(SigflowError::Data(format!(
                        "log transform needs positive values (row {})",
                        lineno + 1
                    )));
                }
                *v = v.ln();
            }
        }
        values.push(row);
    }
    if values.is_empty() {
        return Err(SigflowError::Data("CSV has no data rows".into()));
    }
    if values[0].len() != n_channels {
        return Err(SigflowError::Data("inconsistent channel count".into()));
    }
    Stream::new(timestamps, values)
}

/// Write a stream as `t,v1[,v2,...]` CSV with full float precision.
pub fn write_csv(s: &Stream, w: &mut impl Write) -> Result<()> {
    let c = s.channels();
    let header: Vec<String> = std::iter::once("t".to_string())
        .chain((1..=c).map(|j| format!("v{j}")))
        .collect();
    writeln!(w, "{}", header.join(","))?;
    for (t, row) in s.timestamps().iter().zip(s.values()) {
        let mut cells = vec![format_float(*t)];
        cells.extend(row.iter().map(|v| format_float(*v)));
        writeln!(w, "{}", cells.join(","))?;
    }
    Ok(())
}

/// Shortest representation that round-trips the f64 exactly.
pub fn format_float(v: f64) -> String {
    let mut buf = ryu_style(v);
    if !buf.contains('.') && !buf.contains('e') && !buf.contains("inf") && !buf.contains("NaN") {
        buf.push_str(".0");
    }
    buf
}

fn ryu_style(v: f64) -> String {
    // Rust's Display for f64 already prints the shortest round-trip form
    format!("{v}")
}

/// Mean per fixed-width time bucket, for high-frequency pre-aggregation.
pub fn aggregate_buckets(s: &Stream, bucket_width: f64) -> Result<Stream> {
    if bucket_width <= 0.0 {
        return Err(SigflowError::Config("bucket width must be positive".into()));
    }
    let c = s.channels();
    let t0 = s.timestamps()[0];
    let mut timestamps = Vec::new();
    let mut values: Vec<Vec<f64>> = Vec::new();
    let mut bucket = 0usize;
    let mut acc = vec![0.0f64; c];
    let mut count = 0usize;
    for (t, row) in s.timestamps().iter().zip(s.values()) {
        let b = ((t - t0) / bucket_width).floor() as usize;
        if b != bucket && count > 0 {
            timestamps.push(t0 + (bucket as f64 + 0.5) * bucket_width);
            values.push(acc.iter().map(|v| v / count as f64).collect());
            acc = vec![0.0; c];
            count = 0;
        }
        bucket = b;
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v;
        }
        count += 1;
    }
    if count > 0 {
        timestamps.push(t0 + (bucket as f64 + 0.5) * bucket_width);
        values.push(acc.iter().map(|v| v / count as f64).collect());
    }
    Stream::new(timestamps, values)
}

/// Extract overlapping (x, y) windows: x covers [i, i+L_x), y covers
/// [i+L_x, i+L_x+L_y), stepping by the stride.
pub fn make_windows(s: &Stream, spec: &WindowSpec) -> Result<Vec<(Stream, Stream)>> {
    spec.validate()?;
    let need = spec.input_len + spec.output_len;
    if s.len() < need {
        return Err(SigflowError::Data(format!(
            "stream length {} is shorter than input+output window ({need})",
            s.len()
        )));
    }
    let mut pairs = Vec::new();
    let mut start = 0usize;
    while start + need <= s.len() {
        let x = slice_stream(s, start, spec.input_len)?;
        let y = slice_stream(s, start + spec.input_len, spec.output_len)?;
        pairs.push((x, y));
        start += spec.stride;
    }
    Ok(pairs)
}

fn slice_stream(s: &Stream, start: usize, len: usize) -> Result<Stream> {
    Stream::new(
        s.timestamps()[start..start + len].to_vec(),
        s.values()[start..start + len].to_vec(),
    )
}

/// Split pairs into train/val/test and normalize every value with the mean
/// and std of the training inputs. With `chronological` set, the split
/// follows window start times (test strictly after train/val).
pub fn split_and_normalize(
    pairs: &[(Stream, Stream)],
    fractions: (f64, f64, f64),
    chronological: bool,
) -> Result<Dataset> {
    let (ft, fv, fs) = fractions;
    if ft <= 0.0 || fv < 0.0 || fs < 0.0 || (ft + fv + fs - 1.0).abs() > 1e-9 {
        return Err(SigflowError::Config(
            "split fractions must be non-negative, train > 0, and sum to 1".into(),
        ));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    if chronological {
        order.sort_by(|&a, &b| {
            pairs[a].0.timestamps()[0]
                .partial_cmp(&pairs[b].0.timestamps()[0])
                .unwrap()
        });
    }
    let n = pairs.len();
    let n_train = (ft * n as f64).round() as usize;
    let n_val = (fv * n as f64).round() as usize;
    let n_train = n_train.min(n);
    let n_val = n_val.min(n - n_train);
    if n_train == 0 || (fv > 0.0 && n_val == 0) || (fs > 0.0 && n - n_train - n_val == 0) {
        return Err(SigflowError::Data(
            "a requested split received zero pairs".into(),
        ));
    }
    let pick = |idx: &[usize]| -> Vec<(Stream, Stream)> {
        idx.iter().map(|&i| pairs[i].clone()).collect()
    };
    let train = pick(&order[..n_train]);
    let val = pick(&order[n_train..n_train + n_val]);
    let test = pick(&order[n_train + n_val..]);

    // stats from training x-values only
    let mut sum = 0.0;
    let mut count = 0usize;
    for (x, _) in &train {
        for row in x.values() {
            for v in row {
                sum += v;
                count += 1;
            }
        }
    }
    let mean = sum / count as f64;
    let mut ss = 0.0;
    for (x, _) in &train {
        for row in x.values() {
            for v in row {
                ss += (v - mean) * (v - mean);
            }
        }
    }
    let mut std = (ss / count as f64).sqrt();
    if std < 1e-12 {
        std = 1.0;
    }
    let norm = NormStats { mean, std };
    let apply = |set: Vec<(Stream, Stream)>| -> Result<Vec<(Stream, Stream)>> {
        set.into_iter()
            .map(|(x, y)| Ok((normalize_stream(&x, &norm)?, normalize_stream(&y, &norm)?)))
            .collect()
    };
    Ok(Dataset {
        train: apply(train)?,
        val: apply(val)?,
        test: apply(test)?,
        norm,
    })
}

pub fn normalize_stream(s: &Stream, norm: &NormStats) -> Result<Stream> {
    Stream::new(
        s.timestamps().to_vec(),
        s.values()
            .iter()
            .map(|row| row.iter().map(|&v| norm.apply(v)).collect())
            .collect(),
    )
}
