//! Streams (timestamped multichannel piecewise-linear paths), the stream
//! transformations applied before taking signatures, and truncated signature
//! computation by chaining segment exponentials with the tensor product.

use crate::error::{Result, SigflowError};
use crate::tensoralg::{tensor_exp, TruncTensor};

/// A timestamped multichannel time series, identified with its
/// piecewise-linear interpolant.
#[derive(Debug, Clone, PartialEq)]
pub struct Stream {
    timestamps: Vec<f64>,
    /// Row-per-observation value matrix, L x c.
    values: Vec<Vec<f64>>,
}

impl Stream {
    pub fn new(timestamps: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self> {
        if timestamps.is_empty() || timestamps.len() != values.len() {
            return Err(SigflowError::Data(format!(
                "stream needs matching non-empty timestamps ({}) and rows ({})",
                timestamps.len(),
                values.len()
            )));
        }
        let c = values[0].len();
        if c == 0 {
            return Err(SigflowError::Data("stream needs at least one channel".into()));
        }
        for w in timestamps.windows(2) {
            if !(w[1] > w[0]) {
                return Err(SigflowError::Data(format!(
                    "timestamps must be strictly increasing, got {} then {}",
                    w[0], w[1]
                )));
            }
        }
        for (i, row) in values.iter().enumerate() {
            if row.len() != c {
                return Err(SigflowError::Data(format!(
                    "row {i} has {} channels, expected {c}",
                    row.len()
                )));
            }
            if !row.iter().all(|v| v.is_finite()) || !timestamps[i].is_finite() {
                return Err(SigflowError::Data(format!("non-finite value in row {i}")));
            }
        }
        Ok(Stream { timestamps, values })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.values[0].len()
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    /// Shift timestamps so the stream starts at time 0. Feature extraction
    /// rebases every window so signatures do not depend on where a window
    /// sits in the source series.
    pub fn rebase_time(&self) -> Stream {
        let t0 = self.timestamps[0];
        Stream {
            timestamps: self.timestamps.iter().map(|t| t - t0).collect(),
            values: self.values.clone(),
        }
    }

    /// Concatenation of two streams sharing an endpoint, used by the Chen
    /// identity tests.
    pub fn concat(&self, other: &Stream) -> Result<Stream> {
        let mut ts = self.timestamps.clone();
        let mut vals = self.values.clone();
        ts.extend_from_slice(&other.timestamps[1..]);
        vals.extend_from_slice(&other.values[1..]);
        Stream::new(ts, vals)
    }
}

/// Stream transformation flags. Applied in a fixed order:
/// cumulative sum, then time, then basepoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentOptions {
    pub basepoint: bool,
    pub time: bool,
    pub cumsum: bool,
}

impl AugmentOptions {
    pub fn all() -> Self {
        AugmentOptions {
            basepoint: true,
            time: true,
            cumsum: true,
        }
    }

    pub fn none() -> Self {
        AugmentOptions {
            basepoint: false,
            time: false,
            cumsum: false,
        }
    }

    /// Channel count after augmenting a c-channel stream.
    pub fn augmented_channels(&self, c: usize) -> usize {
        c * (1 + self.cumsum as usize) + self.time as usize
    }
}

/// Apply the configured stream transformations:
/// (1) cumsum appends, per original channel, its running sum;
/// (2) time appends the timestamps as a channel;
/// (3) basepoint prepends an all-zero observation at t0 - dt.
pub fn augment(s: &Stream, opts: AugmentOptions) -> Stream {
    if opts == AugmentOptions::none() {
        return s.clone();
    }
    let c = s.channels();
    let l = s.len();
    let mut values: Vec<Vec<f64>> = Vec::with_capacity(l + opts.basepoint as usize);
    let mut timestamps = Vec::with_capacity(l + opts.basepoint as usize);

    let mut running = vec![0.0f64; c];
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(l);
    for (i, row) in s.values.iter().enumerate() {
        let mut out = row.clone();
        if opts.cumsum {
            for j in 0..c {
                running[j] += row[j];
                out.push(running[j]);
            }
        }
        if opts.time {
            out.push(s.timestamps[i]);
        }
        rows.push(out);
    }

    if opts.basepoint {
        let dt = if l >= 2 {
            s.timestamps[1] - s.timestamps[0]
        } else {
            1.0
        };
        timestamps.push(s.timestamps[0] - dt);
        values.push(vec![0.0; rows[0].len()]);
    }
    timestamps.extend_from_slice(&s.timestamps);
    values.extend(rows);

    Stream { timestamps, values }
}

/// Gradient of `augment` with respect to the original stream values:
/// routes cotangents on the augmented value matrix back onto the
/// un-augmented L x c matrix. The time channel and the basepoint row carry
/// no gradient.
pub fn augment_backward(grad_aug: &[Vec<f64>], opts: AugmentOptions, c: usize) -> Vec<Vec<f64>> {
    let skip = opts.basepoint as usize;
    let l = grad_aug.len() - skip;
    let mut grad = vec![vec![0.0f64; c]; l];
    for i in 0..l {
        let g = &grad_aug[i + skip];
        for j in 0..c {
            grad[i][j] += g[j];
        }
    }
    if opts.cumsum {
        // cumsum channel c+j at row t depends on original rows 0..=t
        let mut suffix = vec![0.0f64; c];
        for i in (0..l).rev() {
            let g = &grad_aug[i + skip];
            for j in 0..c {
                suffix[j] += g[c + j];
                grad[i][j] += suffix[j];
            }
        }
    }
    grad
}

/// Truncated signature of the piecewise-linear interpolation of `s`: the
/// left-to-right tensor product of segment exponentials.
pub fn signature(s: &Stream, depth: usize) -> Result<TruncTensor> {
    if s.len() < 2 {
        return Err(SigflowError::Data(
            "signature needs a stream with at least 2 points".into(),
        ));
    }
    let d = s.channels();
    let mut sig = TruncTensor::unit(d, depth);
    for w in s.values.windows(2) {
        let delta: Vec<f64> = w[1].iter().zip(&w[0]).map(|(b, a)| b - a).collect();
        sig = sig.tensor_product(&tensor_exp(&delta, depth))?;
    }
    Ok(sig)
}

/// Elementwise signatures; errors carry the offending item index.
pub fn batch_signature(streams: &[Stream], depth: usize) -> Result<Vec<TruncTensor>> {
    streams
        .iter()
        .enumerate()
        .map(|(i, s)| {
            signature(s, depth)
                .map_err(|e| SigflowError::Data(format!("stream {i}: {e}")))
        })
        .collect()
}

/// Forward signature evaluation that also records what the backward pass
/// needs: per-segment increments, segment exponentials, and the running
/// prefix products.
pub struct SignatureTape {
    depth: usize,
    channels: usize,
    increments: Vec<Vec<f64>>,
    exps: Vec<TruncTensor>,
    /// prefixes[i] is the product of segment exponentials 0..i (so
    /// prefixes[0] is the unit and prefixes[m] the full signature).
    prefixes: Vec<TruncTensor>,
}

pub fn signature_with_tape(values: &[Vec<f64>], depth: usize) -> Result<(TruncTensor, SignatureTape)> {
    if values.len() < 2 {
        return Err(SigflowError::Data(
            "signature needs at least 2 points".into(),
        ));
    }
    let d = values[0].len();
    let mut prefixes = vec![TruncTensor::unit(d, depth)];
    let mut exps = Vec::new();
    let mut increments = Vec::new();
    for w in values.windows(2) {
        let delta: Vec<f64> = w[1].iter().zip(&w[0]).map(|(b, a)| b - a).collect();
        let e = tensor_exp(&delta, depth);
        let next = prefixes.last().unwrap().tensor_product(&e)?;
        prefixes.push(next);
        exps.push(e);
        increments.push(delta);
    }
    let sig = prefixes.last().unwrap().clone();
    let tape = SignatureTape {
        depth,
        channels: d,
        increments,
        exps,
        prefixes,
    };
    Ok((sig, tape))
}

impl SignatureTape {
    /// Given a cotangent on the full signature coefficient vector, return the
    /// gradient with respect to the stream value matrix (L x c rows).
    pub fn backward(&self, sig_cotangent: &[f64]) -> Vec<Vec<f64>> {
        let d = self.channels;
        let n = self.depth;
        let m = self.increments.len();
        let mut dsig =
            TruncTensor::from_data(d, n, sig_cotangent.to_vec()).expect("cotangent shape");
        let mut grad_values = vec![vec![0.0f64; d]; m + 1];
        for i in (0..m).rev() {
            let (dprefix, dexp) = product_backward(&self.prefixes[i], &self.exps[i], &dsig);
            let dv = exp_backward(&self.increments[i], &self.exps[i], &dexp);
            for j in 0..d {
                grad_values[i + 1][j] += dv[j];
                grad_values[i][j] -= dv[j];
            }
            dsig = dprefix;
        }
        grad_values
    }
}

/// Reverse-mode step through c = a (x) b: returns (da, db) given dc.
fn product_backward(a: &TruncTensor, b: &TruncTensor, dc: &TruncTensor) -> (TruncTensor, TruncTensor) {
    let d = a.channels();
    let n = a.depth();
    let mut da = TruncTensor::zero(d, n);
    let mut db = TruncTensor::zero(d, n);
    for k in 0..=n {
        let dck = dc.level(k);
        for i in 0..=k {
            let j = k - i;
            let av = a.level(i);
            let bv = b.level(j);
            let nb = bv.len();
            let dai = da.level_mut(i);
            for (u, dau) in dai.iter_mut().enumerate() {
                let base = u * nb;
                let mut acc = 0.0;
                for (v, &bvv) in bv.iter().enumerate() {
                    acc += dck[base + v] * bvv;
                }
                *dau += acc;
            }
            let dbj = db.level_mut(j);
            for (u, &avu) in av.iter().enumerate() {
                if avu == 0.0 {
                    continue;
                }
                let base = u * nb;
                for (v, dbv) in dbj.iter_mut().enumerate() {
                    *dbv += dck[base + v] * avu;
                }
            }
        }
    }
    (da, db)
}

/// Reverse-mode step through e = tensor_exp(v): returns dv given de.
/// Uses the forward recurrence e_k = (e_{k-1} (x) v) / k, accumulating the
/// cotangent down the levels.
fn exp_backward(v: &[f64], e: &TruncTensor, de: &TruncTensor) -> Vec<f64> {
    let d = v.len();
    let n = e.depth();
    let mut dv = vec![0.0f64; d];
    let mut dek: Vec<f64> = de.level(n).to_vec();
    for k in (1..=n).rev() {
        let prev = e.level(k - 1);
        let inv_k = 1.0 / k as f64;
        let mut dprev = vec![0.0f64; prev.len()];
        for (u, &pu) in prev.iter().enumerate() {
            let base = u * d;
            for (r, &vr) in v.iter().enumerate() {
                let g = dek[base + r] * inv_k;
                dprev[u] += g * vr;
                dv[r] += g * pu;
            }
        }
        for (x, g) in dprev.iter_mut().zip(de.level(k - 1)) {
            *x += g;
        }
        dek = dprev;
    }
    dv
}

#[cfg(test)]
pub mod tests_support {
    use crate::tensoralg::{dimension, TruncTensor};

    /// Independent oracle: iterated Riemann-Stieltjes integrals of the
    /// piecewise-linear interpolant, computed level by level on a fine
    /// uniform grid. O(grid * dim) per level via the recursive definition
    /// I_k(t) = int_0^t I_{k-1}(s) (x) dx_s.
    pub fn quadrature_signature(values: &[Vec<f64>], depth: usize, substeps: usize) -> TruncTensor {
        let d = values[0].len();
        let segs = values.len() - 1;
        let total = segs * substeps;
        // current integrals, flat per-level storage
        let mut cur = vec![0.0f64; dimension(d, depth)];
        cur[0] = 1.0;
        let mut offsets = vec![0usize];
        for k in 1..=depth {
            offsets.push(offsets[k - 1] + d.pow((k - 1) as u32));
        }
        // integrate with the midpoint rule over each sub-interval
        let mut prev_state = cur.clone();
        for step in 0..total {
            let seg = step / substeps;
            let dx: Vec<f64> = (0..d)
                .map(|j| (values[seg + 1][j] - values[seg][j]) / substeps as f64)
                .collect();
            let mut next = prev_state.clone();
            for k in 1..=depth {
                let lower_off = offsets[k - 1];
                let lower_len = d.pow((k - 1) as u32);
                let off = offsets[k];
                for u in 0..lower_len {
                    // midpoint value of the lower integral over this sub-interval
                    for (r, &dxr) in dx.iter().enumerate() {
                        // trapezoid in the lower integrand
                        let mid = prev_state[lower_off + u]
                            + 0.5 * (next[lower_off + u] - prev_state[lower_off + u]);
                        next[off + u * d + r] += mid * dxr;
                    }
                }
            }
            prev_state = next;
        }
        TruncTensor::from_data(d, depth, prev_state).unwrap()
    }
}
