//! Evaluation metric battery: classification error (AUC/accuracy),
//! higher-order Sig-W1, unordered Wasserstein-1 statistics, and the
//! extreme-values AUC.

use crate::cnsde::{generate, mix_seed};
use crate::error::{Result, SigflowError};
use crate::signature::Stream;
use crate::sigmetric::{
    expected_signature, fit_cond_expsig, predict_cond_expsig, raw_features, FeatureScaler,
};
use crate::training::Checkpoint;
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use std::fmt::Write as _;

/// Exact 1-D empirical Wasserstein-1 distance. Equal sizes reduce to the
/// mean absolute difference of sorted order statistics; unequal sizes use
/// the quantile-function integral on the merged probability grid.
pub fn w1_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(SigflowError::Data("w1_1d needs non-empty samples".into()));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(|x, y| x.partial_cmp(y).unwrap());
    sb.sort_by(|x, y| x.partial_cmp(y).unwrap());
    if sa.len() == sb.len() {
        let n = sa.len() as f64;
        return Ok(sa.iter().zip(&sb).map(|(x, y)| (x - y).abs()).sum::<f64>() / n);
    }
    // merged breakpoints of both empirical inverse CDFs
    let (n, m) = (sa.len(), sb.len());
    let mut cuts: Vec<f64> = (1..n).map(|k| k as f64 / n as f64).collect();
    cuts.extend((1..m).map(|k| k as f64 / m as f64));
    cuts.push(1.0);
    cuts.sort_by(|x, y| x.partial_cmp(y).unwrap());
    cuts.dedup();
    let mut total = 0.0;
    let mut prev = 0.0;
    for &u in &cuts {
        // on (prev, u] both inverse CDFs are constant
        let mid = 0.5 * (prev + u);
        let qa = sa[((mid * n as f64).ceil() as usize - 1).min(n - 1)];
        let qb = sb[((mid * m as f64).ceil() as usize - 1).min(m - 1)];
        total += (qa - qb).abs() * (u - prev);
        prev = u;
    }
    Ok(total)
}

/// p-th percentile by linear interpolation between order statistics.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(SigflowError::Data("percentile of an empty set".into()));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(SigflowError::Config("percentile must be in [0, 100]".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let rank = p / 100.0 * (v.len() as f64 - 1.0);
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    Ok(v[lo] * (1.0 - frac) + v[hi] * frac)
}

/// Area under the ROC curve via the Mann–Whitney rank statistic; tied
/// scores contribute one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(SigflowError::Shape("auc length mismatch".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(SigflowError::Data(
            "auc is undefined for single-class labels".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].partial_cmp(&scores[j]).unwrap());
    // midranks over tie groups
    let mut ranks = vec![0.0f64; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = midrank;
        }
        i = j + 1;
    }
    let rank_sum: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(r, _)| r)
        .sum();
    Ok((rank_sum - n_pos as f64 * (n_pos as f64 + 1.0) / 2.0) / (n_pos as f64 * n_neg as f64))
}

/// The four unordered-W1 pooling rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum W1Variant {
    /// (a) pooled output values y_t
    PooledValues,
    /// (b) pooled increments y_t - x_T
    PooledIncrements,
    /// (c) one value per stream: max_t (y_t - x_T)
    MaxIncrement,
    /// (d) one value per stream: min_t (y_t - x_T)
    MinIncrement,
}

impl W1Variant {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "a" => W1Variant::PooledValues,
            "b" => W1Variant::PooledIncrements,
            "c" => W1Variant::MaxIncrement,
            "d" => W1Variant::MinIncrement,
            other => {
                return Err(SigflowError::Config(format!(
                    "unknown unordered-W1 variant `{other}` (expected a|b|c|d)"
                )))
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            W1Variant::PooledValues => "a",
            W1Variant::PooledIncrements => "b",
            W1Variant::MaxIncrement => "c",
            W1Variant::MinIncrement => "d",
        }
    }
}

/// Scalar pool for one (x, y) stream pair under a pooling rule. Increment
/// variants compare each output value against the last input value of the
/// matching channel.
pub fn pool_pair(x: &Stream, y: &Stream, variant: W1Variant) -> Result<Vec<f64>> {
    if variant != W1Variant::PooledValues && y.channels() != x.channels() {
        return Err(SigflowError::Shape(format!(
            "increment pools need matching channel counts (x has {}, y has {})",
            x.channels(),
            y.channels()
        )));
    }
    let x_last = x.values().last().unwrap();
    let diffs = || {
        y.values()
            .iter()
            .flat_map(|row| row.iter().zip(x_last).map(|(v, l)| v - l))
    };
    Ok(match variant {
        W1Variant::PooledValues => y.values().iter().flatten().copied().collect(),
        W1Variant::PooledIncrements => diffs().collect(),
        W1Variant::MaxIncrement => vec![diffs().fold(f64::NEG_INFINITY, f64::max)],
        W1Variant::MinIncrement => vec![diffs().fold(f64::INFINITY, f64::min)],
    })
}

/// Unordered W1 between real output streams and generated samples.
/// `generated[i]` holds the samples conditioned on `real[i].0`.
pub fn unordered_w1(
    real: &[(Stream, Stream)],
    generated: &[Vec<Stream>],
    variant: W1Variant,
) -> Result<f64> {
    if real.is_empty() || real.len() != generated.len() {
        return Err(SigflowError::Data(
            "unordered_w1 needs one generated sample set per real pair".into(),
        ));
    }
    let mut real_pool = Vec::new();
    let mut gen_pool = Vec::new();
    for ((x, y), samples) in real.iter().zip(generated) {
        if samples.is_empty() {
            return Err(SigflowError::Data(
                "unordered_w1 needs at least one generated sample per pair".into(),
            ));
        }
        real_pool.extend(pool_pair(x, y, variant)?);
        for g in samples {
            gen_pool.extend(pool_pair(x, g, variant)?);
        }
    }
    w1_1d(&real_pool, &gen_pool)
}

fn generate_for(ckpt: &Checkpoint, x: &Stream, n: usize, seed: u64) -> Result<Vec<Stream>> {
    generate(
        x,
        &ckpt.params,
        &ckpt.gen_config,
        &ckpt.model.in_scaler,
        n,
        seed,
    )
}

/// One generated sample set per real pair, with per-pair seed substreams.
pub fn generate_per_pair(
    ckpt: &Checkpoint,
    real: &[(Stream, Stream)],
    m: usize,
    seed: u64,
) -> Result<Vec<Vec<Stream>>> {
    real.iter()
        .enumerate()
        .map(|(i, (x, _))| generate_for(ckpt, x, m, mix_seed(seed, i as u64)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifierOutcome {
    pub auc: f64,
    pub accuracy: f64,
}

/// Train-and-test a logistic classifier on signature features of (x, y)
/// pairs, real against generated, and report held-out AUC and accuracy.
/// Lower AUC means the generator is harder to distinguish from the data.
pub fn classification_metric(
    real: &[(Stream, Stream)],
    ckpt: &Checkpoint,
    depth_x: usize,
    depth_y: usize,
    train_fraction: f64,
    seed: u64,
) -> Result<ClassifierOutcome> {
    if !(0.0..1.0).contains(&train_fraction) || train_fraction == 0.0 {
        return Err(SigflowError::Config(
            "classifier train fraction must be in (0, 1)".into(),
        ));
    }
    let opts = ckpt.gen_config.augment_options();
    let mut rows: Vec<(Vec<f64>, bool)> = Vec::with_capacity(2 * real.len());
    for (i, (x, y)) in real.iter().enumerate() {
        let xf = raw_features(x, depth_x, opts)?;
        let mut real_row = xf.clone();
        real_row.extend(raw_features(y, depth_y, opts)?);
        rows.push((real_row, true));
        let g = &generate_for(ckpt, x, 1, mix_seed(seed, i as u64))?[0];
        let mut gen_row = xf;
        gen_row.extend(raw_features(g, depth_y, opts)?);
        rows.push((gen_row, false));
    }
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(mix_seed(seed, 0xC1A55));
    order.shuffle(&mut rng);
    let n_train = ((rows.len() as f64 * train_fraction).round() as usize).clamp(2, rows.len() - 2);
    let (train_idx, test_idx) = order.split_at(n_train);
    if !train_idx.iter().any(|&i| rows[i].1) || !train_idx.iter().any(|&i| !rows[i].1) {
        return Err(SigflowError::Data(
            "classifier training split lacks one of the classes".into(),
        ));
    }

    let train_rows: Vec<Vec<f64>> = train_idx.iter().map(|&i| rows[i].0.clone()).collect();
    let scaler = FeatureScaler::fit(&train_rows)?;
    let p = train_rows[0].len();
    let mut w = vec![0.0f64; p];
    let mut b = 0.0f64;
    let lr = 0.5;
    let sigmoid = |t: f64| 1.0 / (1.0 + (-t).exp());
    for _ in 0..300 {
        let mut gw = vec![0.0f64; p];
        let mut gb = 0.0;
        for &i in train_idx {
            let f = scaler.transform(&rows[i].0);
            let z = b + w.iter().zip(&f).map(|(a, v)| a * v).sum::<f64>();
            let err = sigmoid(z) - rows[i].1 as u8 as f64;
            for (g, v) in gw.iter_mut().zip(&f) {
                *g += err * v;
            }
            gb += err;
        }
        let inv = 1.0 / train_idx.len() as f64;
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= lr * g * inv;
        }
        b -= lr * gb * inv;
    }

    let mut scores = Vec::with_capacity(test_idx.len());
    let mut labels = Vec::with_capacity(test_idx.len());
    let mut correct = 0usize;
    for &i in test_idx {
        let f = scaler.transform(&rows[i].0);
        let z = b + w.iter().zip(&f).map(|(a, v)| a * v).sum::<f64>();
        let s = sigmoid(z);
        scores.push(s);
        labels.push(rows[i].1);
        if (s >= 0.5) == rows[i].1 {
            correct += 1;
        }
    }
    Ok(ClassifierOutcome {
        auc: auc(&scores, &labels)?,
        accuracy: correct as f64 / test_idx.len() as f64,
    })
}

/// Higher-order Sig-W1: refit the conditional regression at deeper
/// truncations on a reference split, then compare its prediction against
/// the generator's Montecarlo expected signature on each test x.
#[allow(clippy::too_many_arguments)]
pub fn ho_sigw1_metric(
    reference: &[(Stream, Stream)],
    test: &[(Stream, Stream)],
    ckpt: &Checkpoint,
    depth_in: usize,
    depth_out: usize,
    m: usize,
    lambda: f64,
    seed: u64,
) -> Result<f64> {
    if test.is_empty() {
        return Err(SigflowError::Data("ho_sigw1 needs test pairs".into()));
    }
    let opts = ckpt.gen_config.augment_options();
    let model = fit_cond_expsig(reference, depth_in, depth_out, lambda, opts)?;
    let mut total = 0.0;
    for (i, (x, _)) in test.iter().enumerate() {
        let predicted = predict_cond_expsig(&model, x)?;
        let samples = generate_for(ckpt, x, m, mix_seed(seed, i as u64))?;
        let augmented: Vec<Stream> = samples
            .iter()
            .map(|s| crate::signature::augment(&s.rebase_time(), opts))
            .collect();
        let generated = expected_signature(&augmented, depth_out)?;
        total += predicted.sub(&generated)?.l2_norm();
    }
    Ok(total / test.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExtremeSign {
    Plus,
    Minus,
}

impl ExtremeSign {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "+" | "plus" | "max" => Ok(ExtremeSign::Plus),
            "-" | "minus" | "min" => Ok(ExtremeSign::Minus),
            other => Err(SigflowError::Config(format!(
                "unknown extreme-values sign `{other}`"
            ))),
        }
    }
}

fn extreme_stat(x: &Stream, y: &Stream, sign: ExtremeSign, relative: bool) -> Result<f64> {
    let variant = match sign {
        ExtremeSign::Plus => W1Variant::MaxIncrement,
        ExtremeSign::Minus => W1Variant::MinIncrement,
    };
    let stat = pool_pair(x, y, variant)?[0];
    if relative {
        let x_last = x.values().last().unwrap()[0];
        if x_last == 0.0 {
            return Err(SigflowError::Numerical(
                "relative extreme statistic needs a non-zero last input value".into(),
            ));
        }
        Ok(stat / x_last)
    } else {
        Ok(stat)
    }
}

/// Extreme-values AUC: how well the generator's conditional exceedance
/// frequency ranks which real outputs actually crossed the p-th percentile
/// threshold of the per-stream extreme statistic.
pub fn extreme_values_metric(
    real: &[(Stream, Stream)],
    ckpt: &Checkpoint,
    p: f64,
    m: usize,
    sign: ExtremeSign,
    relative: bool,
    seed: u64,
) -> Result<f64> {
    if !(0.0..100.0).contains(&p) || p == 0.0 {
        return Err(SigflowError::Config("percentile must be in (0, 100)".into()));
    }
    let real_stats: Vec<f64> = real
        .iter()
        .map(|(x, y)| extreme_stat(x, y, sign, relative))
        .collect::<Result<_>>()?;
    let q = percentile(&real_stats, p)?;
    let meets = |s: f64| match sign {
        ExtremeSign::Plus => s >= q,
        ExtremeSign::Minus => s <= q,
    };
    let mut scores = Vec::with_capacity(real.len());
    let mut labels = Vec::with_capacity(real.len());
    for (i, ((x, _), stat)) in real.iter().zip(&real_stats).enumerate() {
        let samples = generate_for(ckpt, x, m, mix_seed(seed, i as u64))?;
        let hits = samples
            .iter()
            .map(|g| extreme_stat(x, g, sign, relative))
            .collect::<Result<Vec<f64>>>()?
            .into_iter()
            .filter(|&s| meets(s))
            .count();
        scores.push(hits as f64 / m as f64);
        labels.push(meets(*stat));
    }
    auc(&scores, &labels).map_err(|_| {
        SigflowError::Data(format!(
            "extreme-values AUC undefined: every real stream is on the same side of the {p}-th percentile"
        ))
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub name: String,
    pub mean: f64,
    pub std: f64,
}

/// Flat metric report: value ± std per metric over evaluation repeats,
/// plus free-form metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub metadata: Vec<(String, String)>,
}

impl MetricReport {
    pub fn push(&mut self, name: &str, values: &[f64]) -> Result<()> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(SigflowError::Numerical(format!(
                "metric {name} produced a non-finite value"
            )));
        }
        let (mean, std) = mean_std(values);
        self.rows.push(MetricRow {
            name: name.to_string(),
            mean,
            std,
        });
        Ok(())
    }

    pub fn add_metadata(&mut self, key: &str, value: impl ToString) {
        self.metadata.push((key.to_string(), value.to_string()));
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.metadata {
            let _ = writeln!(out, "# {k} = {v}");
        }
        for r in &self.rows {
            let _ = writeln!(out, "{}: {} +/- {}", r.name, r.mean, r.std);
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,mean,std\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{}", r.name, r.mean, r.std);
        }
        out
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cnsde::{CnsdeParams, GeneratorConfig};
    use crate::data::{make_windows, simulate_ar, split_and_normalize, Dataset, WindowSpec};
    use crate::training::{train, TrainConfig};
    use rand_chacha::ChaCha8Rng;

    fn tiny_setup() -> (Dataset, Checkpoint) {
        let gc = GeneratorConfig {
            d_x: 1,
            d_y: 1,
            d_z: 4,
            d_w: 4,
            d_v: 2,
            k: 1,
            encoder_depth: 2,
            basepoint: true,
            time: true,
            cumsum: true,
            xi2_width: 3,
            drift_width: 4,
            diffusion_width: 4,
            diffusion_shape: "diagonal".into(),
            output_len: 4,
            solver_steps: 8,
            final_tanh: true,
        };
        let s = simulate_ar(&[0.5], 1.0, 160, 50, 21).unwrap();
        let spec = WindowSpec {
            input_len: 6,
            output_len: 4,
            stride: 2,
        };
        let pairs = make_windows(&s, &spec).unwrap();
        let ds = split_and_normalize(&pairs, (0.6, 0.2, 0.2), true).unwrap();
        let tc = TrainConfig {
            batch_size: 4,
            m: 2,
            m_val: 2,
            validation_period: 1,
            patience: 2,
            max_steps: 1,
            depth_in: 2,
            depth_out: 2,
            ..TrainConfig::default()
        };
        let (ckpt, _) = train(&ds, &tc, &gc, None).unwrap();
        (ds, ckpt)
    }

    fn brute_force_w1(a: &[f64], b: &[f64]) -> f64 {
        // minimum mean |a_i - b_sigma(i)| over all assignments
        fn go(a: &[f64], rem: &mut Vec<f64>, used: u32) -> f64 {
            if a.is_empty() {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for i in 0..rem.len() {
                if used & (1 << i) != 0 {
                    continue;
                }
                let c = (a[0] - rem[i]).abs() + go(&a[1..], rem, used | (1 << i));
                best = best.min(c);
            }
            best
        }
        go(a, &mut b.to_vec(), 0) / a.len() as f64
    }

    #[test]
    fn w1_matches_spec_examples() {
        assert_eq!(w1_1d(&[0.0, 1.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(w1_1d(&[0.0], &[3.0]).unwrap(), 3.0);
        assert_eq!(w1_1d(&[0.0, 2.0], &[1.0, 3.0]).unwrap(), 1.0);
        assert!(w1_1d(&[], &[1.0]).is_err());
    }

    #[test]
    fn w1_matches_optimal_matching_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let n = rng.gen_range(1..=8);
            let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let fast = w1_1d(&a, &b).unwrap();
            let brute = brute_force_w1(&a, &b);
            assert!((fast - brute).abs() < 1e-12, "{fast} vs {brute}");
        }
    }

    #[test]
    fn w1_unequal_sizes_via_quantile_integral() {
        // duplicating a sample leaves the empirical distribution unchanged
        let a = vec![0.0, 1.0, 2.0];
        let aa = vec![0.0, 0.0, 1.0, 1.0, 2.0, 2.0];
        assert!(w1_1d(&a, &aa).unwrap().abs() < 1e-15);
        // {0} vs {0,1}: quantile functions differ on (1/2, 1] by 1
        assert!((w1_1d(&[0.0], &[0.0, 1.0]).unwrap() - 0.5).abs() < 1e-15);
        // symmetry
        let b = vec![0.3, 2.5];
        assert_eq!(w1_1d(&a, &b).unwrap(), w1_1d(&b, &a).unwrap());
    }

    #[test]
    fn w1_is_a_metric() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let n = rng.gen_range(1..=6);
            let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
                (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect()
            };
            let (a, b, c) = (draw(&mut rng), draw(&mut rng), draw(&mut rng));
            let ab = w1_1d(&a, &b).unwrap();
            let bc = w1_1d(&b, &c).unwrap();
            let ac = w1_1d(&a, &c).unwrap();
            assert!(ac <= ab + bc + 1e-12);
            assert_eq!(ab, w1_1d(&b, &a).unwrap());
            assert!(w1_1d(&a, &a).unwrap().abs() < 1e-15);
        }
    }

    #[test]
    fn auc_matches_spec_examples() {
        assert_eq!(
            auc(&[0.0, 0.1, 0.9, 1.0], &[false, false, true, true]).unwrap(),
            1.0
        );
        assert_eq!(auc(&[0.5; 6], &[true, false, true, false, true, false]).unwrap(), 0.5);
        assert_eq!(
            auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap(),
            0.75
        );
        assert!(auc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn auc_matches_concordance_counting() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let n = rng.gen_range(4..20);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..6) as f64 / 5.0).collect();
            let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
            if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
                continue;
            }
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if labels[i] && !labels[j] {
                        den += 1.0;
                        if scores[i] > scores[j] {
                            num += 1.0;
                        } else if scores[i] == scores[j] {
                            num += 0.5;
                        }
                    }
                }
            }
            let expected = num / den;
            assert!((auc(&scores, &labels).unwrap() - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn auc_is_invariant_under_increasing_transforms() {
        let scores = [0.1, 0.7, 0.3, 0.9, 0.5];
        let labels = [false, true, false, true, true];
        let base = auc(&scores, &labels).unwrap();
        let mapped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp()).collect();
        assert_eq!(auc(&mapped, &labels).unwrap(), base);
    }

    #[test]
    fn percentile_interpolates_order_statistics() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile(&v, 0.0).unwrap(), 1.0);
        assert_eq!(percentile(&v, 100.0).unwrap(), 4.0);
        assert_eq!(percentile(&v, 50.0).unwrap(), 2.5);
        assert!((percentile(&v, 25.0).unwrap() - 1.75).abs() < 1e-15);
    }

    fn stream(ts: &[f64], vs: &[f64]) -> Stream {
        Stream::new(ts.to_vec(), vs.iter().map(|&v| vec![v]).collect()).unwrap()
    }

    #[test]
    fn unordered_w1_zero_when_generated_replays_real() {
        let real = vec![
            (stream(&[0.0, 1.0], &[0.5, 0.0]), stream(&[2.0, 3.0, 4.0], &[1.0, 2.0, 0.5])),
            (stream(&[0.0, 1.0], &[0.2, 0.4]), stream(&[2.0, 3.0, 4.0], &[0.1, -1.0, 3.0])),
        ];
        let generated: Vec<Vec<Stream>> = real.iter().map(|(_, y)| vec![y.clone()]).collect();
        for v in ["a", "b", "c", "d"] {
            let variant = W1Variant::parse(v).unwrap();
            assert_eq!(unordered_w1(&real, &generated, variant).unwrap(), 0.0);
        }
    }

    #[test]
    fn variant_b_reduces_to_a_when_last_inputs_are_zero() {
        let real = vec![
            (stream(&[0.0, 1.0], &[0.7, 0.0]), stream(&[2.0, 3.0], &[1.0, -2.0])),
            (stream(&[0.0, 1.0], &[-0.3, 0.0]), stream(&[2.0, 3.0], &[0.5, 0.25])),
        ];
        let generated = vec![
            vec![stream(&[2.0, 3.0], &[2.0, 1.0])],
            vec![stream(&[2.0, 3.0], &[-1.0, 0.0])],
        ];
        let a = unordered_w1(&real, &generated, W1Variant::PooledValues).unwrap();
        let b = unordered_w1(&real, &generated, W1Variant::PooledIncrements).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unordered_w1_matches_hand_computed_pools() {
        // one real pair: x ends at 1, y = (2, 5, 3); one generated (1, 4, 2)
        let real = vec![(stream(&[0.0, 1.0], &[0.0, 1.0]), stream(&[2.0, 3.0, 4.0], &[2.0, 5.0, 3.0]))];
        let generated = vec![vec![stream(&[2.0, 3.0, 4.0], &[1.0, 4.0, 2.0])]];
        // variant a: {2,5,3} vs {1,4,2} sorted diffs all 1
        assert_eq!(unordered_w1(&real, &generated, W1Variant::PooledValues).unwrap(), 1.0);
        // variant b: {1,4,2} vs {0,3,1} → 1
        assert_eq!(unordered_w1(&real, &generated, W1Variant::PooledIncrements).unwrap(), 1.0);
        // variant c: {4} vs {3} → 1; variant d: {1} vs {0} → 1
        assert_eq!(unordered_w1(&real, &generated, W1Variant::MaxIncrement).unwrap(), 1.0);
        assert_eq!(unordered_w1(&real, &generated, W1Variant::MinIncrement).unwrap(), 1.0);
    }

    #[test]
    fn classification_separates_a_constant_generator() {
        let (ds, mut ckpt) = tiny_setup();
        // zero all parameters: the generator emits constant streams
        let zeros = CnsdeParams::zeros_like(&ckpt.gen_config).unwrap();
        ckpt.params = zeros;
        let out = classification_metric(&ds.train, &ckpt, 2, 2, 0.5, 3).unwrap();
        assert!(out.auc >= 0.95, "auc {}", out.auc);
        let again = classification_metric(&ds.train, &ckpt, 2, 2, 0.5, 3).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn ho_sigw1_is_non_negative_and_deterministic() {
        let (ds, ckpt) = tiny_setup();
        let a = ho_sigw1_metric(&ds.train, &ds.test, &ckpt, 3, 2, 4, 1e-3, 7).unwrap();
        let b = ho_sigw1_metric(&ds.train, &ds.test, &ckpt, 3, 2, 4, 1e-3, 7).unwrap();
        assert!(a >= 0.0 && a.is_finite());
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn extreme_values_metric_runs_at_multiple_percentiles() {
        let (ds, ckpt) = tiny_setup();
        // use train split: more pairs, so both classes occur at both percentiles
        for p in [50.0, 95.0] {
            let v = extreme_values_metric(&ds.train, &ckpt, p, 8, ExtremeSign::Plus, false, 5)
                .unwrap();
            assert!((0.0..=1.0).contains(&v));
        }
        let v = extreme_values_metric(&ds.train, &ckpt, 50.0, 8, ExtremeSign::Minus, false, 5)
            .unwrap();
        assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn report_serializes_rows_and_metadata() {
        let mut r = MetricReport::default();
        r.add_metadata("seeds", "1,2,3");
        r.push("w1_a", &[1.0, 2.0, 3.0]).unwrap();
        let text = r.to_text();
        assert!(text.contains("# seeds = 1,2,3"));
        assert!(text.contains("w1_a: 2 +/-"));
        let csv = r.to_csv();
        assert!(csv.starts_with("metric,mean,std\n"));
        assert!(csv.contains("w1_a,2,"));
        assert!(r.push("bad", &[f64::NAN]).is_err());
    }
}
