//! Expected signatures, the closed-form truncated signature-Wasserstein-1
//! metric, and the conditional expected-signature ridge regression.

use crate::error::{Result, SigflowError};
use crate::signature::{augment, signature, AugmentOptions, Stream};
use crate::tensoralg::{dimension, TruncTensor};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Per-coordinate standardization fitted on a feature matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureScaler {
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(SigflowError::Data("cannot fit scaler on no rows".into()));
        }
        let p = rows[0].len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0f64; p];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= n;
        }
        let mut std = vec![0.0f64; p];
        for r in rows {
            for j in 0..p {
                let d = r[j] - mean[j];
                std[j] += d * d;
            }
        }
        for s in std.iter_mut() {
            *s = (*s / n).sqrt();
            // near-constant coordinates pass through unscaled
            if *s < 1e-12 {
                *s = 1.0;
            }
        }
        Ok(FeatureScaler { mean, std })
    }

    pub fn identity(p: usize) -> Self {
        FeatureScaler {
            mean: vec![0.0; p],
            std: vec![1.0; p],
        }
    }

    pub fn transform(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    pub fn inverse_transform(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| v * s + m)
            .collect()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Signature feature vector of a stream: rebase time to 0, apply the
/// configured augmentations, take the truncated signature, drop level 0.
pub fn raw_features(s: &Stream, depth: usize, opts: AugmentOptions) -> Result<Vec<f64>> {
    let aug = augment(&s.rebase_time(), opts);
    Ok(signature(&aug, depth)?.features().to_vec())
}

/// Empirical mean of per-path truncated signatures.
pub fn expected_signature(paths: &[Stream], depth: usize) -> Result<TruncTensor> {
    if paths.is_empty() {
        return Err(SigflowError::Data(
            "expected_signature needs at least one path".into(),
        ));
    }
    let mut acc = signature(&paths[0], depth)?;
    for p in &paths[1..] {
        acc = acc.add(&signature(p, depth)?)?;
    }
    Ok(acc.scale(1.0 / paths.len() as f64))
}

/// Closed-form truncated signature-Wasserstein-1 metric: L2 distance of
/// the two expected signatures over levels 1..N.
pub fn sig_w1(mu_hat: &TruncTensor, nu_hat: &TruncTensor) -> Result<f64> {
    Ok(mu_hat.sub(nu_hat)?.l2_norm())
}

/// Fitted linear map from input-signature features to the conditional
/// expected output signature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondExpSigModel {
    /// out_dim x in_dim, row-major.
    pub w: Vec<f64>,
    pub intercept: Vec<f64>,
    pub in_scaler: FeatureScaler,
    pub depth_in: usize,
    pub depth_out: usize,
    /// channel counts of the conditioning / target streams before augmentation
    pub channels_in: usize,
    pub channels_out: usize,
    pub lambda: f64,
    #[serde(with = "augment_serde")]
    pub augment: AugmentOptions,
}

mod augment_serde {
    use crate::signature::AugmentOptions;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(o: &AugmentOptions, s: S) -> Result<S::Ok, S::Error> {
        [o.basepoint, o.time, o.cumsum].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<AugmentOptions, D::Error> {
        let [basepoint, time, cumsum] = <[bool; 3]>::deserialize(d)?;
        Ok(AugmentOptions {
            basepoint,
            time,
            cumsum,
        })
    }
}

impl CondExpSigModel {
    pub fn in_dim(&self) -> usize {
        dimension(self.augment.augmented_channels(self.channels_in), self.depth_in) - 1
    }

    pub fn out_dim(&self) -> usize {
        dimension(self.augment.augmented_channels(self.channels_out), self.depth_out) - 1
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.w.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Fit the conditional expected-signature regression by ridge least squares.
/// Features are standardized; targets are left on the expected-signature
/// scale. The intercept column is exempt from the penalty.
pub fn fit_cond_expsig(
    pairs: &[(Stream, Stream)],
    depth_in: usize,
    depth_out: usize,
    lambda: f64,
    opts: AugmentOptions,
) -> Result<CondExpSigModel> {
    if pairs.len() < 2 {
        return Err(SigflowError::Data(
            "conditional regression needs at least 2 pairs".into(),
        ));
    }
    if lambda < 0.0 {
        return Err(SigflowError::Config("ridge strength must be >= 0".into()));
    }
    let channels_in = pairs[0].0.channels();
    let channels_out = pairs[0].1.channels();
    let raw: Vec<Vec<f64>> = pairs
        .iter()
        .map(|(x, _)| raw_features(x, depth_in, opts))
        .collect::<Result<_>>()?;
    let targets: Vec<Vec<f64>> = pairs
        .iter()
        .map(|(_, y)| raw_features(y, depth_out, opts))
        .collect::<Result<_>>()?;
    let in_scaler = FeatureScaler::fit(&raw)?;
    let feats: Vec<Vec<f64>> = raw.iter().map(|r| in_scaler.transform(r)).collect();

    let n = pairs.len();
    let p = feats[0].len();
    let q = targets[0].len();
    // design matrix with a trailing intercept column of ones
    // mean-normalized normal equations: invariant to duplicating the data
    let xa = DMatrix::from_fn(n, p + 1, |i, j| if j < p { feats[i][j] } else { 1.0 });
    let y = DMatrix::from_fn(n, q, |i, j| targets[i][j]);
    let inv_n = 1.0 / n as f64;
    let mut gram = (xa.transpose() * &xa) * inv_n;
    for j in 0..p {
        gram[(j, j)] += lambda;
    }
    let rhs = (xa.transpose() * &y) * inv_n;

    let theta = match gram.clone().cholesky() {
        Some(chol) => chol.solve(&rhs),
        None => {
            if lambda == 0.0 {
                return Err(SigflowError::Numerical(
                    "normal equations are degenerate with lambda = 0; increase the ridge strength"
                        .into(),
                ));
            }
            // fall back to a pseudo-inverse of the regularized Gram matrix
            let pinv = gram.pseudo_inverse(1e-12).map_err(|e| {
                SigflowError::Numerical(format!("pseudo-inverse failed: {e}"))
            })?;
            pinv * rhs
        }
    };

    // theta is (p+1) x q; W is q x p row-major, intercept the last row
    let mut w = vec![0.0f64; q * p];
    for o in 0..q {
        for j in 0..p {
            w[o * p + j] = theta[(j, o)];
        }
    }
    let intercept: Vec<f64> = (0..q).map(|o| theta[(p, o)]).collect();
    if !w.iter().all(|v| v.is_finite()) || !intercept.iter().all(|v| v.is_finite()) {
        return Err(SigflowError::Numerical(
            "regression produced non-finite coefficients".into(),
        ));
    }
    Ok(CondExpSigModel {
        w,
        intercept,
        in_scaler,
        depth_in,
        depth_out,
        channels_in,
        channels_out,
        lambda,
        augment: opts,
    })
}

/// Predicted conditional expected output signature for a conditioning
/// stream, as a truncated tensor with level 0 set to 1.
pub fn predict_cond_expsig(model: &CondExpSigModel, x: &Stream) -> Result<TruncTensor> {
    if x.channels() != model.channels_in {
        return Err(SigflowError::Shape(format!(
            "conditioning stream has {} channels, model expects {}",
            x.channels(),
            model.channels_in
        )));
    }
    let feats = model
        .in_scaler
        .transform(&raw_features(x, model.depth_in, model.augment)?);
    Ok(predict_from_features(model, &feats))
}

/// Prediction from an already-scaled feature vector.
pub fn predict_from_features(model: &CondExpSigModel, scaled_features: &[f64]) -> TruncTensor {
    let p = scaled_features.len();
    let q = model.intercept.len();
    let x = DVector::from_column_slice(scaled_features);
    let w = DMatrix::from_row_slice(q, p, &model.w);
    let out = w * x + DVector::from_column_slice(&model.intercept);
    TruncTensor::from_features(
        model.augment.augmented_channels(model.channels_out),
        model.depth_out,
        out.as_slice(),
    )
    .expect("prediction shape")
}
