//! SigCWGAN training: fit the conditional regression once, then minimize
//! the Montecarlo Sig-W1 loss over generator parameters with Adam, early
//! stopping, and best-validation checkpointing.

use crate::cnsde::{encode_condition, mix_seed, sample_path, sample_path_backward, CnsdeParams, GeneratorConfig};
use crate::data::{Dataset, NormStats};
use crate::error::{Result, SigflowError};
use crate::neural::{adam_step, AdamState};
use crate::sde::{SolveMode, TapeStats};
use crate::signature::{augment, augment_backward, signature_with_tape, Stream};
use crate::sigmetric::{fit_cond_expsig, predict_from_features, CondExpSigModel};
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::Instant;

pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &[u8; 4] = b"SIGW";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Montecarlo samples per conditioning path during training
    pub m: usize,
    /// Montecarlo samples per conditioning path during validation
    pub m_val: usize,
    pub learning_rate: f64,
    pub max_seconds: f64,
    /// steps without validation improvement before stopping
    pub patience: usize,
    pub validation_period: usize,
    pub depth_in: usize,
    pub depth_out: usize,
    pub lambda: f64,
    pub max_steps: usize,
    pub train_seed: u64,
    pub eval_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            m: 32,
            m_val: 128,
            learning_rate: 1e-3,
            max_seconds: 7200.0,
            patience: 1000,
            validation_period: 50,
            depth_in: 5,
            depth_out: 4,
            lambda: 1e-4,
            max_steps: 10_000,
            train_seed: 0,
            eval_seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0
            || self.m == 0
            || self.m_val == 0
            || self.validation_period == 0
            || self.patience == 0
            || self.max_steps == 0
            || self.depth_in == 0
            || self.depth_out == 0
        {
            return Err(SigflowError::Config(
                "training counts and depths must be positive".into(),
            ));
        }
        if self.learning_rate <= 0.0 || self.max_seconds <= 0.0 || self.lambda < 0.0 {
            return Err(SigflowError::Config(
                "learning rate and wall-clock budget must be positive, lambda >= 0".into(),
            ));
        }
        if self.patience < self.validation_period {
            return Err(SigflowError::Config(
                "patience must be >= validation period".into(),
            ));
        }
        Ok(())
    }
}

/// Everything needed to reproduce inference and resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub gen_config: GeneratorConfig,
    pub params: CnsdeParams,
    pub model: CondExpSigModel,
    pub norm: NormStats,
    pub step: u64,
    pub best_val_loss: f64,
    pub train_seed: u64,
    pub eval_seed: u64,
    pub adam: AdamState,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossLogRow {
    pub step: u64,
    pub train_loss: Option<f64>,
    pub val_loss: Option<f64>,
}

/// Montecarlo Sig-W1 loss with its gradient. Each batch item carries a
/// stable key (its dataset index) so the noise draw — and hence the loss —
/// does not depend on batch composition or ordering.
pub fn sigcwgan_loss(
    batch: &[(u64, &Stream)],
    model: &CondExpSigModel,
    params: &CnsdeParams,
    config: &GeneratorConfig,
    m: usize,
    seed: u64,
    mode: SolveMode,
    stats: &mut TapeStats,
) -> Result<(f64, Vec<f64>)> {
    let mut grads = CnsdeParams::zeros_like(config)?;
    let loss = loss_impl(batch, model, params, config, m, seed, mode, stats, Some(&mut grads))?;
    Ok((loss, grads.flatten()))
}

/// Loss only, without the backward pass (used for validation).
pub fn sigcwgan_loss_value(
    batch: &[(u64, &Stream)],
    model: &CondExpSigModel,
    params: &CnsdeParams,
    config: &GeneratorConfig,
    m: usize,
    seed: u64,
) -> Result<f64> {
    let mut stats = TapeStats::default();
    loss_impl(
        batch,
        model,
        params,
        config,
        m,
        seed,
        SolveMode::Reversible,
        &mut stats,
        None,
    )
}

#[allow(clippy::too_many_arguments)]
fn loss_impl(
    batch: &[(u64, &Stream)],
    model: &CondExpSigModel,
    params: &CnsdeParams,
    config: &GeneratorConfig,
    m: usize,
    seed: u64,
    mode: SolveMode,
    stats: &mut TapeStats,
    mut grads: Option<&mut CnsdeParams>,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(SigflowError::Data("empty loss batch".into()));
    }
    if m == 0 {
        return Err(SigflowError::Config("m must be >= 1".into()));
    }
    let opts = config.augment_options();
    let timestamps: Vec<f64> = (0..config.output_len).map(|i| i as f64).collect();
    let mut loss = 0.0;
    for &(key, x) in batch {
        let h = encode_condition(x, config, &model.in_scaler)?;
        let target = predict_from_features(model, &h);
        let x_seed = mix_seed(seed, key);

        // forward: m sampled paths, their signatures, and the MC mean
        let mut paths = Vec::with_capacity(m);
        let mut tapes = Vec::with_capacity(m);
        let mut ghat = vec![0.0f64; target.features().len()];
        for j in 0..m {
            let path = sample_path(params, config, &h, mix_seed(x_seed, j as u64), mode, stats)?;
            let y = Stream::new(timestamps.clone(), path.output_values.clone())?;
            let aug = augment(&y, opts);
            let (sig, tape) = signature_with_tape(aug.values(), model.depth_out)?;
            for (g, v) in ghat.iter_mut().zip(sig.features()) {
                *g += v / m as f64;
            }
            paths.push(path);
            tapes.push(tape);
        }
        let diff: Vec<f64> = ghat
            .iter()
            .zip(target.features())
            .map(|(g, t)| g - t)
            .collect();
        let dist = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !dist.is_finite() {
            return Err(SigflowError::Numerical(
                "non-finite Sig-W1 contribution (SDE blow-up?)".into(),
            ));
        }
        loss += dist / batch.len() as f64;

        if let Some(grads) = grads.as_deref_mut() {
            if dist < 1e-300 {
                continue; // gradient of the norm undefined at 0; treat as flat
            }
            let scale = 1.0 / (dist * m as f64 * batch.len() as f64);
            // full-tensor cotangent: level 0 carries no gradient
            let mut sig_cot = Vec::with_capacity(diff.len() + 1);
            sig_cot.push(0.0);
            sig_cot.extend(diff.iter().map(|v| v * scale));
            for (path, tape) in paths.iter().zip(&tapes) {
                let grad_aug = tape.backward(&sig_cot);
                let grad_y = augment_backward(&grad_aug, opts, config.d_y);
                sample_path_backward(params, config, &h, path, &grad_y, grads, stats)?;
            }
        }
    }
    Ok(loss)
}

/// Deterministic minibatch for a given 1-based step: a fresh seeded shuffle
/// per epoch, consumed without replacement.
fn minibatch_indices(n: usize, batch_size: usize, train_seed: u64, step: u64) -> Vec<u64> {
    let steps_per_epoch = n.div_ceil(batch_size) as u64;
    let epoch = (step - 1) / steps_per_epoch;
    let pos = ((step - 1) % steps_per_epoch) as usize;
    let mut order: Vec<u64> = (0..n as u64).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(mix_seed(train_seed, 0x10000 + epoch));
    order.shuffle(&mut rng);
    let lo = pos * batch_size;
    let hi = (lo + batch_size).min(n);
    order[lo..hi].to_vec()
}

/// Full training loop. Pass `resume_from` to continue a previous run: the
/// regression, Adam state, and step counter are taken from the checkpoint.
pub fn train(
    dataset: &Dataset,
    tc: &TrainConfig,
    gc: &GeneratorConfig,
    resume_from: Option<&Checkpoint>,
) -> Result<(Checkpoint, Vec<LossLogRow>)> {
    tc.validate()?;
    gc.validate()?;
    if dataset.train.is_empty() || dataset.val.is_empty() {
        return Err(SigflowError::Data(
            "training needs non-empty train and validation splits".into(),
        ));
    }
    if tc.depth_in != gc.encoder_depth {
        return Err(SigflowError::Config(format!(
            "depth_in ({}) must match the generator encoder depth ({})",
            tc.depth_in, gc.encoder_depth
        )));
    }
    let started = Instant::now();

    let (model, mut params, mut adam, start_step) = match resume_from {
        Some(c) => {
            if c.gen_config != *gc {
                return Err(SigflowError::Config(
                    "resume checkpoint has a different generator configuration".into(),
                ));
            }
            (c.model.clone(), c.params.clone(), c.adam.clone(), c.step)
        }
        None => {
            let model = fit_cond_expsig(
                &dataset.train,
                tc.depth_in,
                tc.depth_out,
                tc.lambda,
                gc.augment_options(),
            )?;
            let params = CnsdeParams::init(gc, mix_seed(tc.train_seed, 1))?;
            let adam = AdamState::new(params.param_count(), tc.learning_rate);
            (model, params, adam, 0)
        }
    };

    let val_batch: Vec<(u64, &Stream)> = dataset
        .val
        .iter()
        .enumerate()
        .map(|(i, (x, _))| (i as u64, x))
        .collect();
    let validate = |p: &CnsdeParams| -> Result<f64> {
        sigcwgan_loss_value(&val_batch, &model, p, gc, tc.m_val, tc.eval_seed)
    };

    let mut log = Vec::new();
    let mut best_val = validate(&params)?;
    let mut best = (params.clone(), adam.clone(), start_step);
    log.push(LossLogRow {
        step: start_step,
        train_loss: None,
        val_loss: Some(best_val),
    });

    let n = dataset.train.len();
    let mut since_best = 0usize;
    let mut bad_streak = 0usize;
    let mut step = start_step;
    while step < start_step + tc.max_steps as u64 {
        step += 1;
        if started.elapsed().as_secs_f64() > tc.max_seconds {
            break;
        }
        let idx = minibatch_indices(n, tc.batch_size, tc.train_seed, step);
        let batch: Vec<(u64, &Stream)> =
            idx.iter().map(|&i| (i, &dataset.train[i as usize].0)).collect();
        let step_seed = mix_seed(tc.train_seed, 0x100000 + step);
        let mut stats = TapeStats::default();
        let result = sigcwgan_loss(
            &batch,
            &model,
            &params,
            gc,
            tc.m,
            step_seed,
            SolveMode::Reversible,
            &mut stats,
        );
        let train_loss = match result {
            Ok((loss, grad)) if loss.is_finite() && grad.iter().all(|g| g.is_finite()) => {
                bad_streak = 0;
                let mut flat = params.flatten();
                adam_step(&mut adam, &mut flat, &grad)?;
                params.unflatten(&flat)?;
                Some(loss)
            }
            Ok((loss, _)) => {
                bad_streak += 1;
                Some(loss)
            }
            Err(SigflowError::Numerical(_)) => {
                bad_streak += 1;
                None
            }
            Err(e) => return Err(e),
        };
        if bad_streak >= 3 {
            return Err(SigflowError::Numerical(format!(
                "3 consecutive non-finite training losses (diverged at step {step})"
            )));
        }

        let mut val_loss = None;
        if (step - start_step) % tc.validation_period as u64 == 0 {
            let v = validate(&params)?;
            val_loss = Some(v);
            if v < best_val {
                best_val = v;
                best = (params.clone(), adam.clone(), step);
                since_best = 0;
            } else {
                since_best += tc.validation_period;
            }
        }
        log.push(LossLogRow {
            step,
            train_loss,
            val_loss,
        });
        if since_best >= tc.patience {
            break;
        }
    }

    let (best_params, best_adam, best_step) = best;
    Ok((
        Checkpoint {
            version: CHECKPOINT_VERSION,
            gen_config: gc.clone(),
            params: best_params,
            model,
            norm: dataset.norm.clone(),
            step: best_step,
            best_val_loss: best_val,
            train_seed: tc.train_seed,
            eval_seed: tc.eval_seed,
            adam: best_adam,
        },
        log,
    ))
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    gen_config: GeneratorConfig,
    model: CondExpSigModel,
    norm: NormStats,
    step: u64,
    best_val_loss: f64,
    train_seed: u64,
    eval_seed: u64,
    adam_step: u64,
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    n_params: u64,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Serialize a checkpoint: magic, version, length-prefixed text metadata,
/// little-endian f64 payload (params, Adam moments), trailing checksum.
pub fn checkpoint_to_bytes(c: &Checkpoint) -> Result<Vec<u8>> {
    if !c.best_val_loss.is_finite() {
        return Err(SigflowError::Checkpoint(
            "refusing to save a checkpoint with a non-finite validation loss".into(),
        ));
    }
    let flat = c.params.flatten();
    let meta = CheckpointMeta {
        gen_config: c.gen_config.clone(),
        model: c.model.clone(),
        norm: c.norm.clone(),
        step: c.step,
        best_val_loss: c.best_val_loss,
        train_seed: c.train_seed,
        eval_seed: c.eval_seed,
        adam_step: c.adam.step,
        learning_rate: c.adam.learning_rate,
        beta1: c.adam.beta1,
        beta2: c.adam.beta2,
        epsilon: c.adam.epsilon,
        n_params: flat.len() as u64,
    };
    let meta_bytes = serde_json::to_vec(&meta)
        .map_err(|e| SigflowError::Checkpoint(format!("metadata serialization failed: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&c.version.to_le_bytes());
    out.extend_from_slice(&(meta_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta_bytes);
    let payload: Vec<&[f64]> = vec![&flat, &c.adam.m, &c.adam.v];
    let count: usize = payload.iter().map(|p| p.len()).sum();
    out.extend_from_slice(&(count as u64).to_le_bytes());
    for part in payload {
        for v in part {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let checksum = fnv1a(&out);
    out.extend_from_slice(&checksum.to_le_bytes());
    Ok(out)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let err = |m: &str| SigflowError::Checkpoint(m.into());
    if bytes.len() < 4 + 4 + 8 + 8 + 8 {
        return Err(err("truncated checkpoint file"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    if fnv1a(body) != stored {
        return Err(err("checkpoint checksum mismatch (corrupted file)"));
    }
    if &body[..4] != CHECKPOINT_MAGIC {
        return Err(err("not a checkpoint file (bad magic bytes)"));
    }
    let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(SigflowError::Checkpoint(format!(
            "checkpoint version {version} is not supported (this build reads version {CHECKPOINT_VERSION})"
        )));
    }
    let meta_len = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
    let meta_end = 16usize
        .checked_add(meta_len)
        .ok_or_else(|| err("corrupt metadata length"))?;
    if body.len() < meta_end + 8 {
        return Err(err("truncated checkpoint file"));
    }
    let meta: CheckpointMeta = serde_json::from_slice(&body[16..meta_end])
        .map_err(|e| SigflowError::Checkpoint(format!("bad checkpoint metadata: {e}")))?;
    let count = u64::from_le_bytes(body[meta_end..meta_end + 8].try_into().unwrap()) as usize;
    let payload_start = meta_end + 8;
    if body.len() != payload_start + count * 8 {
        return Err(err("checkpoint payload length mismatch"));
    }
    let mut payload = Vec::with_capacity(count);
    for chunk in body[payload_start..].chunks_exact(8) {
        payload.push(f64::from_le_bytes(chunk.try_into().unwrap()));
    }
    let n = meta.n_params as usize;
    if count != 3 * n {
        return Err(err("checkpoint payload does not hold params + Adam moments"));
    }
    let mut params = CnsdeParams::zeros_like(&meta.gen_config)?;
    if params.param_count() != n {
        return Err(err("parameter count does not match the generator configuration"));
    }
    params.unflatten(&payload[..n])?;
    let adam = AdamState {
        step: meta.adam_step,
        m: payload[n..2 * n].to_vec(),
        v: payload[2 * n..].to_vec(),
        learning_rate: meta.learning_rate,
        beta1: meta.beta1,
        beta2: meta.beta2,
        epsilon: meta.epsilon,
    };
    Ok(Checkpoint {
        version,
        gen_config: meta.gen_config,
        params,
        model: meta.model,
        norm: meta.norm,
        step: meta.step,
        best_val_loss: meta.best_val_loss,
        train_seed: meta.train_seed,
        eval_seed: meta.eval_seed,
        adam,
    })
}

pub fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_to_bytes(c)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)
        .map_err(|e| SigflowError::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    checkpoint_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_windows, simulate_ar, split_and_normalize, WindowSpec};

    fn tiny_gen_config() -> GeneratorConfig {
        GeneratorConfig {
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
        }
    }

    fn tiny_train_config() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            m: 2,
            m_val: 4,
            validation_period: 2,
            patience: 100,
            max_steps: 4,
            depth_in: 2,
            depth_out: 2,
            ..TrainConfig::default()
        }
    }

    fn tiny_dataset() -> Dataset {
        let s = simulate_ar(&[0.5], 1.0, 120, 50, 11).unwrap();
        let spec = WindowSpec {
            input_len: 6,
            output_len: 4,
            stride: 2,
        };
        let pairs = make_windows(&s, &spec).unwrap();
        split_and_normalize(&pairs, (0.6, 0.2, 0.2), true).unwrap()
    }

    fn fitted(ds: &Dataset, gc: &GeneratorConfig) -> CondExpSigModel {
        fit_cond_expsig(&ds.train, gc.encoder_depth, 2, 1e-3, gc.augment_options()).unwrap()
    }

    #[test]
    fn loss_is_finite_on_real_replay_scale() {
        let gc = tiny_gen_config();
        let ds = tiny_dataset();
        let model = fitted(&ds, &gc);
        let params = CnsdeParams::init(&gc, 5).unwrap();
        let batch: Vec<(u64, &Stream)> = ds
            .train
            .iter()
            .take(3)
            .enumerate()
            .map(|(i, (x, _))| (i as u64, x))
            .collect();
        let loss = sigcwgan_loss_value(&batch, &model, &params, &gc, 4, 7).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
    }

    #[test]
    fn deterministic_generator_has_zero_loss_variance_across_seeds() {
        let mut gc = tiny_gen_config();
        gc.k = 0; // no initial-condition noise
        let ds = tiny_dataset();
        let model = fitted(&ds, &gc);
        let mut params = CnsdeParams::init(&gc, 5).unwrap();
        // zero diffusion: the path is an ODE, independent of the Brownian draw
        for w in params.diffusion.weights.iter_mut() {
            w.iter_mut().for_each(|v| *v = 0.0);
        }
        for b in params.diffusion.biases.iter_mut() {
            b.iter_mut().for_each(|v| *v = 0.0);
        }
        let batch: Vec<(u64, &Stream)> = vec![(0, &ds.train[0].0)];
        let losses: Vec<f64> = (0..10)
            .map(|s| sigcwgan_loss_value(&batch, &model, &params, &gc, 8, s).unwrap())
            .collect();
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        let std = (losses.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>()
            / losses.len() as f64)
            .sqrt();
        assert!(std < 1e-8, "std {std}");
    }

    #[test]
    fn loss_is_invariant_to_batch_ordering() {
        let gc = tiny_gen_config();
        let ds = tiny_dataset();
        let model = fitted(&ds, &gc);
        let params = CnsdeParams::init(&gc, 5).unwrap();
        let fwd: Vec<(u64, &Stream)> = ds
            .train
            .iter()
            .take(4)
            .enumerate()
            .map(|(i, (x, _))| (i as u64, x))
            .collect();
        let mut rev = fwd.clone();
        rev.reverse();
        let a = sigcwgan_loss_value(&fwd, &model, &params, &gc, 3, 77).unwrap();
        let b = sigcwgan_loss_value(&rev, &model, &params, &gc, 3, 77).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let gc = tiny_gen_config();
        let ds = tiny_dataset();
        let model = fitted(&ds, &gc);
        let params = CnsdeParams::init(&gc, 5).unwrap();
        let batch: Vec<(u64, &Stream)> = ds
            .train
            .iter()
            .take(2)
            .enumerate()
            .map(|(i, (x, _))| (i as u64, x))
            .collect();
        let mut stats = TapeStats::default();
        let (_, grad) = sigcwgan_loss(
            &batch,
            &model,
            &params,
            &gc,
            2,
            13,
            SolveMode::Reversible,
            &mut stats,
        )
        .unwrap();
        let flat = params.flatten();
        let eps = 1e-5;
        let mut max_rel: f64 = 0.0;
        let scale = grad.iter().map(|g| g * g).sum::<f64>().sqrt().max(1.0);
        for i in 0..flat.len() {
            let mut plus = params.clone();
            let mut minus = params.clone();
            let mut fp = flat.clone();
            fp[i] += eps;
            plus.unflatten(&fp).unwrap();
            fp[i] -= 2.0 * eps;
            minus.unflatten(&fp).unwrap();
            let lp = sigcwgan_loss_value(&batch, &model, &plus, &gc, 2, 13).unwrap();
            let lm = sigcwgan_loss_value(&batch, &model, &minus, &gc, 2, 13).unwrap();
            let fd = (lp - lm) / (2.0 * eps);
            max_rel = max_rel.max((fd - grad[i]).abs() / scale);
        }
        assert!(max_rel < 1e-4, "max relative gradient error {max_rel}");
    }

    #[test]
    fn both_solve_modes_give_the_same_loss_gradient() {
        let gc = tiny_gen_config();
        let ds = tiny_dataset();
        let model = fitted(&ds, &gc);
        let params = CnsdeParams::init(&gc, 5).unwrap();
        let batch: Vec<(u64, &Stream)> = vec![(0, &ds.train[0].0), (1, &ds.train[1].0)];
        let mut s1 = TapeStats::default();
        let mut s2 = TapeStats::default();
        let (l1, g1) =
            sigcwgan_loss(&batch, &model, &params, &gc, 2, 3, SolveMode::Reversible, &mut s1)
                .unwrap();
        let (l2, g2) =
            sigcwgan_loss(&batch, &model, &params, &gc, 2, 3, SolveMode::StoreAll, &mut s2)
                .unwrap();
        assert_eq!(l1, l2);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(b.abs()).max(1e-12));
        }
    }

    #[test]
    fn training_runs_and_tracks_best_validation() {
        let gc = tiny_gen_config();
        let ds = tiny_dataset();
        let tc = tiny_train_config();
        let (ckpt, log) = train(&ds, &tc, &gc, None).unwrap();
        assert!(ckpt.best_val_loss.is_finite());
        // best-so-far semantics: checkpoint val loss <= every logged val loss
        for row in &log {
            if let Some(v) = row.val_loss {
                assert!(ckpt.best_val_loss <= v + 1e-15);
            }
        }
        assert_eq!(log[0].step, 0);
        assert!(log[0].val_loss.is_some());
    }

    #[test]
    fn frozen_updates_stop_after_patience() {
        let gc = tiny_gen_config();
        let ds = tiny_dataset();
        let mut tc = tiny_train_config();
        // updates of ~1e-300 never change the parameters, so validation
        // never improves and patience triggers at the first validation
        tc.learning_rate = 1e-300;
        tc.validation_period = 1;
        tc.patience = 1;
        tc.max_steps = 50;
        let (_, log) = train(&ds, &tc, &gc, None).unwrap();
        assert_eq!(log.len(), 2); // step 0 + one trained step
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let gc = tiny_gen_config();
        let ds = tiny_dataset();
        let tc = tiny_train_config();
        let (ckpt, _) = train(&ds, &tc, &gc, None).unwrap();
        let bytes = checkpoint_to_bytes(&ckpt).unwrap();
        let back = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(ckpt, back);
        let bytes2 = checkpoint_to_bytes(&back).unwrap();
        assert_eq!(bytes, bytes2);
    }

    #[test]
    fn checkpoint_detects_corruption_truncation_and_version_skew() {
        let gc = tiny_gen_config();
        let ds = tiny_dataset();
        let tc = tiny_train_config();
        let (ckpt, _) = train(&ds, &tc, &gc, None).unwrap();
        let bytes = checkpoint_to_bytes(&ckpt).unwrap();

        let mut corrupted = bytes.clone();
        corrupted[40] ^= 0x01;
        let err = checkpoint_from_bytes(&corrupted).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");

        let truncated = &bytes[..bytes.len() / 2];
        assert!(checkpoint_from_bytes(truncated).is_err());

        let mut newer = bytes.clone();
        newer[4..8].copy_from_slice(&2u32.to_le_bytes());
        let body_len = newer.len() - 8;
        let sum = fnv1a(&newer[..body_len]);
        newer[body_len..].copy_from_slice(&sum.to_le_bytes());
        let err = checkpoint_from_bytes(&newer).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn resume_reproduces_the_next_step_loss_bit_exactly() {
        let gc = tiny_gen_config();
        let ds = tiny_dataset();
        let mut tc = tiny_train_config();
        tc.max_steps = 3;
        tc.validation_period = 1; // validate every step so best tracks latest
        let (ckpt, _) = train(&ds, &tc, &gc, None).unwrap();

        let bytes = checkpoint_to_bytes(&ckpt).unwrap();
        let loaded = checkpoint_from_bytes(&bytes).unwrap();

        let mut one = tc.clone();
        one.max_steps = 1;
        let (_, log_a) = train(&ds, &one, &gc, Some(&ckpt)).unwrap();
        let (_, log_b) = train(&ds, &one, &gc, Some(&loaded)).unwrap();
        assert_eq!(log_a, log_b);
        let a = log_a.iter().find_map(|r| r.train_loss).unwrap();
        let b = log_b.iter().find_map(|r| r.train_loss).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(log_a.last().unwrap().step, ckpt.step + 1);
    }

    #[test]
    fn validation_loss_is_reproducible_for_fixed_seed() {
        let gc = tiny_gen_config();
        let ds = tiny_dataset();
        let model = fitted(&ds, &gc);
        let params = CnsdeParams::init(&gc, 5).unwrap();
        let batch: Vec<(u64, &Stream)> = ds
            .val
            .iter()
            .enumerate()
            .map(|(i, (x, _))| (i as u64, x))
            .collect();
        let a = sigcwgan_loss_value(&batch, &model, &params, &gc, 4, 99).unwrap();
        let b = sigcwgan_loss_value(&batch, &model, &params, &gc, 4, 99).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
