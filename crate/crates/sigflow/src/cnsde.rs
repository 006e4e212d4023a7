//! The conditional neural SDE generator: signature encoder, split
//! deterministic/random initial condition, SDE evolution under the
//! reversible Heun solver, and an affine readout emitting output streams.

use crate::error::{Result, SigflowError};
use crate::neural::{init_params, mlp_backward, mlp_forward, MlpParams, MlpTape};
use crate::sde::{
    backprop_solve, sample_brownian, solve, BrownianPath, DiffusionShape, SdeFields, SolveMode,
    SolveResult, TapeStats,
};
use crate::sigmetric::FeatureScaler;
use crate::signature::{AugmentOptions, Stream};
use crate::tensoralg::dimension;
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Architecture and sampling-grid settings of the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// channel counts of the conditioning / output streams
    pub d_x: usize,
    pub d_y: usize,
    /// hidden state size
    pub d_z: usize,
    /// noise channels of the Wiener process
    pub d_w: usize,
    /// size of the initial-condition noise vector V
    pub d_v: usize,
    /// random part of the initial condition, 0 <= k <= d_z
    pub k: usize,
    pub encoder_depth: usize,
    pub basepoint: bool,
    pub time: bool,
    pub cumsum: bool,
    pub xi2_width: usize,
    pub drift_width: usize,
    pub diffusion_width: usize,
    /// "diagonal" or "general"
    pub diffusion_shape: String,
    /// number of output observations per generated stream
    pub output_len: usize,
    /// uniform solver steps on [0, 1]
    pub solver_steps: usize,
    /// apply a final tanh to the drift/diffusion vector fields
    pub final_tanh: bool,
}

impl GeneratorConfig {
    pub fn augment_options(&self) -> AugmentOptions {
        AugmentOptions {
            basepoint: self.basepoint,
            time: self.time,
            cumsum: self.cumsum,
        }
    }

    /// Encoder output size: the signature feature dimension of the
    /// augmented conditioning stream.
    pub fn d_h(&self) -> usize {
        let c = self.augment_options().augmented_channels(self.d_x);
        dimension(c, self.encoder_depth) - 1
    }

    pub fn shape(&self) -> Result<DiffusionShape> {
        DiffusionShape::parse(&self.diffusion_shape)
    }

    fn diffusion_out(&self) -> Result<usize> {
        Ok(match self.shape()? {
            DiffusionShape::Diagonal => self.d_z,
            DiffusionShape::General => self.d_z * self.d_w,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.k > self.d_z {
            return Err(SigflowError::Config(format!(
                "k ({}) must not exceed d_z ({})",
                self.k, self.d_z
            )));
        }
        if self.d_x == 0 || self.d_y == 0 || self.d_z == 0 || self.d_w == 0 {
            return Err(SigflowError::Config("dimensions must be positive".into()));
        }
        if self.k > 0 && self.d_v == 0 {
            return Err(SigflowError::Config(
                "d_v must be positive when k > 0".into(),
            ));
        }
        if self.output_len < 2 {
            return Err(SigflowError::Config("output_len must be >= 2".into()));
        }
        if self.solver_steps < self.output_len - 1 {
            return Err(SigflowError::Config(format!(
                "solver_steps ({}) must be >= output_len - 1 ({})",
                self.solver_steps,
                self.output_len - 1
            )));
        }
        if self.shape()? == DiffusionShape::Diagonal && self.d_w != self.d_z {
            return Err(SigflowError::Config(
                "diagonal diffusion requires d_w == d_z".into(),
            ));
        }
        Ok(())
    }
}

/// All learnable parameters of the generator.
#[derive(Debug, Clone, PartialEq)]
pub struct CnsdeParams {
    /// linear encoder readout, (d_z - k) x d_h row-major, plus bias
    pub xi1_w: Vec<f64>,
    pub xi1_b: Vec<f64>,
    /// MLP mapping the initial noise V to the random part (present iff k > 0)
    pub xi2: Option<MlpParams>,
    pub drift: MlpParams,
    pub diffusion: MlpParams,
    /// readout, d_y x d_z row-major, plus bias
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl CnsdeParams {
    pub fn init(config: &GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d_h = config.d_h();
        let det = config.d_z - config.k;
        let mut rng = ChaCha20Rng::seed_from_u64(mix_seed(seed, 0));
        let bound = 1.0 / (d_h.max(1) as f64).sqrt();
        let xi1_w = (0..det * d_h).map(|_| rng.gen_range(-bound..bound)).collect();
        let xi1_b = vec![0.0; det];
        let xi2 = if config.k > 0 {
            Some(init_params(
                &[config.d_v, config.xi2_width, config.k],
                false,
                mix_seed(seed, 1),
            ))
        } else {
            None
        };
        let drift = init_params(
            &[1 + config.d_z, config.drift_width, config.d_z],
            config.final_tanh,
            mix_seed(seed, 2),
        );
        let diffusion = init_params(
            &[1 + config.d_z, config.diffusion_width, config.diffusion_out()?],
            config.final_tanh,
            mix_seed(seed, 3),
        );
        let abound = 1.0 / (config.d_z as f64).sqrt();
        let alpha = (0..config.d_y * config.d_z)
            .map(|_| rng.gen_range(-abound..abound))
            .collect();
        let beta = vec![0.0; config.d_y];
        Ok(CnsdeParams {
            xi1_w,
            xi1_b,
            xi2,
            drift,
            diffusion,
            alpha,
            beta,
        })
    }

    pub fn zeros_like(config: &GeneratorConfig) -> Result<Self> {
        let d_h = config.d_h();
        let det = config.d_z - config.k;
        let xi2 = if config.k > 0 {
            Some(MlpParams::zeros(
                &[config.d_v, config.xi2_width, config.k],
                false,
            ))
        } else {
            None
        };
        Ok(CnsdeParams {
            xi1_w: vec![0.0; det * d_h],
            xi1_b: vec![0.0; det],
            xi2,
            drift: MlpParams::zeros(
                &[1 + config.d_z, config.drift_width, config.d_z],
                config.final_tanh,
            ),
            diffusion: MlpParams::zeros(
                &[1 + config.d_z, config.diffusion_width, config.diffusion_out()?],
                config.final_tanh,
            ),
            alpha: vec![0.0; config.d_y * config.d_z],
            beta: vec![0.0; config.d_y],
        })
    }

    pub fn param_count(&self) -> usize {
        self.xi1_w.len()
            + self.xi1_b.len()
            + self.xi2.as_ref().map_or(0, MlpParams::param_count)
            + self.drift.param_count()
            + self.diffusion.param_count()
            + self.alpha.len()
            + self.beta.len()
    }

    /// Flattening order: xi1 weights, xi1 bias, xi2 layers, drift layers,
    /// diffusion layers, alpha, beta. This order is versioned in the
    /// checkpoint header.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        out.extend_from_slice(&self.xi1_w);
        out.extend_from_slice(&self.xi1_b);
        if let Some(xi2) = &self.xi2 {
            xi2.flatten_into(&mut out);
        }
        self.drift.flatten_into(&mut out);
        self.diffusion.flatten_into(&mut out);
        out.extend_from_slice(&self.alpha);
        out.extend_from_slice(&self.beta);
        out
    }

    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(SigflowError::Shape(format!(
                "parameter vector has {} entries, expected {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut c = 0;
        let n = self.xi1_w.len();
        self.xi1_w.copy_from_slice(&flat[c..c + n]);
        c += n;
        let n = self.xi1_b.len();
        self.xi1_b.copy_from_slice(&flat[c..c + n]);
        c += n;
        if let Some(xi2) = &mut self.xi2 {
            xi2.unflatten_from(flat, &mut c);
        }
        self.drift.unflatten_from(flat, &mut c);
        self.diffusion.unflatten_from(flat, &mut c);
        let n = self.alpha.len();
        self.alpha.copy_from_slice(&flat[c..c + n]);
        c += n;
        let n = self.beta.len();
        self.beta.copy_from_slice(&flat[c..c + n]);
        Ok(())
    }
}

/// Deterministic substream derivation (splitmix64 finalizer).
pub fn mix_seed(seed: u64, idx: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9E3779B97F4A7C15u64.wrapping_mul(idx.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Encoder: scaled truncated-signature features of the augmented
/// conditioning stream, using the training regression's scaler.
pub fn encode_condition(
    x: &Stream,
    config: &GeneratorConfig,
    scaler: &FeatureScaler,
) -> Result<Vec<f64>> {
    if x.channels() != config.d_x {
        return Err(SigflowError::Shape(format!(
            "conditioning stream has {} channels, generator expects {}",
            x.channels(),
            config.d_x
        )));
    }
    let raw = crate::sigmetric::raw_features(x, config.encoder_depth, config.augment_options())?;
    if raw.len() != scaler.dim() {
        return Err(SigflowError::Shape(format!(
            "feature dimension {} does not match fitted scaler ({})",
            raw.len(),
            scaler.dim()
        )));
    }
    Ok(scaler.transform(&raw))
}

/// Draw the initial-condition noise V for one sample.
fn sample_noise(d_v: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (0..d_v).map(|_| rng.sample(StandardNormal)).collect()
}

/// z0 = concat(xi1(h), xi2(V)); with k = 0 the state is deterministic in x.
pub fn initial_state(
    h: &[f64],
    params: &CnsdeParams,
    config: &GeneratorConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let (z0, _, _) = initial_state_with_tape(h, params, config, seed)?;
    Ok(z0)
}

fn initial_state_with_tape(
    h: &[f64],
    params: &CnsdeParams,
    config: &GeneratorConfig,
    seed: u64,
) -> Result<(Vec<f64>, Option<MlpTape>, Vec<f64>)> {
    let det = config.d_z - config.k;
    let d_h = config.d_h();
    if h.len() != d_h {
        return Err(SigflowError::Shape(format!(
            "encoded condition has {} entries, expected {d_h}",
            h.len()
        )));
    }
    let mut z0 = Vec::with_capacity(config.d_z);
    for o in 0..det {
        let row = &params.xi1_w[o * d_h..(o + 1) * d_h];
        let mut acc = params.xi1_b[o];
        for (w, x) in row.iter().zip(h) {
            acc += w * x;
        }
        z0.push(acc);
    }
    let mut tape = None;
    let mut v = Vec::new();
    if config.k > 0 {
        v = sample_noise(config.d_v, seed);
        let xi2 = params.xi2.as_ref().expect("xi2 present when k > 0");
        let (rand_part, t) = mlp_forward(xi2, &v)?;
        z0.extend_from_slice(&rand_part);
        tape = Some(t);
    }
    Ok((z0, tape, v))
}

/// One generated trajectory plus everything the backward pass needs.
pub struct SamplePath {
    /// output observations, output_len x d_y
    pub output_values: Vec<Vec<f64>>,
    pub solve_result: SolveResult,
    pub brownian: BrownianPath,
    pub out_indices: Vec<usize>,
    xi2_tape: Option<MlpTape>,
}

/// Solver grid indices that the output observations are read from: an
/// affine map of the output index range onto the solver step range.
fn output_indices(solver_steps: usize, output_len: usize) -> Vec<usize> {
    (0..output_len)
        .map(|p| {
            ((p as f64) * (solver_steps as f64) / (output_len as f64 - 1.0)).round() as usize
        })
        .collect()
}

pub fn sample_path(
    params: &CnsdeParams,
    config: &GeneratorConfig,
    h: &[f64],
    sample_seed: u64,
    mode: SolveMode,
    stats: &mut TapeStats,
) -> Result<SamplePath> {
    let (z0, xi2_tape, _v) =
        initial_state_with_tape(h, params, config, mix_seed(sample_seed, 10))?;
    let n = config.solver_steps;
    let brownian = sample_brownian(n, 1.0 / n as f64, config.d_w, mix_seed(sample_seed, 11))?;
    let fields = SdeFields::new(
        &params.drift,
        &params.diffusion,
        config.shape()?,
        config.d_z,
        config.d_w,
    )?;
    let solve_result = solve(&fields, &z0, &brownian, mode, stats)?;
    let out_indices = output_indices(n, config.output_len);
    let output_values = out_indices
        .iter()
        .map(|&idx| readout(params, config, &solve_result.trajectory[idx]))
        .collect();
    Ok(SamplePath {
        output_values,
        solve_result,
        brownian,
        out_indices,
        xi2_tape,
    })
}

fn readout(params: &CnsdeParams, config: &GeneratorConfig, z: &[f64]) -> Vec<f64> {
    (0..config.d_y)
        .map(|o| {
            let row = &params.alpha[o * config.d_z..(o + 1) * config.d_z];
            params.beta[o] + row.iter().zip(z).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect()
}

/// Gradient of one sample path. Accumulates into a CnsdeParams-shaped
/// gradient holder given cotangents on the output values.
pub fn sample_path_backward(
    params: &CnsdeParams,
    config: &GeneratorConfig,
    h: &[f64],
    path: &SamplePath,
    output_cotangent: &[Vec<f64>],
    grads: &mut CnsdeParams,
    stats: &mut TapeStats,
) -> Result<()> {
    let d_z = config.d_z;
    let n = config.solver_steps;
    // readout backward: cotangents on trajectory points + alpha/beta grads
    let mut traj_cot = vec![vec![0.0f64; d_z]; n + 1];
    for (p, &idx) in path.out_indices.iter().enumerate() {
        let dy = &output_cotangent[p];
        let z = &path.solve_result.trajectory[idx];
        for o in 0..config.d_y {
            let g = dy[o];
            grads.beta[o] += g;
            let arow = &params.alpha[o * d_z..(o + 1) * d_z];
            let grow = &mut grads.alpha[o * d_z..(o + 1) * d_z];
            for i in 0..d_z {
                grow[i] += g * z[i];
                traj_cot[idx][i] += g * arow[i];
            }
        }
    }
    let fields = SdeFields::new(
        &params.drift,
        &params.diffusion,
        config.shape()?,
        d_z,
        config.d_w,
    )?;
    let solve_grads = backprop_solve(&fields, &path.solve_result, &path.brownian, &traj_cot, stats)?;
    accumulate_mlp_grad(&mut grads.drift, &solve_grads.drift);
    accumulate_mlp_grad(&mut grads.diffusion, &solve_grads.diffusion);

    // initial-state backward
    let det = d_z - config.k;
    let d_h = config.d_h();
    for o in 0..det {
        let g = solve_grads.z0[o];
        grads.xi1_b[o] += g;
        let grow = &mut grads.xi1_w[o * d_h..(o + 1) * d_h];
        for (gw, hv) in grow.iter_mut().zip(h) {
            *gw += g * hv;
        }
    }
    if config.k > 0 {
        let xi2 = params.xi2.as_ref().expect("xi2 present");
        let gxi2 = grads.xi2.as_mut().expect("xi2 grad present");
        let tape = path.xi2_tape.as_ref().expect("xi2 tape present");
        let mut flat = vec![0.0f64; xi2.param_count()];
        mlp_backward(xi2, tape, &solve_grads.z0[det..], &mut flat)?;
        accumulate_mlp_grad(gxi2, &flat);
    }
    Ok(())
}

fn accumulate_mlp_grad(target: &mut MlpParams, flat: &[f64]) {
    let mut c = 0;
    for (w, b) in target.weights.iter_mut().zip(target.biases.iter_mut()) {
        for v in w.iter_mut() {
            *v += flat[c];
            c += 1;
        }
        for v in b.iter_mut() {
            *v += flat[c];
            c += 1;
        }
    }
}

/// Generate `n_samples` output streams conditioned on `x`. Sample j draws
/// its noise from substream (seed, j), so results do not depend on batch
/// composition or ordering.
pub fn generate(
    x: &Stream,
    params: &CnsdeParams,
    config: &GeneratorConfig,
    scaler: &FeatureScaler,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<Stream>> {
    let h = encode_condition(x, config, scaler)?;
    let timestamps: Vec<f64> = (0..config.output_len).map(|i| i as f64).collect();
    let mut out = Vec::with_capacity(n_samples);
    for j in 0..n_samples {
        let mut stats = TapeStats::default();
        let path = sample_path(
            params,
            config,
            &h,
            mix_seed(seed, j as u64),
            SolveMode::Reversible,
            &mut stats,
        )
        .map_err(|e| SigflowError::Numerical(format!("sample {j}: {e}")))?;
        out.push(Stream::new(timestamps.clone(), path.output_values)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signature::signature;

    fn small_config() -> GeneratorConfig {
        GeneratorConfig {
            d_x: 1,
            d_y: 1,
            d_z: 6,
            d_w: 6,
            d_v: 3,
            k: 2,
            encoder_depth: 2,
            basepoint: true,
            time: true,
            cumsum: true,
            xi2_width: 4,
            drift_width: 8,
            diffusion_width: 8,
            diffusion_shape: "diagonal".into(),
            output_len: 5,
            solver_steps: 16,
            final_tanh: true,
        }
    }

    fn test_stream(seed: u64) -> Stream {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vals = (0..8).map(|_| vec![rng.gen_range(-1.0..1.0)]).collect();
        Stream::new((0..8).map(|i| i as f64).collect(), vals).unwrap()
    }

    fn identity_scaler(config: &GeneratorConfig) -> FeatureScaler {
        FeatureScaler::identity(config.d_h())
    }

    #[test]
    fn encoder_dimension_matches_paper_defaults() {
        let mut config = small_config();
        config.encoder_depth = 5;
        assert_eq!(config.d_h(), 363);
    }

    #[test]
    fn encoder_is_deterministic_and_matches_sigmetric() {
        let config = small_config();
        let scaler = identity_scaler(&config);
        let x = test_stream(1);
        let h1 = encode_condition(&x, &config, &scaler).unwrap();
        let h2 = encode_condition(&x, &config, &scaler).unwrap();
        assert_eq!(h1, h2);
        let direct =
            crate::sigmetric::raw_features(&x, config.encoder_depth, config.augment_options())
                .unwrap();
        assert_eq!(h1, direct);
    }

    #[test]
    fn initial_state_split_semantics() {
        let mut config = small_config();
        let x = test_stream(2);

        // k = 0: fully deterministic in x
        config.k = 0;
        let params = CnsdeParams::init(&config, 3).unwrap();
        let scaler = identity_scaler(&config);
        let h = encode_condition(&x, &config, &scaler).unwrap();
        let a = initial_state(&h, &params, &config, 1).unwrap();
        let b = initial_state(&h, &params, &config, 2).unwrap();
        assert_eq!(a, b);

        // k = d_z: independent of h
        config.k = config.d_z;
        let params = CnsdeParams::init(&config, 3).unwrap();
        let h2: Vec<f64> = h.iter().map(|v| v + 1.0).collect();
        let a = initial_state(&h, &params, &config, 7).unwrap();
        let b = initial_state(&h2, &params, &config, 7).unwrap();
        assert_eq!(a, b);

        // fixed seed reproducible
        config.k = 2;
        let params = CnsdeParams::init(&config, 3).unwrap();
        let a = initial_state(&h, &params, &config, 9).unwrap();
        let b = initial_state(&h, &params, &config, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn conditioning_sensitivity() {
        let mut config = small_config();
        config.k = 0;
        let params = CnsdeParams::init(&config, 5).unwrap();
        let scaler = identity_scaler(&config);
        let x1 = test_stream(10);
        let x2 = test_stream(11);
        let h1 = encode_condition(&x1, &config, &scaler).unwrap();
        let h2 = encode_condition(&x2, &config, &scaler).unwrap();
        assert_ne!(
            initial_state(&h1, &params, &config, 0).unwrap(),
            initial_state(&h2, &params, &config, 0).unwrap()
        );
    }

    #[test]
    fn zero_alpha_emits_constant_beta() {
        let config = small_config();
        let mut params = CnsdeParams::init(&config, 1).unwrap();
        params.alpha.iter_mut().for_each(|v| *v = 0.0);
        params.beta[0] = 2.5;
        let scaler = identity_scaler(&config);
        let x = test_stream(3);
        let streams = generate(&x, &params, &config, &scaler, 3, 42).unwrap();
        for s in &streams {
            for row in s.values() {
                assert_eq!(row[0], 2.5);
            }
        }
    }

    #[test]
    fn degenerate_sde_is_deterministic() {
        // f = 0, g = 0, k = 0: all samples identical and deterministic in x
        let mut config = small_config();
        config.k = 0;
        let mut params = CnsdeParams::init(&config, 1).unwrap();
        params.drift = MlpParams::zeros(&params.drift.sizes.clone(), config.final_tanh);
        params.diffusion = MlpParams::zeros(&params.diffusion.sizes.clone(), config.final_tanh);
        let scaler = identity_scaler(&config);
        let x = test_stream(4);
        let streams = generate(&x, &params, &config, &scaler, 4, 0).unwrap();
        for s in &streams[1..] {
            assert_eq!(s, &streams[0]);
        }
        let again = generate(&x, &params, &config, &scaler, 4, 99).unwrap();
        assert_eq!(again[0], streams[0]);
    }

    #[test]
    fn generation_is_seed_deterministic_and_sample_independent() {
        let config = small_config();
        let params = CnsdeParams::init(&config, 2).unwrap();
        let scaler = identity_scaler(&config);
        let x = test_stream(5);
        let a = generate(&x, &params, &config, &scaler, 4, 7).unwrap();
        let b = generate(&x, &params, &config, &scaler, 4, 7).unwrap();
        assert_eq!(a, b);
        // sample j unchanged by batch size
        let c = generate(&x, &params, &config, &scaler, 2, 7).unwrap();
        assert_eq!(a[0], c[0]);
        assert_eq!(a[1], c[1]);
    }

    #[test]
    fn montecarlo_mean_signature_converges() {
        let config = small_config();
        let params = CnsdeParams::init(&config, 8).unwrap();
        let scaler = identity_scaler(&config);
        let x = test_stream(6);
        let small = generate(&x, &params, &config, &scaler, 256, 1).unwrap();
        let large = generate(&x, &params, &config, &scaler, 4096, 2).unwrap();
        let mean_sig = |streams: &[Stream]| {
            let mut acc = signature(&streams[0], 2).unwrap();
            for s in &streams[1..] {
                acc = acc.add(&signature(s, 2).unwrap()).unwrap();
            }
            acc.scale(1.0 / streams.len() as f64)
        };
        let m_small = mean_sig(&small);
        let m_large = mean_sig(&large);
        // per-coordinate std over the small batch
        let sigs: Vec<_> = small.iter().map(|s| signature(s, 2).unwrap()).collect();
        for j in 1..m_small.data().len() {
            let mean = m_small.data()[j];
            let var = sigs
                .iter()
                .map(|s| (s.data()[j] - mean).powi(2))
                .sum::<f64>()
                / sigs.len() as f64;
            let tol = 3.0 * (var / 256.0).sqrt() + 1e-12;
            assert!(
                (mean - m_large.data()[j]).abs() <= tol.max(4.0 * var.sqrt() / 16.0),
                "coord {j}: {mean} vs {}",
                m_large.data()[j]
            );
        }
    }

    #[test]
    fn flatten_round_trip() {
        let config = small_config();
        let params = CnsdeParams::init(&config, 12).unwrap();
        let flat = params.flatten();
        assert_eq!(flat.len(), params.param_count());
        let mut other = CnsdeParams::zeros_like(&config).unwrap();
        other.unflatten(&flat).unwrap();
        assert_eq!(params, other);
    }

    #[test]
    fn sample_path_backward_matches_finite_differences() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut config = small_config();
        config.d_z = 4;
        config.d_w = 4;
        config.solver_steps = 8;
        config.output_len = 4;
        let params = CnsdeParams::init(&config, 20).unwrap();
        let scaler = identity_scaler(&config);
        let x = test_stream(7);
        let h = encode_condition(&x, &config, &scaler).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let weights: Vec<Vec<f64>> = (0..config.output_len)
            .map(|_| vec![rng.gen_range(-1.0..1.0)])
            .collect();

        let loss = |p: &CnsdeParams| -> f64 {
            let mut stats = TapeStats::default();
            let path = sample_path(p, &config, &h, 5, SolveMode::Reversible, &mut stats).unwrap();
            path.output_values
                .iter()
                .zip(&weights)
                .map(|(v, w)| v[0] * w[0])
                .sum()
        };

        let mut stats = TapeStats::default();
        let path = sample_path(&params, &config, &h, 5, SolveMode::Reversible, &mut stats).unwrap();
        let mut grads = CnsdeParams::zeros_like(&config).unwrap();
        sample_path_backward(&params, &config, &h, &path, &weights, &mut grads, &mut stats)
            .unwrap();
        let flat_grad = grads.flatten();
        let flat = params.flatten();
        let h_step = 1e-5;
        for idx in (0..flat.len()).step_by(13) {
            let mut fp = flat.clone();
            fp[idx] += h_step;
            let mut fm = flat.clone();
            fm[idx] -= h_step;
            let mut pp = params.clone();
            pp.unflatten(&fp).unwrap();
            let mut pm = params.clone();
            pm.unflatten(&fm).unwrap();
            let fd = (loss(&pp) - loss(&pm)) / (2.0 * h_step);
            assert!(
                (flat_grad[idx] - fd).abs() <= 1e-5 * (1.0 + fd.abs()),
                "param {idx}: {} vs {fd}",
                flat_grad[idx]
            );
        }
    }
}
