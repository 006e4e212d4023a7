//! Stratonovich SDE integration with the algebraically reversible Heun
//! scheme: forward solve, exact state reversal, and reverse-mode gradient
//! accumulation that either stores every step's activation tapes
//! (StoreAll) or reconstructs states on the fly (Reversible, constant
//! tape memory).

use crate::error::{Result, SigflowError};
use crate::neural::{mlp_backward, mlp_forward, MlpParams, MlpTape};
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

/// Output layout of the diffusion network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiffusionShape {
    /// d_z outputs, d_w = d_z, applied elementwise to the noise.
    Diagonal,
    /// d_z x d_w matrix output (row-major), applied as a matrix-vector product.
    General,
}

impl DiffusionShape {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "diagonal" => Ok(DiffusionShape::Diagonal),
            "general" => Ok(DiffusionShape::General),
            other => Err(SigflowError::Config(format!(
                "unknown diffusion shape '{other}' (expected diagonal|general)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DiffusionShape::Diagonal => "diagonal",
            DiffusionShape::General => "general",
        }
    }
}

/// Sampled Wiener increments on a uniform grid.
#[derive(Debug, Clone)]
pub struct BrownianPath {
    pub dt: f64,
    /// n x d_w increments, each ~ N(0, dt I).
    pub increments: Vec<Vec<f64>>,
    pub seed: u64,
}

impl BrownianPath {
    pub fn steps(&self) -> usize {
        self.increments.len()
    }

    pub fn noise_channels(&self) -> usize {
        self.increments.first().map_or(0, Vec::len)
    }
}

pub fn sample_brownian(n: usize, dt: f64, d_w: usize, seed: u64) -> Result<BrownianPath> {
    if dt <= 0.0 {
        return Err(SigflowError::Config("brownian dt must be positive".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let scale = dt.sqrt();
    let increments = (0..n)
        .map(|_| {
            (0..d_w)
                .map(|_| {
                    let z: f64 = rng.sample(StandardNormal);
                    z * scale
                })
                .collect()
        })
        .collect();
    Ok(BrownianPath {
        dt,
        increments,
        seed,
    })
}

/// Paired solver states. `zhat` is the auxiliary state that makes the
/// Heun step algebraically invertible.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverState {
    pub z: Vec<f64>,
    pub zhat: Vec<f64>,
    pub step: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveMode {
    Reversible,
    StoreAll,
}

/// Instrumented accounting of network activation tapes. Memory claims are
/// tested on these counters, not on OS memory.
#[derive(Debug, Clone, Default)]
pub struct TapeStats {
    pub live: usize,
    pub live_bytes: usize,
    pub peak_live: usize,
    pub peak_bytes: usize,
    pub total_allocs: usize,
    /// Tapes still held when the forward pass returns.
    pub retained: usize,
    pub retained_bytes: usize,
}

impl TapeStats {
    fn alloc(&mut self, bytes: usize) {
        self.live += 1;
        self.live_bytes += bytes;
        self.total_allocs += 1;
        self.peak_live = self.peak_live.max(self.live);
        self.peak_bytes = self.peak_bytes.max(self.live_bytes);
    }

    fn free(&mut self, bytes: usize) {
        self.live -= 1;
        self.live_bytes -= bytes;
    }

    fn mark_retained(&mut self) {
        self.retained = self.live;
        self.retained_bytes = self.live_bytes;
    }
}

/// The vector fields of the SDE: drift (1+d_z) -> d_z and diffusion
/// (1+d_z) -> d_z or d_z*d_w networks, both taking [t, z] as input.
#[derive(Debug, Clone)]
pub struct SdeFields<'a> {
    pub drift: &'a MlpParams,
    pub diffusion: &'a MlpParams,
    pub shape: DiffusionShape,
    pub d_z: usize,
    pub d_w: usize,
}

impl<'a> SdeFields<'a> {
    pub fn new(
        drift: &'a MlpParams,
        diffusion: &'a MlpParams,
        shape: DiffusionShape,
        d_z: usize,
        d_w: usize,
    ) -> Result<Self> {
        if drift.input_size() != 1 + d_z || drift.output_size() != d_z {
            return Err(SigflowError::Shape(format!(
                "drift network must map 1+{d_z} -> {d_z}"
            )));
        }
        let want_out = match shape {
            DiffusionShape::Diagonal => d_z,
            DiffusionShape::General => d_z * d_w,
        };
        if shape == DiffusionShape::Diagonal && d_w != d_z {
            return Err(SigflowError::Shape(
                "diagonal diffusion requires d_w == d_z".into(),
            ));
        }
        if diffusion.input_size() != 1 + d_z || diffusion.output_size() != want_out {
            return Err(SigflowError::Shape(format!(
                "diffusion network must map 1+{d_z} -> {want_out}"
            )));
        }
        Ok(SdeFields {
            drift,
            diffusion,
            shape,
            d_z,
            d_w,
        })
    }

    /// drift(t,z)*dt + diffusion(t,z).dw, returning the two tapes.
    fn eval(&self, t: f64, z: &[f64], dt: f64, dw: &[f64]) -> Result<FieldEval> {
        let mut input = Vec::with_capacity(1 + z.len());
        input.push(t);
        input.extend_from_slice(z);
        let (f_out, f_tape) = mlp_forward(self.drift, &input)?;
        let (g_out, g_tape) = mlp_forward(self.diffusion, &input)?;
        let mut combined = vec![0.0f64; self.d_z];
        for i in 0..self.d_z {
            combined[i] = f_out[i] * dt;
        }
        match self.shape {
            DiffusionShape::Diagonal => {
                for i in 0..self.d_z {
                    combined[i] += g_out[i] * dw[i];
                }
            }
            DiffusionShape::General => {
                for i in 0..self.d_z {
                    let row = &g_out[i * self.d_w..(i + 1) * self.d_w];
                    for (r, &dwr) in dw.iter().enumerate() {
                        combined[i] += row[r] * dwr;
                    }
                }
            }
        }
        Ok(FieldEval {
            combined,
            f_tape,
            g_tape,
        })
    }

    /// Pull a cotangent on the combined increment back through both
    /// networks, accumulating parameter gradients and returning the
    /// cotangent on z.
    fn backward(
        &self,
        eval: &FieldEval,
        cot: &[f64],
        dt: f64,
        dw: &[f64],
        drift_grad: &mut [f64],
        diff_grad: &mut [f64],
    ) -> Result<Vec<f64>> {
        let f_cot: Vec<f64> = cot.iter().map(|c| c * dt).collect();
        let g_cot: Vec<f64> = match self.shape {
            DiffusionShape::Diagonal => cot.iter().zip(dw).map(|(c, w)| c * w).collect(),
            DiffusionShape::General => {
                let mut out = vec![0.0f64; self.d_z * self.d_w];
                for i in 0..self.d_z {
                    for (r, &dwr) in dw.iter().enumerate() {
                        out[i * self.d_w + r] = cot[i] * dwr;
                    }
                }
                out
            }
        };
        let din_f = mlp_backward(self.drift, &eval.f_tape, &f_cot, drift_grad)?;
        let din_g = mlp_backward(self.diffusion, &eval.g_tape, &g_cot, diff_grad)?;
        // drop the time coordinate of the input cotangent
        Ok(din_f[1..]
            .iter()
            .zip(&din_g[1..])
            .map(|(a, b)| a + b)
            .collect())
    }
}

struct FieldEval {
    combined: Vec<f64>,
    f_tape: MlpTape,
    g_tape: MlpTape,
}

impl FieldEval {
    fn tape_bytes(&self) -> usize {
        self.f_tape.byte_size() + self.g_tape.byte_size()
    }
}

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(SigflowError::Numerical(format!(
            "{what} became non-finite (SDE blow-up)"
        )))
    }
}

/// One reversible Heun step:
///   zhat' = 2z - zhat + f(t, zhat) dt + g(t, zhat) dw
///   z'    = z + [f(t, zhat) + f(t', zhat')] dt/2 + [g(t, zhat) + g(t', zhat')] dw/2
pub fn reversible_heun_forward_step(
    fields: &SdeFields,
    state: &SolverState,
    t: f64,
    dt: f64,
    dw: &[f64],
) -> Result<SolverState> {
    let (next, _, _) = forward_step_with_tapes(fields, state, t, dt, dw)?;
    Ok(next)
}

fn forward_step_with_tapes(
    fields: &SdeFields,
    state: &SolverState,
    t: f64,
    dt: f64,
    dw: &[f64],
) -> Result<(SolverState, FieldEval, FieldEval)> {
    let a = fields.eval(t, &state.zhat, dt, dw)?;
    let mut zhat_next = vec![0.0f64; fields.d_z];
    for i in 0..fields.d_z {
        zhat_next[i] = 2.0 * state.z[i] - state.zhat[i] + a.combined[i];
    }
    check_finite(&zhat_next, "solver state")?;
    let b = fields.eval(t + dt, &zhat_next, dt, dw)?;
    let mut z_next = vec![0.0f64; fields.d_z];
    for i in 0..fields.d_z {
        z_next[i] = state.z[i] + 0.5 * (a.combined[i] + b.combined[i]);
    }
    check_finite(&z_next, "solver state")?;
    Ok((
        SolverState {
            z: z_next,
            zhat: zhat_next,
            step: state.step + 1,
        },
        a,
        b,
    ))
}

/// Algebraic inversion of the forward step: recover state i from state i+1
/// and the same Wiener increment.
pub fn reversible_heun_reverse_step(
    fields: &SdeFields,
    state_next: &SolverState,
    t_next: f64,
    dt: f64,
    dw: &[f64],
) -> Result<SolverState> {
    let b = fields.eval(t_next, &state_next.zhat, dt, dw)?;
    let mut zhat = vec![0.0f64; fields.d_z];
    for i in 0..fields.d_z {
        zhat[i] = 2.0 * state_next.z[i] - state_next.zhat[i] - b.combined[i];
    }
    check_finite(&zhat, "solver state")?;
    let a = fields.eval(t_next - dt, &zhat, dt, dw)?;
    let mut z = vec![0.0f64; fields.d_z];
    for i in 0..fields.d_z {
        z[i] = state_next.z[i] - 0.5 * (a.combined[i] + b.combined[i]);
    }
    check_finite(&z, "solver state")?;
    Ok(SolverState {
        z,
        zhat,
        step: state_next.step - 1,
    })
}

pub struct SolveResult {
    pub mode: SolveMode,
    /// z at every grid point, z_0..z_n.
    pub trajectory: Vec<Vec<f64>>,
    pub final_state: SolverState,
    tapes: Vec<(FieldEval, FieldEval)>,
}

/// Integrate forward from z0 across the Brownian grid. Reversible mode
/// retains no tapes; StoreAll retains both field evaluations per step.
pub fn solve(
    fields: &SdeFields,
    z0: &[f64],
    brownian: &BrownianPath,
    mode: SolveMode,
    stats: &mut TapeStats,
) -> Result<SolveResult> {
    if z0.len() != fields.d_z {
        return Err(SigflowError::Shape(format!(
            "initial state has {} entries, expected {}",
            z0.len(),
            fields.d_z
        )));
    }
    let mut state = SolverState {
        z: z0.to_vec(),
        zhat: z0.to_vec(),
        step: 0,
    };
    let dt = brownian.dt;
    let mut trajectory = vec![z0.to_vec()];
    let mut tapes = Vec::new();
    for (i, dw) in brownian.increments.iter().enumerate() {
        let t = i as f64 * dt;
        let (next, a, b) = forward_step_with_tapes(fields, &state, t, dt, dw)?;
        stats.alloc(a.tape_bytes());
        stats.alloc(b.tape_bytes());
        match mode {
            SolveMode::StoreAll => tapes.push((a, b)),
            SolveMode::Reversible => {
                stats.free(a.tape_bytes());
                stats.free(b.tape_bytes());
            }
        }
        trajectory.push(next.z.clone());
        state = next;
    }
    stats.mark_retained();
    Ok(SolveResult {
        mode,
        trajectory,
        final_state: state,
        tapes,
    })
}

/// Gradients of a scalar loss through a solve, given cotangents on each
/// trajectory point.
#[derive(Debug, Clone)]
pub struct SolveGrads {
    pub z0: Vec<f64>,
    pub drift: Vec<f64>,
    pub diffusion: Vec<f64>,
}

/// Reverse-mode sweep over the reversible Heun recurrence.
///
/// Per step, with A = f(t_i, zhat_i) dt + g(t_i, zhat_i) dw and
/// B = f(t_{i+1}, zhat_{i+1}) dt + g(t_{i+1}, zhat_{i+1}) dw, the adjoints
/// (lam on z, mu on zhat) propagate as
///   mu_tot  = mu + (1/2) B'^T lam
///   dz_i    = lam + 2 mu_tot
///   dzhat_i = -mu_tot + A'^T (mu_tot + lam/2)
/// In Reversible mode the states are reconstructed by reverse steps and the
/// two field evaluations are re-run locally, so only one step's tapes are
/// ever live; StoreAll replays the stored tapes.
pub fn backprop_solve(
    fields: &SdeFields,
    result: &SolveResult,
    brownian: &BrownianPath,
    traj_cotangent: &[Vec<f64>],
    stats: &mut TapeStats,
) -> Result<SolveGrads> {
    let n = brownian.steps();
    if traj_cotangent.len() != n + 1 {
        return Err(SigflowError::Shape(format!(
            "need {} trajectory cotangents, got {}",
            n + 1,
            traj_cotangent.len()
        )));
    }
    let d_z = fields.d_z;
    let dt = brownian.dt;
    let mut drift_grad = vec![0.0f64; fields.drift.param_count()];
    let mut diff_grad = vec![0.0f64; fields.diffusion.param_count()];

    let mut lam = traj_cotangent[n].clone();
    let mut mu = vec![0.0f64; d_z];
    let mut state = result.final_state.clone();

    for i in (0..n).rev() {
        let dw = &brownian.increments[i];
        match result.mode {
            SolveMode::StoreAll => {
                let (a, b) = &result.tapes[i];
                let (dlam, dmu) = adjoint_step(
                    fields, a, b, &lam, &mu, dt, dw, &mut drift_grad, &mut diff_grad,
                )?;
                lam = dlam;
                mu = dmu;
            }
            SolveMode::Reversible => {
                // recompute both field evaluations and the previous state
                let t_next = (i + 1) as f64 * dt;
                let b = fields.eval(t_next, &state.zhat, dt, dw)?;
                stats.alloc(b.tape_bytes());
                let mut zhat_prev = vec![0.0f64; d_z];
                for j in 0..d_z {
                    zhat_prev[j] = 2.0 * state.z[j] - state.zhat[j] - b.combined[j];
                }
                check_finite(&zhat_prev, "reconstructed state")?;
                let a = fields.eval(t_next - dt, &zhat_prev, dt, dw)?;
                stats.alloc(a.tape_bytes());
                let mut z_prev = vec![0.0f64; d_z];
                for j in 0..d_z {
                    z_prev[j] = state.z[j] - 0.5 * (a.combined[j] + b.combined[j]);
                }
                check_finite(&z_prev, "reconstructed state")?;
                let (dlam, dmu) = adjoint_step(
                    fields, &a, &b, &lam, &mu, dt, dw, &mut drift_grad, &mut diff_grad,
                )?;
                lam = dlam;
                mu = dmu;
                stats.free(a.tape_bytes());
                stats.free(b.tape_bytes());
                state = SolverState {
                    z: z_prev,
                    zhat: zhat_prev,
                    step: i,
                };
            }
        }
        // z_i is a trajectory output; inject its loss cotangent
        for (l, c) in lam.iter_mut().zip(&traj_cotangent[i]) {
            *l += c;
        }
    }
    // zhat_0 = z_0, so both adjoints land on z0
    let z0_grad: Vec<f64> = lam.iter().zip(&mu).map(|(a, b)| a + b).collect();
    check_finite(&z0_grad, "gradient")?;
    check_finite(&drift_grad, "gradient")?;
    check_finite(&diff_grad, "gradient")?;
    Ok(SolveGrads {
        z0: z0_grad,
        drift: drift_grad,
        diffusion: diff_grad,
    })
}

#[allow(clippy::too_many_arguments)]
fn adjoint_step(
    fields: &SdeFields,
    a: &FieldEval,
    b: &FieldEval,
    lam: &[f64],
    mu: &[f64],
    dt: f64,
    dw: &[f64],
    drift_grad: &mut [f64],
    diff_grad: &mut [f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let d_z = fields.d_z;
    // mu_tot = mu + (1/2) B'^T lam, with B's parameter gradients
    let half_lam: Vec<f64> = lam.iter().map(|v| 0.5 * v).collect();
    let b_pullback = fields.backward(b, &half_lam, dt, dw, drift_grad, diff_grad)?;
    let mut mu_tot = mu.to_vec();
    for j in 0..d_z {
        mu_tot[j] += b_pullback[j];
    }
    // A receives cotangent (mu_tot + lam/2)
    let a_cot: Vec<f64> = mu_tot.iter().zip(&half_lam).map(|(m, h)| m + h).collect();
    let a_pullback = fields.backward(a, &a_cot, dt, dw, drift_grad, diff_grad)?;
    let mut dlam = vec![0.0f64; d_z];
    let mut dmu = vec![0.0f64; d_z];
    for j in 0..d_z {
        dlam[j] = lam[j] + 2.0 * mu_tot[j];
        dmu[j] = -mu_tot[j] + a_pullback[j];
    }
    Ok((dlam, dmu))
}
