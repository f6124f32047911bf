//! Integrators for the augmented flow state `(z, ∫ trace dt)`.
//!
//! Dynamics return the state derivative and the per-row Jacobian trace.
//! [`rk4_step`] is generic over [`Value`] so the same arithmetic runs on a
//! tape during training; [`integrate_fixed`] and [`integrate_adaptive`] work
//! on plain tensors and track divergence per row.

use serde::{Deserialize, Serialize};

use crate::autodiff::Value;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverMethod {
    Rk4Fixed,
    Dopri5Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub method: SolverMethod,
    /// Steps of the fixed-step solver.
    pub step_count: usize,
    pub rtol: f64,
    pub atol: f64,
    /// Attempted-step budget of the adaptive solver, per sample.
    pub max_steps: usize,
    /// A state component above this magnitude counts as divergence.
    pub divergence_bound: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: SolverMethod::Rk4Fixed,
            step_count: 40,
            rtol: 1e-5,
            atol: 1e-5,
            max_steps: 10_000,
            divergence_bound: 1e6,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.step_count == 0 {
            return Err(Error::contract("solver step_count must be at least 1"));
        }
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(Error::contract("solver tolerances must be positive"));
        }
        if self.max_steps == 0 || !(self.divergence_bound > 0.0) {
            return Err(Error::contract("solver guards must be positive"));
        }
        Ok(())
    }
}

/// Outcome of integrating a batch.
#[derive(Debug, Clone)]
pub struct Integration {
    pub state: Tensor,
    /// `∫ trace dt` from the start to the end time, per row (signed by the
    /// direction of integration).
    pub trace_integral: Vec<f64>,
    pub diverged: Vec<bool>,
    /// Pseudo-time at which each diverged row was flagged.
    pub diverged_at: Vec<Option<f64>>,
}

/// One classical Runge–Kutta step of size `h` (may be negative). Returns the
/// new state and the step's contribution to `∫ trace dt`.
pub fn rk4_step<V, F>(f: &F, z: &V, t: f64, h: f64) -> Result<(V, V)>
where
    V: Value,
    F: Fn(&V, f64) -> Result<(V, V)>,
{
    let (k1, r1) = f(z, t)?;
    let (k2, r2) = f(&z.add(&k1.scale(h / 2.0))?, t + h / 2.0)?;
    let (k3, r3) = f(&z.add(&k2.scale(h / 2.0))?, t + h / 2.0)?;
    let (k4, r4) = f(&z.add(&k3.scale(h))?, t + h)?;
    let dz = k1.add(&k2.scale(2.0))?.add(&k3.scale(2.0))?.add(&k4)?;
    let dr = r1.add(&r2.scale(2.0))?.add(&r3.scale(2.0))?.add(&r4)?;
    Ok((z.add(&dz.scale(h / 6.0))?, dr.scale(h / 6.0)))
}

fn row_ok(row: &[f64], bound: f64) -> bool {
    row.iter().all(|v| v.is_finite() && v.abs() <= bound)
}

/// Fixed-step RK4 from `t_start` to `t_end`. A row whose state leaves the
/// finite region bounded by `bound` is flagged, zeroed and frozen so it
/// cannot disturb the others.
pub fn integrate_fixed<F>(f: &F, z0: &Tensor, t_start: f64, t_end: f64, steps: usize, bound: f64) -> Result<Integration>
where
    F: Fn(&Tensor, f64) -> Result<(Tensor, Tensor)>,
{
    if steps == 0 {
        return Err(Error::contract("at least one integration step"));
    }
    let n = z0.rows();
    let h = (t_end - t_start) / steps as f64;
    let mut z = z0.clone();
    let mut acc = vec![0.0; n];
    let mut diverged_at: Vec<Option<f64>> = vec![None; n];
    for i in 0..n {
        if !row_ok(z.row(i), bound) {
            diverged_at[i] = Some(t_start);
            z.row_mut(i).fill(0.0);
        }
    }
    for s in 0..steps {
        let t = t_start + s as f64 * h;
        let (next, inc) = rk4_step(f, &z, t, h)?;
        z = next;
        for i in 0..n {
            if diverged_at[i].is_some() {
                z.row_mut(i).fill(0.0);
                continue;
            }
            acc[i] += inc.data()[i];
            if !row_ok(z.row(i), bound) || !acc[i].is_finite() {
                diverged_at[i] = Some(t + h);
                z.row_mut(i).fill(0.0);
            }
        }
    }
    Ok(finish(z, acc, diverged_at))
}

fn finish(state: Tensor, mut acc: Vec<f64>, diverged_at: Vec<Option<f64>>) -> Integration {
    let diverged: Vec<bool> = diverged_at.iter().map(Option::is_some).collect();
    for (a, &d) in acc.iter_mut().zip(&diverged) {
        if d {
            *a = f64::NAN;
        }
    }
    Integration {
        state,
        trace_integral: acc,
        diverged,
        diverged_at,
    }
}

// Dormand–Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Adaptive Dormand–Prince integration, one row at a time. A row is flagged
/// as diverged when its state leaves the bound, turns non-finite, or needs
/// more than `config.max_steps` attempted steps.
pub fn integrate_adaptive<F>(f: &F, z0: &Tensor, t_start: f64, t_end: f64, config: &SolverConfig) -> Result<Integration>
where
    F: Fn(&Tensor, f64) -> Result<(Tensor, Tensor)>,
{
    config.validate()?;
    let (n, d) = (z0.rows(), z0.cols());
    let mut state = Tensor::zeros(z0.shape());
    let mut acc = vec![0.0; n];
    let mut diverged_at = vec![None; n];
    // The augmented system: y = [z, ∫trace], dy = [dz, trace].
    let deriv = |y: &[f64], t: f64| -> Result<Vec<f64>> {
        let z = Tensor::new(vec![1, d], y[..d].to_vec())?;
        let (dz, tr) = f(&z, t)?;
        let mut out = dz.into_data();
        out.push(tr.data()[0]);
        Ok(out)
    };
    for i in 0..n {
        let mut y: Vec<f64> = z0.row(i).to_vec();
        y.push(0.0);
        match dopri5_row(&deriv, y, t_start, t_end, config)? {
            Ok(y) => {
                state.row_mut(i).copy_from_slice(&y[..d]);
                acc[i] = y[d];
            }
            Err(t) => diverged_at[i] = Some(t),
        }
    }
    Ok(finish(state, acc, diverged_at))
}

/// Integrates one augmented row; the inner `Err` carries the pseudo-time at
/// which the row diverged.
fn dopri5_row<F>(f: &F, mut y: Vec<f64>, t0: f64, t1: f64, config: &SolverConfig) -> Result<Result<Vec<f64>, f64>>
where
    F: Fn(&[f64], f64) -> Result<Vec<f64>>,
{
    let span = t1 - t0;
    if span == 0.0 {
        return Ok(Ok(y));
    }
    let dir = span.signum();
    let n = y.len();
    let mut t = t0;
    let mut h = span / config.step_count as f64;
    let mut k: Vec<Vec<f64>> = vec![Vec::new(); 7];
    let mut attempts = 0usize;
    k[0] = f(&y, t)?;
    while (t1 - t) * dir > 1e-14 * span.abs() {
        attempts += 1;
        if attempts > config.max_steps {
            return Ok(Err(t));
        }
        if (t + h - t1) * dir > 0.0 {
            h = t1 - t;
        }
        for s in 1..7 {
            let ys: Vec<f64> = (0..n)
                .map(|j| y[j] + h * (0..s).map(|r| A[s][r] * k[r][j]).sum::<f64>())
                .collect();
            k[s] = f(&ys, t + C[s] * h)?;
        }
        let y5: Vec<f64> = (0..n)
            .map(|j| y[j] + h * (0..7).map(|r| B5[r] * k[r][j]).sum::<f64>())
            .collect();
        let err = (0..n)
            .map(|j| {
                let e = h * (0..7).map(|r| (B5[r] - B4[r]) * k[r][j]).sum::<f64>();
                let sc = config.atol + config.rtol * y[j].abs().max(y5[j].abs());
                (e / sc).powi(2)
            })
            .sum::<f64>()
            / n as f64;
        let err = err.sqrt();
        if !err.is_finite() || !y5.iter().all(|v| v.is_finite()) {
            return Ok(Err(t));
        }
        if err <= 1.0 {
            t += h;
            y = y5;
            if !row_ok(&y[..n - 1], config.divergence_bound) {
                return Ok(Err(t));
            }
            // first-same-as-last
            k[0] = k[6].clone();
        }
        let factor = if err == 0.0 { 10.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 10.0) };
        h *= factor;
        if h.abs() < 1e-12 * span.abs() {
            return Ok(Err(t));
        }
    }
    Ok(Ok(y))
}
