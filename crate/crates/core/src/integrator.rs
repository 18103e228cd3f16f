//! Embedded Dormand–Prince 5(4) integrator with proportional step control.
//!
//! Works on any [`OdeSystem`] over flat `f64` slices. The final step towards
//! each requested output time is clamped so that the solution lands exactly
//! on it; no dense output is used.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Autonomous first-order system `u' = f(u)`.
pub trait OdeSystem {
    fn dim(&self) -> usize;
    fn rhs(&self, u: &[f64], du: &mut [f64]);
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratorSettings {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub initial_step: f64,
    pub max_step: f64,
    pub max_steps: usize,
}

impl Default for IntegratorSettings {
    fn default() -> Self {
        Self {
            abs_tol: 1e-8,
            rel_tol: 1e-8,
            initial_step: 1e-2,
            max_step: 10.0,
            max_steps: 50_000_000,
        }
    }
}

impl IntegratorSettings {
    pub fn with_tolerance(tol: f64) -> Self {
        Self {
            abs_tol: tol,
            rel_tol: tol,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.abs_tol > 0.0) {
            return Err(invalid("abs_tol", "must be positive"));
        }
        if !(self.rel_tol > 0.0) {
            return Err(invalid("rel_tol", "must be positive"));
        }
        if !(self.initial_step > 0.0) {
            return Err(invalid("initial_step", "must be positive"));
        }
        if !(self.max_step > 0.0) {
            return Err(invalid("max_step", "must be positive"));
        }
        if self.max_steps == 0 {
            return Err(invalid("max_steps", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IntegrationStats {
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
}

// Butcher tableau.
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
// Difference between the 5th- and 4th-order weights.
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;

/// Integrates `sys` from `u0` at t = 0 and returns the state at every time in
/// `stops` (non-decreasing, non-negative).
pub fn integrate<S: OdeSystem + ?Sized>(
    sys: &S,
    u0: &[f64],
    stops: &[f64],
    settings: &IntegratorSettings,
) -> Result<(Vec<Vec<f64>>, IntegrationStats)> {
    integrate_observed(sys, u0, stops, settings, |_, _| {})
}

/// Like [`integrate`], calling `observe(t, u)` after every accepted step.
pub fn integrate_observed<S, O>(
    sys: &S,
    u0: &[f64],
    stops: &[f64],
    settings: &IntegratorSettings,
    mut observe: O,
) -> Result<(Vec<Vec<f64>>, IntegrationStats)>
where
    S: OdeSystem + ?Sized,
    O: FnMut(f64, &[f64]),
{
    settings.validate()?;
    let n = sys.dim();
    if u0.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: u0.len(),
        });
    }
    let mut prev = 0.0;
    for &s in stops {
        if !(s >= prev) || !s.is_finite() {
            return Err(invalid("t", "output times must be finite, non-negative and sorted"));
        }
        prev = s;
    }

    let mut stats = IntegrationStats::default();
    let mut out = Vec::with_capacity(stops.len());
    let mut u = u0.to_vec();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut k5 = vec![0.0; n];
    let mut k6 = vec![0.0; n];
    let mut k7 = vec![0.0; n];
    let mut stage = vec![0.0; n];
    let mut u_new = vec![0.0; n];

    sys.rhs(&u, &mut k1);
    stats.evaluations += 1;

    let mut t = 0.0_f64;
    let mut h = settings.initial_step.min(settings.max_step);
    let mut last_rejected = false;

    for &stop in stops {
        while t < stop {
            if stats.accepted + stats.rejected >= settings.max_steps {
                return Err(Error::StepLimitExceeded {
                    max_steps: settings.max_steps,
                    t,
                });
            }
            let remaining = stop - t;
            let clamped = h >= remaining;
            let step = if clamped { remaining } else { h };
            if step < 1e-14 * t.abs().max(1.0) && !clamped {
                return Err(Error::StepSizeUnderflow { h: step, t });
            }

            for i in 0..n {
                stage[i] = u[i] + step * A21 * k1[i];
            }
            sys.rhs(&stage, &mut k2);
            for i in 0..n {
                stage[i] = u[i] + step * (A31 * k1[i] + A32 * k2[i]);
            }
            sys.rhs(&stage, &mut k3);
            for i in 0..n {
                stage[i] = u[i] + step * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
            }
            sys.rhs(&stage, &mut k4);
            for i in 0..n {
                stage[i] = u[i] + step * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
            }
            sys.rhs(&stage, &mut k5);
            for i in 0..n {
                stage[i] = u[i]
                    + step
                        * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
            }
            sys.rhs(&stage, &mut k6);
            for i in 0..n {
                u_new[i] = u[i]
                    + step
                        * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
            }
            sys.rhs(&u_new, &mut k7);
            stats.evaluations += 6;

            let mut acc = 0.0;
            for i in 0..n {
                let e = step
                    * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i]
                        + E7 * k7[i]);
                let scale = settings.abs_tol + settings.rel_tol * u[i].abs().max(u_new[i].abs());
                let r = e / scale;
                acc += r * r;
            }
            let err = (acc / n as f64).sqrt();

            if err.is_finite() && err <= 1.0 {
                stats.accepted += 1;
                t = if clamped { stop } else { t + step };
                std::mem::swap(&mut u, &mut u_new);
                std::mem::swap(&mut k1, &mut k7);
                observe(t, &u);
                let fac = if err == 0.0 {
                    FAC_MAX
                } else {
                    (SAFETY * err.powf(-0.2)).clamp(FAC_MIN, FAC_MAX)
                };
                let fac = if last_rejected { fac.min(1.0) } else { fac };
                // A clamped step says nothing about the step the controller wanted.
                if !clamped || fac < 1.0 {
                    h = (step * fac).min(settings.max_step);
                }
                last_rejected = false;
            } else {
                stats.rejected += 1;
                let fac = if err.is_finite() {
                    (SAFETY * err.powf(-0.2)).clamp(FAC_MIN, 1.0)
                } else {
                    FAC_MIN
                };
                h = step * fac;
                last_rejected = true;
                if h < 1e-14 * t.abs().max(1.0) {
                    return Err(Error::StepSizeUnderflow { h, t });
                }
            }
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { t });
        }
        out.push(u.clone());
    }
    Ok((out, stats))
}
