//! A three-dimensional slow-fast test system with one slow variable, used to
//! measure how the implicit coarse stepper converges in the healing time.
//!
//! ```text
//! x'  = eps (x - x^3 + y1)
//! y1' = -k (y1 - x^2)
//! y2' = -2k (y2 - sin x)
//! ```
//!
//! Restriction `R(u) = x + mix * y1`, lifting `L(x) = (x, x^2 + c1, sin x + c2)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::linear_slope;
use crate::error::{invalid, Result};
use crate::integrator::{self, IntegratorSettings, OdeSystem};
use crate::solvers::{newton_solve, NewtonOptions};

/// Errors at or below this are treated as measurement floor.
pub const ERROR_FLOOR: f64 = 1e-13;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToySystem {
    pub epsilon: f64,
    pub fast_rate: f64,
    /// `(c1, c2)` in the lifting.
    pub lift_offsets: (f64, f64),
    pub restriction_mix: f64,
}

impl Default for ToySystem {
    fn default() -> Self {
        Self {
            epsilon: 0.01,
            fast_rate: 1.0,
            lift_offsets: (0.3, -0.2),
            restriction_mix: 0.1,
        }
    }
}

impl ToySystem {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon <= 0.1) {
            return Err(invalid("epsilon", "must lie in (0, 0.1]"));
        }
        if !(self.fast_rate > 0.0) {
            return Err(invalid("fast_rate", "must be positive"));
        }
        if !self.restriction_mix.is_finite()
            || !self.lift_offsets.0.is_finite()
            || !self.lift_offsets.1.is_finite()
        {
            return Err(invalid("lift_offsets", "must be finite"));
        }
        Ok(())
    }

    /// Healing time used for reference values.
    pub fn reference_t_skip(&self) -> f64 {
        50.0 / self.fast_rate
    }

    pub fn restrict(&self, u: &[f64; 3]) -> f64 {
        u[0] + self.restriction_mix * u[1]
    }

    pub fn lift(&self, x: f64) -> [f64; 3] {
        [x, x * x + self.lift_offsets.0, x.sin() + self.lift_offsets.1]
    }
}

pub fn toy_rhs(u: &[f64; 3], sys: &ToySystem) -> [f64; 3] {
    let [x, y1, y2] = *u;
    let k = sys.fast_rate;
    [
        sys.epsilon * (x - x * x * x + y1),
        -k * (y1 - x * x),
        -2.0 * k * (y2 - x.sin()),
    ]
}

impl OdeSystem for ToySystem {
    fn dim(&self) -> usize {
        3
    }

    fn rhs(&self, u: &[f64], du: &mut [f64]) {
        du.copy_from_slice(&toy_rhs(&[u[0], u[1], u[2]], self));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToySettings {
    pub integrator: IntegratorSettings,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    pub fd_step: f64,
}

impl Default for ToySettings {
    fn default() -> Self {
        Self {
            integrator: IntegratorSettings {
                abs_tol: 1e-14,
                rel_tol: 1e-13,
                ..IntegratorSettings::default()
            },
            newton_tol: 1e-14,
            newton_max_iter: 20,
            fd_step: 1e-6,
        }
    }
}

/// `R(M(t; L(x)))` at every time in `times`.
pub fn toy_samples(x: f64, times: &[f64], sys: &ToySystem, settings: &ToySettings) -> Result<Vec<f64>> {
    let (out, _) = integrator::integrate(sys, &sys.lift(x), times, &settings.integrator)?;
    Ok(out.iter().map(|u| sys.restrict(&[u[0], u[1], u[2]])).collect())
}

/// Implicit stepper `y` with `R(M(t_skip; L(y))) = R(M(t_skip + delta; L(x)))`.
pub fn toy_implicit_step(
    x: f64,
    delta: f64,
    t_skip: f64,
    sys: &ToySystem,
    settings: &ToySettings,
) -> Result<f64> {
    sys.validate()?;
    if !(delta >= 0.0) || !(t_skip >= 0.0) {
        return Err(invalid("delta", "delta and t_skip must be non-negative"));
    }
    if delta == 0.0 {
        return Ok(x);
    }
    let target = toy_samples(x, &[t_skip + delta], sys, settings)?[0];
    let opts = NewtonOptions {
        tol: settings.newton_tol,
        max_iter: settings.newton_max_iter,
        nu: 1.0,
    };
    let report = newton_solve(
        |y: &[f64]| Ok(vec![toy_samples(y[0], &[t_skip], sys, settings)?[0] - target]),
        &[x],
        &[settings.fd_step],
        &opts,
    )?;
    // Round-off can keep the residual just above a tolerance at machine
    // precision; accept anything at the measurement floor.
    if report.converged || report.residual_norm <= ERROR_FLOOR {
        Ok(report.solution[0])
    } else {
        report.require_converged().map(|r| r.solution[0])
    }
}

/// Slow flow map `Phi*(delta; x)` approximated with a healing time of
/// `t_skip_ref`, which must be at least `40 / fast_rate`.
pub fn toy_reference_flow(
    x: f64,
    delta: f64,
    sys: &ToySystem,
    t_skip_ref: f64,
    settings: &ToySettings,
) -> Result<f64> {
    if !(t_skip_ref >= 40.0 / sys.fast_rate) {
        return Err(invalid("t_skip_ref", "must be at least 40 / fast_rate"));
    }
    toy_implicit_step(x, delta, t_skip_ref, sys, settings)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub t_skip: f64,
    pub value: f64,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceScan {
    pub system: ToySystem,
    pub x: f64,
    pub delta: f64,
    pub reference: f64,
    pub rows: Vec<ConvergenceRow>,
    /// Least-squares slope of `ln(error)` against `t_skip` over rows above
    /// [`ERROR_FLOOR`]; NaN when fewer than two rows qualify.
    pub slope: f64,
}

/// Error of the implicit stepper against the reference flow for every
/// healing time in `tskip_list`.
pub fn convergence_scan(
    x: f64,
    delta: f64,
    sys: &ToySystem,
    tskip_list: &[f64],
    settings: &ToySettings,
) -> Result<ConvergenceScan> {
    let reference = toy_reference_flow(x, delta, sys, sys.reference_t_skip(), settings)?;
    let rows = tskip_list
        .par_iter()
        .map(|&t_skip| {
            let value = toy_implicit_step(x, delta, t_skip, sys, settings)?;
            Ok(ConvergenceRow {
                t_skip,
                value,
                error: (value - reference).abs(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.error > ERROR_FLOOR)
        .map(|r| (r.t_skip, r.error.ln()))
        .collect();
    let slope = if pts.len() >= 2 { linear_slope(&pts)? } else { f64::NAN };
    Ok(ConvergenceScan {
        system: *sys,
        x,
        delta,
        reference,
        rows,
        slope,
    })
}
