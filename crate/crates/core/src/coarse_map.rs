//! Restriction, lifting and the healed coarse map `P(t; sigma) = R(M(t; L(sigma)))`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::integrator::IntegratorSettings;
use crate::micro_model::{self, headways, MicroState, ModelParams};

/// Sample standard deviation of the headways about the mean headway `L/N`.
pub fn restrict(state: &MicroState, params: &ModelParams) -> f64 {
    let mean = params.mean_headway();
    let hw = headways(state, params);
    let ss: f64 = hw.iter().map(|d| (d - mean) * (d - mean)).sum();
    (ss / (hw.len() - 1) as f64).sqrt()
}

/// Reference profile used by the lifting `L_p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiftContext {
    reference: MicroState,
    reference_sigma: f64,
    /// Reference headways minus their mean.
    centered: Vec<f64>,
    mean: f64,
    p: f64,
}

impl LiftContext {
    pub fn new(reference: MicroState, params: &ModelParams, p: f64) -> Result<Self> {
        if !(p > 0.0) || !p.is_finite() {
            return Err(invalid("p", "lifting bias must be positive"));
        }
        if reference.cars() != params.cars {
            return Err(Error::DimensionMismatch {
                expected: params.cars,
                actual: reference.cars(),
            });
        }
        let reference_sigma = restrict(&reference, params);
        if !(reference_sigma > 0.0) {
            return Err(Error::FlatReference {
                sigma: reference_sigma,
            });
        }
        let hw = headways(&reference, params);
        let mean = hw.iter().sum::<f64>() / hw.len() as f64;
        let centered = hw.iter().map(|d| d - mean).collect();
        Ok(Self {
            reference,
            reference_sigma,
            centered,
            mean,
            p,
        })
    }

    pub fn reference(&self) -> &MicroState {
        &self.reference
    }

    pub fn reference_sigma(&self) -> f64 {
        self.reference_sigma
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    /// Same bias, new reference profile.
    pub fn with_reference(&self, reference: MicroState, params: &ModelParams) -> Result<Self> {
        Self::new(reference, params, self.p)
    }
}

/// Lifting `L_p(sigma)`: rescales the reference headway profile so that its
/// restriction becomes `p * sigma`, puts car 1 at the origin and sets every
/// car to its optimal velocity.
pub fn lift(sigma: f64, ctx: &LiftContext, params: &ModelParams) -> Result<MicroState> {
    if ctx.centered.len() != params.cars {
        return Err(Error::DimensionMismatch {
            expected: params.cars,
            actual: ctx.centered.len(),
        });
    }
    let factor = ctx.p * sigma / ctx.reference_sigma;
    let n = params.cars;
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut pos = 0.0;
    for c in &ctx.centered {
        let dx = factor * c + ctx.mean;
        x.push(pos);
        y.push(params.ov_velocity(dx));
        pos += dx;
    }
    Ok(MicroState { x, y })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoarseSettings {
    /// Healing time.
    pub t_skip: f64,
    /// Burst length used in the finite-difference macroscopic right-hand side.
    pub delta: f64,
    pub d_sigma: f64,
    pub d_v0: f64,
    pub d_h: f64,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    /// Newton relaxation.
    pub nu: f64,
    pub integrator: IntegratorSettings,
}

impl Default for CoarseSettings {
    fn default() -> Self {
        Self {
            t_skip: 300.0,
            delta: 2000.0,
            d_sigma: 1e-3,
            d_v0: 1e-3,
            d_h: 1e-3,
            newton_tol: 1e-7,
            newton_max_iter: 12,
            nu: 1.0,
            integrator: IntegratorSettings::default(),
        }
    }
}

impl CoarseSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_skip > 0.0) {
            return Err(invalid("t_skip", "must be positive"));
        }
        if !(self.delta > 0.0) {
            return Err(invalid("delta", "must be positive"));
        }
        for (name, v) in [
            ("d_sigma", self.d_sigma),
            ("d_v0", self.d_v0),
            ("d_h", self.d_h),
            ("newton_tol", self.newton_tol),
        ] {
            if !(v > 0.0) {
                return Err(invalid(name, "must be positive"));
            }
        }
        if self.newton_max_iter == 0 {
            return Err(invalid("newton_max_iter", "must be positive"));
        }
        if !(self.nu > 0.0 && self.nu <= 1.0) {
            return Err(invalid("nu", "must lie in (0, 1]"));
        }
        self.integrator.validate()
    }
}

/// `P(t; sigma)`.
pub fn coarse_trajectory(
    sigma: f64,
    ctx: &LiftContext,
    params: &ModelParams,
    t: f64,
    settings: &CoarseSettings,
) -> Result<f64> {
    let u = lift(sigma, ctx, params)?;
    let end = micro_model::integrate(&u, params, t, &settings.integrator)?;
    Ok(restrict(&end, params))
}

/// `P(t; sigma)` sampled at several (sorted) times from a single run.
pub fn coarse_samples(
    sigma: f64,
    ctx: &LiftContext,
    params: &ModelParams,
    times: &[f64],
    settings: &CoarseSettings,
) -> Result<Vec<f64>> {
    let u = lift(sigma, ctx, params)?;
    let traj = micro_model::integrate_checkpoints(&u, params, times, &settings.integrator)?;
    Ok(traj.states.iter().map(|s| restrict(s, params)).collect())
}

/// `sigma_healed = P(t_skip; sigma)`.
pub fn healed_sigma(
    sigma: f64,
    ctx: &LiftContext,
    params: &ModelParams,
    settings: &CoarseSettings,
) -> Result<f64> {
    coarse_trajectory(sigma, ctx, params, settings.t_skip, settings)
}

/// One burst of length `t_skip + delta`, checkpointed at `t_skip`.
#[derive(Debug, Clone)]
pub struct MacroEval {
    /// `P(t_skip; sigma)`.
    pub healed: f64,
    /// `P(t_skip + delta; sigma)`.
    pub advanced: f64,
    pub delta: f64,
    /// Microscopic state `M(t_skip; L(sigma))`.
    pub healed_state: MicroState,
}

impl MacroEval {
    /// Finite-difference macroscopic right-hand side.
    pub fn rate(&self) -> f64 {
        (self.advanced - self.healed) / self.delta
    }

    /// `delta * F = P(t_skip + delta) - P(t_skip)`, in units of sigma.
    pub fn increment(&self) -> f64 {
        self.advanced - self.healed
    }
}

pub fn macro_eval(
    sigma: f64,
    ctx: &LiftContext,
    params: &ModelParams,
    settings: &CoarseSettings,
) -> Result<MacroEval> {
    let u = lift(sigma, ctx, params)?;
    let times = [settings.t_skip, settings.t_skip + settings.delta];
    let mut traj = micro_model::integrate_checkpoints(&u, params, &times, &settings.integrator)?;
    let end = traj.states.pop().expect("two checkpoints");
    let healed_state = traj.states.pop().expect("two checkpoints");
    Ok(MacroEval {
        healed: restrict(&healed_state, params),
        advanced: restrict(&end, params),
        delta: settings.delta,
        healed_state,
    })
}

/// `F(sigma) = [P(t_skip + delta; sigma) - P(t_skip; sigma)] / delta`.
pub fn macro_rhs(
    sigma: f64,
    ctx: &LiftContext,
    params: &ModelParams,
    settings: &CoarseSettings,
) -> Result<f64> {
    Ok(macro_eval(sigma, ctx, params, settings)?.rate())
}
