//! Newton iteration with finite-difference Jacobians and the coarse-level
//! solvers built on it: implicit coarse time stepping, equilibria, the
//! stability multiplier, restriction matching and projective Euler steps.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coarse_map::{coarse_samples, lift, macro_eval, CoarseSettings, LiftContext};
use crate::error::{invalid, Error, Result};
use crate::micro_model::{self, MicroState, ModelParams};

/// Jacobians whose 1-norm condition estimate exceeds this are treated as singular.
pub const MAX_CONDITION: f64 = 1e10;

/// Below this `|dP(t_skip)/dsigma|` the healing map is considered degenerate.
pub const MIN_HEALING_DERIVATIVE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewtonReport {
    pub solution: Vec<f64>,
    /// Residual at `solution`.
    pub residual: Vec<f64>,
    pub residual_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Infinity norm of the residual at every iterate, starting with `x0`.
    pub history: Vec<f64>,
}

impl NewtonReport {
    pub fn require_converged(self) -> Result<Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::NewtonNotConverged {
                iterations: self.iterations,
                residual: self.residual_norm,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub nu: f64,
}

impl From<&CoarseSettings> for NewtonOptions {
    fn from(s: &CoarseSettings) -> Self {
        Self {
            tol: s.newton_tol,
            max_iter: s.newton_max_iter,
            nu: s.nu,
        }
    }
}

/// A square nonlinear system whose Jacobian is assembled by the caller.
pub trait NewtonSystem {
    fn residual(&mut self, x: &[f64]) -> Result<Vec<f64>>;
    /// Jacobian at `x`; `r` is the residual already computed there.
    fn jacobian(&mut self, x: &[f64], r: &[f64]) -> Result<DMatrix<f64>>;
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

fn one_norm(m: &DMatrix<f64>) -> f64 {
    (0..m.ncols())
        .map(|j| m.column(j).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Solves `J d = r` for small systems, rejecting ill-conditioned `J`.
pub fn solve_checked(j: &DMatrix<f64>, r: &[f64]) -> Result<Vec<f64>> {
    if j.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularJacobian {
            condition: f64::INFINITY,
        });
    }
    let inv = j.clone().try_inverse().ok_or(Error::SingularJacobian {
        condition: f64::INFINITY,
    })?;
    let condition = one_norm(j) * one_norm(&inv);
    if !(condition <= MAX_CONDITION) {
        return Err(Error::SingularJacobian { condition });
    }
    let d = inv * DVector::from_column_slice(r);
    Ok(d.iter().copied().collect())
}

/// Relaxed Newton iteration `x <- x - nu J^{-1} r(x)`.
///
/// Returns a report with `converged == false` when the iteration budget runs
/// out; singular Jacobians and evaluation failures are errors.
pub fn newton<S: NewtonSystem + ?Sized>(
    system: &mut S,
    x0: &[f64],
    opts: &NewtonOptions,
) -> Result<NewtonReport> {
    let mut x = x0.to_vec();
    let mut r = system.residual(&x)?;
    if r.len() != x.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            actual: r.len(),
        });
    }
    let mut norm = inf_norm(&r);
    let mut history = vec![norm];
    let mut iterations = 0;
    while !(norm <= opts.tol) {
        if iterations >= opts.max_iter || !norm.is_finite() {
            return Ok(NewtonReport {
                solution: x,
                residual: r,
                residual_norm: norm,
                iterations,
                converged: false,
                history,
            });
        }
        let j = system.jacobian(&x, &r)?;
        let d = solve_checked(&j, &r)?;
        for (xi, di) in x.iter_mut().zip(&d) {
            *xi -= opts.nu * di;
        }
        iterations += 1;
        r = system.residual(&x)?;
        norm = inf_norm(&r);
        history.push(norm);
    }
    Ok(NewtonReport {
        solution: x,
        residual: r,
        residual_norm: norm,
        iterations,
        converged: true,
        history,
    })
}

/// Adapts a residual closure to [`NewtonSystem`] with forward-difference
/// Jacobian columns of step `steps[j]`.
pub struct ForwardDifference<F> {
    pub residual: F,
    pub steps: Vec<f64>,
}

impl<F> NewtonSystem for ForwardDifference<F>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    fn residual(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        (self.residual)(x)
    }

    fn jacobian(&mut self, x: &[f64], r: &[f64]) -> Result<DMatrix<f64>> {
        let n = x.len();
        let mut j = DMatrix::zeros(r.len(), n);
        for col in 0..n {
            let step = self.steps[col];
            let mut xp = x.to_vec();
            xp[col] += step;
            let rp = (self.residual)(&xp)?;
            for row in 0..r.len() {
                j[(row, col)] = (rp[row] - r[row]) / step;
            }
        }
        Ok(j)
    }
}

/// Newton on `residual(x) = 0` with forward-difference Jacobians.
pub fn newton_solve<F>(residual: F, x0: &[f64], steps: &[f64], opts: &NewtonOptions) -> Result<NewtonReport>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if steps.len() != x0.len() {
        return Err(Error::DimensionMismatch {
            expected: x0.len(),
            actual: steps.len(),
        });
    }
    let mut sys = ForwardDifference {
        residual,
        steps: steps.to_vec(),
    };
    newton(&mut sys, x0, opts)
}

/// Value and one-sided first derivatives of `F(sigma, v0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FirstOrder {
    pub f: f64,
    pub f_sigma: f64,
    pub f_v0: f64,
}

/// Evaluates `F` at `(sigma, v0)`, `(sigma + d_sigma, v0)` and `(sigma, v0 + d_v0)`.
pub fn fd_first_order<F>(f: F, sigma: f64, v0: f64, d_sigma: f64, d_v0: f64) -> Result<FirstOrder>
where
    F: Fn(f64, f64) -> Result<f64> + Sync,
{
    let points = [(sigma, v0), (sigma + d_sigma, v0), (sigma, v0 + d_v0)];
    let vals = points
        .par_iter()
        .map(|&(s, v)| f(s, v))
        .collect::<Result<Vec<_>>>()?;
    Ok(FirstOrder {
        f: vals[0],
        f_sigma: (vals[1] - vals[0]) / d_sigma,
        f_v0: (vals[2] - vals[0]) / d_v0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StencilDerivatives {
    pub f: f64,
    pub f_sigma: f64,
    pub f_v0: f64,
    pub f_h: f64,
    pub f_sigma_sigma: f64,
    pub f_v0_sigma: f64,
    pub f_h_sigma: f64,
}

/// The 17 evaluation points, in order, as offsets in units of
/// `(d_sigma, d_v0, d_h)`.
pub const STENCIL: [(i32, i32, i32); 17] = [
    (0, 0, 0),
    (1, 0, 0),
    (2, 0, 0),
    (3, 0, 0),
    (4, 0, 0),
    (0, -1, 0),
    (0, 1, 0),
    (1, -1, 0),
    (1, 1, 0),
    (2, -1, 0),
    (2, 1, 0),
    (0, 0, -1),
    (0, 0, 1),
    (1, 0, -1),
    (1, 0, 1),
    (2, 0, -1),
    (2, 0, 1),
];

/// Second-order accurate derivatives of `F(sigma, v0, h)`: one-sided in
/// sigma (which is non-negative), centred in `v0` and `h`.
pub fn fd_second_order<F>(
    f: F,
    point: (f64, f64, f64),
    offsets: (f64, f64, f64),
) -> Result<StencilDerivatives>
where
    F: Fn(f64, f64, f64) -> Result<f64> + Sync,
{
    let (s, v, h) = point;
    let (ds, dv, dh) = offsets;
    if !(ds > 0.0 && dv > 0.0 && dh > 0.0) {
        return Err(invalid("offsets", "finite-difference offsets must be positive"));
    }
    let vals = STENCIL
        .par_iter()
        .map(|&(i, j, k)| f(s + i as f64 * ds, v + j as f64 * dv, h + k as f64 * dh))
        .collect::<Result<Vec<_>>>()?;
    let mut arr = [0.0; 17];
    arr.copy_from_slice(&vals);
    Ok(stencil_from_values(&arr, offsets))
}

/// Applies the stencil formulas to values sampled at [`STENCIL`].
pub fn stencil_from_values(vals: &[f64; 17], offsets: (f64, f64, f64)) -> StencilDerivatives {
    let (ds, dv, dh) = offsets;
    // 1-based names as in the stencil listing.
    let p = |i: usize| vals[i - 1];
    let one_sided = |a: f64, b: f64, c: f64| -3.0 * a + 4.0 * b - c;
    StencilDerivatives {
        f: p(1),
        f_sigma: one_sided(p(1), p(2), p(3)) / (2.0 * ds),
        f_v0: (p(7) - p(6)) / (2.0 * dv),
        f_h: (p(13) - p(12)) / (2.0 * dh),
        f_sigma_sigma: (-3.0 * one_sided(p(1), p(2), p(3)) + 4.0 * one_sided(p(2), p(3), p(4))
            - one_sided(p(3), p(4), p(5)))
            / (4.0 * ds * ds),
        f_v0_sigma: (one_sided(p(7), p(9), p(11)) - one_sided(p(6), p(8), p(10))) / (4.0 * ds * dv),
        f_h_sigma: (one_sided(p(13), p(15), p(17)) - one_sided(p(12), p(14), p(16)))
            / (4.0 * ds * dh),
    }
}

/// Solves `P(t_skip; y) = target` for `y` by scalar Newton starting at `guess`.
fn solve_healed(
    target: f64,
    guess: f64,
    ctx: &LiftContext,
    params: &ModelParams,
    settings: &CoarseSettings,
) -> Result<NewtonReport> {
    let times = [settings.t_skip];
    newton_solve(
        |y: &[f64]| Ok(vec![coarse_samples(y[0], ctx, params, &times, settings)?[0] - target]),
        &[guess],
        &[settings.d_sigma],
        &settings.into(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImplicitStep {
    /// `Phi(delta; x)`.
    pub y: f64,
    /// `P(t_skip; y)`.
    pub healed_y: f64,
    /// `P(t_skip + delta; x)`.
    pub target: f64,
    pub report: NewtonReport,
}

/// Implicit coarse time stepper: `y` with `P(t_skip; y) = P(t_skip + delta; x)`.
pub fn implicit_step(
    x: f64,
    delta: f64,
    ctx: &LiftContext,
    params: &ModelParams,
    settings: &CoarseSettings,
) -> Result<ImplicitStep> {
    if !(delta >= 0.0) {
        return Err(invalid("delta", "must be non-negative"));
    }
    let target = coarse_samples(x, ctx, params, &[settings.t_skip + delta], settings)?[0];
    let report = solve_healed(target, x, ctx, params, settings)?.require_converged()?;
    let y = report.solution[0];
    Ok(ImplicitStep {
        y,
        healed_y: target + report.residual[0],
        target,
        report,
    })
}

/// The residual used for coarse equilibria: `P(t_skip + delta) - P(t_skip)`,
/// i.e. `delta * F(sigma)`, measured in units of sigma.
fn equilibrium_residual(
    sigma: f64,
    ctx: &LiftContext,
    params: &ModelParams,
    settings: &CoarseSettings,
) -> Result<f64> {
    Ok(macro_eval(sigma, ctx, params, settings)?.increment())
}

/// Root of the macroscopic right-hand side `F(sigma) = 0` near `guess`.
///
/// The residual is `delta * F`, so a converged report guarantees
/// `|F| <= newton_tol / delta`.
pub fn coarse_equilibrium(
    guess: f64,
    ctx: &LiftContext,
    params: &ModelParams,
    settings: &CoarseSettings,
) -> Result<NewtonReport> {
    settings.validate()?;
    newton_solve(
        |s: &[f64]| Ok(vec![equilibrium_residual(s[0], ctx, params, settings)?]),
        &[guess],
        &[settings.d_sigma],
        &settings.into(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Multiplier {
    pub lambda: f64,
    /// `dP(t_skip)/dsigma`.
    pub d_healed: f64,
    /// `dP(t_skip + delta)/dsigma`.
    pub d_advanced: f64,
    /// `dF/dsigma` from the same two evaluations.
    pub f_sigma: f64,
}

impl Multiplier {
    pub fn stable(&self) -> bool {
        self.lambda.abs() < 1.0
    }

    /// Builds the multiplier from one-sided differences of both healed values.
    pub fn from_pair(
        base: (f64, f64),
        shifted: (f64, f64),
        d_sigma: f64,
        delta: f64,
    ) -> Result<Self> {
        let d_healed = (shifted.0 - base.0) / d_sigma;
        let d_advanced = (shifted.1 - base.1) / d_sigma;
        if !(d_healed.abs() >= MIN_HEALING_DERIVATIVE) {
            return Err(Error::DegenerateHealing {
                derivative: d_healed,
            });
        }
        Ok(Self {
            lambda: d_advanced / d_healed,
            d_healed,
            d_advanced,
            f_sigma: (d_advanced - d_healed) / delta,
        })
    }
}

/// Scalar generalized eigenvalue `lambda = dP(t_skip + delta) / dP(t_skip)`
/// at an equilibrium.
pub fn multiplier(
    sigma_star: f64,
    ctx: &LiftContext,
    params: &ModelParams,
    settings: &CoarseSettings,
) -> Result<Multiplier> {
    let evals = [sigma_star, sigma_star + settings.d_sigma]
        .par_iter()
        .map(|&s| macro_eval(s, ctx, params, settings))
        .collect::<Result<Vec<_>>>()?;
    Multiplier::from_pair(
        (evals[0].healed, evals[0].advanced),
        (evals[1].healed, evals[1].advanced),
        settings.d_sigma,
        settings.delta,
    )
}

/// Finds `x_tilde` with `R(M(t_skip; L(x_tilde))) = target` and returns it with
/// the healed microscopic state.
pub fn match_restriction(
    target: f64,
    ctx: &LiftContext,
    params: &ModelParams,
    settings: &CoarseSettings,
) -> Result<(f64, MicroState)> {
    let report = solve_healed(target, target / ctx.p(), ctx, params, settings)?.require_converged()?;
    let x = report.solution[0];
    let u = micro_model::integrate(&lift(x, ctx, params)?, params, settings.t_skip, &settings.integrator)?;
    Ok((x, u))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectiveStep {
    pub sigma: f64,
    /// `P(t_skip; sigma_j)`.
    pub healed_from: f64,
    /// `F(sigma_j)`.
    pub rate: f64,
    /// `P(t_skip; sigma_j) + F(sigma_j) * step`.
    pub target: f64,
    pub report: NewtonReport,
    /// `M(t_skip; L(sigma_j))`.
    pub healed_state: MicroState,
}

/// Projective Euler step on the slow manifold:
/// `P(t_skip; sigma_{j+1}) = P(t_skip; sigma_j) + F(sigma_j) * step`.
/// A negative `step` integrates backwards in time.
pub fn projective_euler_step(
    sigma: f64,
    step: f64,
    ctx: &LiftContext,
    params: &ModelParams,
    settings: &CoarseSettings,
) -> Result<ProjectiveStep> {
    if step == 0.0 || !step.is_finite() {
        return Err(invalid("step", "must be finite and non-zero"));
    }
    let e = macro_eval(sigma, ctx, params, settings)?;
    let rate = e.rate();
    let target = e.healed + rate * step;
    let report = match solve_healed(target, sigma, ctx, params, settings) {
        Ok(r) if r.converged => r,
        _ => solve_healed(target, sigma + rate * step, ctx, params, settings)?.require_converged()?,
    };
    Ok(ProjectiveStep {
        sigma: report.solution[0],
        healed_from: e.healed,
        rate,
        target,
        report,
        healed_state: e.healed_state,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForwardBackwardError {
    /// `P(t_skip; sigma(t))`.
    pub reference: f64,
    /// Result of one backward step.
    pub sigma_back: f64,
    /// `P(t_skip - dt; sigma_back)`.
    pub recomputed: f64,
    pub error: f64,
}

/// One backward Euler step of size `dt < 0` followed by a forward run of
/// `t_skip - dt`, compared against the healed starting value.
pub fn forward_backward_error(
    sigma: f64,
    dt: f64,
    ctx: &LiftContext,
    params: &ModelParams,
    settings: &CoarseSettings,
) -> Result<ForwardBackwardError> {
    if !(dt < 0.0) {
        return Err(invalid("dt", "must be negative"));
    }
    let back = projective_euler_step(sigma, dt, ctx, params, settings)?;
    let recomputed = coarse_samples(back.sigma, ctx, params, &[settings.t_skip - dt], settings)?[0];
    Ok(ForwardBackwardError {
        reference: back.healed_from,
        sigma_back: back.sigma,
        recomputed,
        error: (back.healed_from - recomputed).abs(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn opts(tol: f64) -> NewtonOptions {
        NewtonOptions {
            tol,
            max_iter: 50,
            nu: 1.0,
        }
    }

    #[test]
    fn scalar_square_root() {
        let r = newton_solve(|x: &[f64]| Ok(vec![x[0] * x[0] - 4.0]), &[3.0], &[1e-7], &opts(1e-7)).unwrap();
        assert!(r.converged);
        assert!((r.solution[0] - 2.0).abs() < 1e-7);
    }

    #[test]
    fn root_as_initial_guess_needs_no_iterations() {
        let r = newton_solve(|x: &[f64]| Ok(vec![x[0] * x[0] - 4.0]), &[2.0], &[1e-7], &opts(1e-7)).unwrap();
        assert_eq!(r.iterations, 0);
        assert_eq!(r.solution, vec![2.0]);
    }

    #[test]
    fn quadratic_tail() {
        let r = newton_solve(
            |x: &[f64]| Ok(vec![x[0].exp() - 3.0, x[1] * x[1] + x[0] - 5.0]),
            &[1.5, 2.5],
            &[1e-9, 1e-9],
            &opts(1e-13),
        )
        .unwrap();
        assert!(r.converged);
        let h = &r.history;
        for w in h.windows(2) {
            if w[0] < 1e-3 && w[1] > 1e-12 {
                assert!(w[1] <= 10.0 * w[0] * w[0], "{:?}", h);
            }
        }
    }

    #[test]
    fn relaxed_newton_still_converges() {
        let o = NewtonOptions {
            nu: 0.5,
            ..opts(1e-10)
        };
        let r = newton_solve(|x: &[f64]| Ok(vec![x[0] - 1.0]), &[3.0], &[1e-6], &o).unwrap();
        assert!(r.converged);
        assert!(r.iterations > 10);
    }

    #[test]
    fn iteration_budget_is_reported() {
        let o = NewtonOptions {
            max_iter: 2,
            ..opts(1e-14)
        };
        let r = newton_solve(|x: &[f64]| Ok(vec![x[0].powi(3) - 8.0]), &[30.0], &[1e-6], &o).unwrap();
        assert!(!r.converged);
        assert!(matches!(r.require_converged(), Err(Error::NewtonNotConverged { .. })));
    }

    #[test]
    fn singular_jacobian_is_rejected() {
        let err = newton_solve(|x: &[f64]| Ok(vec![x[0] + x[1] - 1.0, 2.0 * x[0] + 2.0 * x[1]]), &[0.0, 0.0], &[1e-6, 1e-6], &opts(1e-10))
            .unwrap_err();
        assert!(matches!(err, Error::SingularJacobian { .. }));
        let err = newton_solve(|_: &[f64]| Ok(vec![1.0]), &[0.0], &[1e-6], &opts(1e-10)).unwrap_err();
        assert!(matches!(err, Error::SingularJacobian { .. }));
    }

    #[test]
    fn first_order_differences() {
        let d = fd_first_order(|s, v| Ok(3.0 * s + 2.0 * v), 0.3, 0.9, 1e-3, 1e-3).unwrap();
        assert_relative_eq!(d.f_sigma, 3.0, epsilon = 1e-10);
        assert_relative_eq!(d.f_v0, 2.0, epsilon = 1e-10);
        let d = fd_first_order(|s, _| Ok(s * s), 1.0, 0.9, 1e-3, 1e-3).unwrap();
        assert_relative_eq!(d.f_sigma, 2.001, epsilon = 1e-10);
        assert_eq!(d.f_v0, 0.0);
    }

    #[test]
    fn stencil_exact_for_quadratic() {
        let f = |s: f64, v: f64, h: f64| Ok(s * s + v * s + h);
        let d = fd_second_order(f, (0.2, 0.9, 1.2), (1e-3, 1e-3, 1e-3)).unwrap();
        assert_relative_eq!(d.f_sigma, 2.0 * 0.2 + 0.9, epsilon = 1e-9);
        assert_relative_eq!(d.f_sigma_sigma, 2.0, epsilon = 1e-5);
        assert_relative_eq!(d.f_v0_sigma, 1.0, epsilon = 1e-6);
        assert_relative_eq!(d.f_h, 1.0, epsilon = 1e-9);
        assert!(d.f_h_sigma.abs() < 1e-6);
        assert_relative_eq!(d.f_v0, 0.2, epsilon = 1e-9);
    }

    #[test]
    fn stencil_constant_gives_zero() {
        let d = fd_second_order(|_, _, _| Ok(0.7), (0.1, 0.9, 1.2), (1e-3, 1e-3, 1e-3)).unwrap();
        assert_eq!(d.f, 0.7);
        for v in [d.f_sigma, d.f_v0, d.f_h, d.f_sigma_sigma, d.f_v0_sigma, d.f_h_sigma] {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn stencil_is_second_order_in_sigma() {
        // Analytic derivative of sigma^3 at 0.1 is 0.03.
        let err = |ds: f64| {
            let d = fd_second_order(|s, _, _| Ok(s * s * s), (0.1, 0.9, 1.2), (ds, 1e-3, 1e-3)).unwrap();
            (d.f_sigma - 0.03).abs()
        };
        assert!(err(1e-3) < 3e-6);
        let ratio = err(1e-3) / err(5e-4);
        assert!((ratio - 4.0).abs() < 0.1, "ratio {ratio}");
    }

    #[test]
    fn stencil_counts_evaluations() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        let count = AtomicUsize::new(0);
        fd_second_order(
            |s, v, h| {
                count.fetch_add(1, Ordering::Relaxed);
                Ok(s + v + h)
            },
            (0.1, 0.9, 1.2),
            (1e-3, 1e-3, 1e-3),
        )
        .unwrap();
        assert_eq!(count.load(Ordering::Relaxed), 17);
    }

    #[test]
    fn multiplier_requires_regular_healing() {
        assert!(Multiplier::from_pair((0.1, 0.1), (0.1, 0.2), 1e-3, 2000.0).is_err());
        let m = Multiplier::from_pair((0.1, 0.1), (0.101, 0.1005), 1e-3, 2000.0).unwrap();
        assert_relative_eq!(m.lambda, 0.5, epsilon = 1e-9);
        assert!(m.stable());
        assert!(m.f_sigma < 0.0);
    }
}
