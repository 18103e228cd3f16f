//! Pseudo-arclength continuation of coarse equilibria in `(sigma, v0)` and of
//! fold points in `(sigma, v0, h)`.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coarse_map::{macro_eval, restrict, CoarseSettings, LiftContext, MacroEval};
use crate::error::{invalid, Error, Result};
use crate::micro_model::{self, perturbed_state, MicroState, ModelParams};
use crate::solvers::{
    coarse_equilibrium, newton, stencil_from_values, Multiplier, NewtonReport, NewtonSystem,
    StencilDerivatives, STENCIL,
};

/// Healed states flatter than this are not used as lifting references.
pub const MIN_REFERENCE_SIGMA: f64 = 1e-8;

/// `|F_sigma_sigma|` below this marks a fold point as close to a cusp.
pub const CUSP_THRESHOLD: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchPoint {
    /// Pre-image coordinate passed to the lifting.
    pub sigma: f64,
    /// `P(t_skip; sigma)`.
    pub sigma_healed: f64,
    pub v0: f64,
    pub h: f64,
    /// `F(sigma)` at acceptance.
    pub rate: f64,
    pub f_sigma: f64,
    pub multiplier: f64,
    pub stable: bool,
    /// Number of step halvings needed to reach this point.
    pub halvings: usize,
}

impl BranchPoint {
    pub fn coords(&self) -> [f64; 2] {
        [self.sigma, self.v0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    StepBudget,
    SigmaFloor,
    ParameterRange,
    FoldPassed,
    CorrectorFailure,
}

impl Termination {
    pub fn truncated(&self) -> bool {
        matches!(self, Termination::CorrectorFailure)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContinuationSettings {
    /// Arclength step `s`.
    pub step: f64,
    pub max_halvings: usize,
    /// Stop once an accepted point has `sigma` below this.
    pub min_sigma: f64,
    pub v0_range: (f64, f64),
    pub h_range: (f64, f64),
    /// Stop at the first accepted point past a turning point in `v0`.
    pub stop_after_fold: bool,
}

impl Default for ContinuationSettings {
    fn default() -> Self {
        Self {
            step: 1e-3,
            max_halvings: 5,
            min_sigma: 5e-3,
            v0_range: (0.8, 1.0),
            h_range: (1.0, 1.7),
            stop_after_fold: false,
        }
    }
}

impl ContinuationSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0) {
            return Err(invalid("step", "must be positive"));
        }
        if !(self.min_sigma >= 0.0) {
            return Err(invalid("min_sigma", "must be non-negative"));
        }
        if !(self.v0_range.0 < self.v0_range.1) {
            return Err(invalid("v0_range", "must be an increasing interval"));
        }
        if !(self.h_range.0 < self.h_range.1) {
            return Err(invalid("h_range", "must be an increasing interval"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchMetadata {
    pub params: ModelParams,
    pub coarse: CoarseSettings,
    pub continuation: ContinuationSettings,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub points: Vec<BranchPoint>,
    /// Last secant direction (unnormalized).
    pub secant: [f64; 2],
    pub termination: Termination,
    pub metadata: BranchMetadata,
    /// Lifting context after the last accepted point.
    pub context: LiftContext,
}

impl Branch {
    pub fn truncated(&self) -> bool {
        self.termination.truncated()
    }

    /// Leading points up to and including the last one before `v0` turns.
    pub fn stable_segment(&self) -> &[BranchPoint] {
        let n = turning_index(&self.points).map_or(self.points.len(), |i| i + 1);
        &self.points[..n]
    }
}

/// A point together with the state it heals to, for reference updates.
#[derive(Debug, Clone)]
pub struct Accepted {
    pub point: BranchPoint,
    pub healed_state: MicroState,
    pub report: NewtonReport,
}

/// A converged equilibrium plus the lifting context it was computed in.
#[derive(Debug, Clone)]
pub struct Seed {
    pub point: BranchPoint,
    pub ctx: LiftContext,
}

fn norm(w: &[f64]) -> f64 {
    w.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn unit(w: &[f64]) -> Result<Vec<f64>> {
    let n = norm(w);
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::ZeroSecant);
    }
    Ok(w.iter().map(|v| v / n).collect())
}

/// Unnormalized secant `(sigma1 - sigma0, v01 - v00)`.
pub fn secant_direction(p0: &BranchPoint, p1: &BranchPoint) -> Result<[f64; 2]> {
    let w = [p1.sigma - p0.sigma, p1.v0 - p0.v0];
    unit(&w)?;
    Ok(w)
}

/// Three-component secant for fold curves.
pub fn secant_direction3(p0: &FoldPoint, p1: &FoldPoint) -> Result<[f64; 3]> {
    let w = [p1.sigma - p0.sigma, p1.v0 - p0.v0, p1.h - p0.h];
    unit(&w)?;
    Ok(w)
}

/// Secant predictor `x1 + s w / |w|`.
pub fn predict<const D: usize>(x1: [f64; D], w: [f64; D], s: f64) -> Result<[f64; D]> {
    let u = unit(&w)?;
    let mut out = x1;
    for i in 0..D {
        out[i] += s * u[i];
    }
    Ok(out)
}

/// Evaluates a point on an equilibrium at `(sigma, v0)`: healed value,
/// multiplier and `F_sigma` from the runs at `sigma` and `sigma + d_sigma`.
pub fn evaluate_point(
    sigma: f64,
    v0: f64,
    base: Option<MacroEval>,
    ctx: &LiftContext,
    params: &ModelParams,
    settings: &CoarseSettings,
) -> Result<(BranchPoint, MicroState)> {
    let pr = params.clone().with_v0(v0);
    let (base, shifted) = match base {
        Some(b) => (b, macro_eval(sigma + settings.d_sigma, ctx, &pr, settings)?),
        None => {
            let (a, b) = rayon::join(
                || macro_eval(sigma, ctx, &pr, settings),
                || macro_eval(sigma + settings.d_sigma, ctx, &pr, settings),
            );
            (a?, b?)
        }
    };
    let m = Multiplier::from_pair(
        (base.healed, base.advanced),
        (shifted.healed, shifted.advanced),
        settings.d_sigma,
        settings.delta,
    )?;
    let point = BranchPoint {
        sigma,
        sigma_healed: base.healed,
        v0,
        h: pr.h,
        rate: base.rate(),
        f_sigma: m.f_sigma,
        multiplier: m.lambda,
        stable: m.stable(),
        halvings: 0,
    };
    Ok((point, base.healed_state))
}

/// Corrector system: `delta F(sigma, v0) = 0` plus the orthogonality row.
struct Corrector<'a> {
    ctx: &'a LiftContext,
    params: &'a ModelParams,
    settings: &'a CoarseSettings,
    w: Vec<f64>,
    prediction: [f64; 2],
    last: Option<([f64; 2], MacroEval)>,
}

impl Corrector<'_> {
    fn increment(&self, sigma: f64, v0: f64) -> Result<MacroEval> {
        macro_eval(sigma, self.ctx, &self.params.clone().with_v0(v0), self.settings)
    }
}

impl NewtonSystem for Corrector<'_> {
    fn residual(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        let e = self.increment(x[0], x[1])?;
        let r0 = e.increment();
        let r1 = self.w[0] * (x[0] - self.prediction[0]) + self.w[1] * (x[1] - self.prediction[1]);
        self.last = Some(([x[0], x[1]], e));
        Ok(vec![r0, r1])
    }

    fn jacobian(&mut self, x: &[f64], r: &[f64]) -> Result<DMatrix<f64>> {
        let (ds, dv) = (self.settings.d_sigma, self.settings.d_v0);
        let (a, b) = rayon::join(
            || self.increment(x[0] + ds, x[1]),
            || self.increment(x[0], x[1] + dv),
        );
        let (a, b) = (a?.increment(), b?.increment());
        Ok(DMatrix::from_row_slice(
            2,
            2,
            &[(a - r[0]) / ds, (b - r[0]) / dv, self.w[0], self.w[1]],
        ))
    }
}

/// Corrector: Newton from `prediction` on `F = 0` together with
/// `w . (X - prediction) = 0`.
pub fn correct(
    prediction: [f64; 2],
    w: [f64; 2],
    ctx: &LiftContext,
    params: &ModelParams,
    settings: &CoarseSettings,
) -> Result<Accepted> {
    let mut sys = Corrector {
        ctx,
        params,
        settings,
        w: unit(&w)?,
        prediction,
        last: None,
    };
    let report = newton(&mut sys, &prediction, &settings.into())?.require_converged()?;
    let x = [report.solution[0], report.solution[1]];
    let base = match sys.last.take() {
        Some((at, e)) if at == x => Some(e),
        _ => None,
    };
    let (point, healed_state) = evaluate_point(x[0], x[1], base, ctx, params, settings)?;
    Ok(Accepted {
        point,
        healed_state,
        report,
    })
}

/// Equilibrium seed from a direct simulation of length `sim_time` at `v0`,
/// started from the perturbed uniform flow. The simulated end state becomes
/// the lifting reference.
pub fn seed_from_simulation(
    v0: f64,
    sim_time: f64,
    p: f64,
    params: &ModelParams,
    settings: &CoarseSettings,
) -> Result<Seed> {
    let pr = params.clone().with_v0(v0);
    let end = micro_model::integrate(&perturbed_state(&pr), &pr, sim_time, &settings.integrator)?;
    seed_from_state(end, v0, p, params, settings)
}

/// Equilibrium seed using `reference` as the lifting reference.
pub fn seed_from_state(
    reference: MicroState,
    v0: f64,
    p: f64,
    params: &ModelParams,
    settings: &CoarseSettings,
) -> Result<Seed> {
    let pr = params.clone().with_v0(v0);
    let ctx = LiftContext::new(reference, &pr, p)?;
    let report = coarse_equilibrium(ctx.reference_sigma() / p, &ctx, &pr, settings)?.require_converged()?;
    let (point, _) = evaluate_point(report.solution[0], v0, None, &ctx, &pr, settings)?;
    Ok(Seed { point, ctx })
}

fn next_context(ctx: &LiftContext, healed: MicroState, params: &ModelParams) -> Result<LiftContext> {
    if restrict(&healed, params) < MIN_REFERENCE_SIGMA {
        Ok(ctx.clone())
    } else {
        ctx.with_reference(healed, params)
    }
}

/// Index of the first point at which `v0` changes direction.
fn turning_index(points: &[BranchPoint]) -> Option<usize> {
    (1..points.len().saturating_sub(1)).find(|&i| {
        let a = points[i].v0 - points[i - 1].v0;
        let b = points[i + 1].v0 - points[i].v0;
        a * b < 0.0
    })
}

/// Pseudo-arclength continuation from two converged points, moving from
/// `seed0` towards `seed1` and beyond. `ctx` is the lifting context of
/// `seed1`; it is replaced by the healed state of every accepted point.
///
/// Corrector failures halve the step up to `max_halvings` times; after that
/// the partial branch is returned with [`Termination::CorrectorFailure`].
pub fn continue_branch(
    seed0: &BranchPoint,
    seed1: &BranchPoint,
    n_steps: usize,
    ctx: &LiftContext,
    params: &ModelParams,
    settings: &CoarseSettings,
    cont: &ContinuationSettings,
) -> Result<Branch> {
    settings.validate()?;
    cont.validate()?;
    let params = params.clone().with_h(seed1.h);
    run_steps(vec![*seed0, *seed1], n_steps, ctx.clone(), params, settings, cont)
}

/// Continues an existing branch for up to `n_steps` further points from its
/// last two points and stored lifting context. With `stop_after_fold`, only
/// turns that occur after the current end count.
pub fn extend_branch(
    branch: &Branch,
    n_steps: usize,
    settings: &CoarseSettings,
    cont: &ContinuationSettings,
) -> Result<Branch> {
    settings.validate()?;
    cont.validate()?;
    if branch.points.len() < 2 {
        return Err(invalid("branch", "needs at least two points to extend"));
    }
    run_steps(
        branch.points.clone(),
        n_steps,
        branch.context.clone(),
        branch.metadata.params.clone(),
        settings,
        cont,
    )
}

fn run_steps(
    mut points: Vec<BranchPoint>,
    n_steps: usize,
    mut ctx: LiftContext,
    params: ModelParams,
    settings: &CoarseSettings,
    cont: &ContinuationSettings,
) -> Result<Branch> {
    let start = points.len() - 2;
    let mut secant = secant_direction(&points[start], &points[start + 1])?;
    let mut termination = Termination::StepBudget;

    for _ in 0..n_steps {
        let last = points[points.len() - 1];
        secant = secant_direction(&points[points.len() - 2], &last)?;
        let mut s = cont.step;
        let mut accepted = None;
        for halvings in 0..=cont.max_halvings {
            let pred = predict(last.coords(), secant, s)?;
            if let Ok(mut a) = correct(pred, secant, &ctx, &params, settings) {
                a.point.halvings = halvings;
                accepted = Some(a);
                break;
            }
            s *= 0.5;
        }
        let Some(a) = accepted else {
            termination = Termination::CorrectorFailure;
            break;
        };
        if a.point.sigma < 0.0 {
            termination = Termination::SigmaFloor;
            break;
        }
        points.push(a.point);
        ctx = next_context(&ctx, a.healed_state, &params)?;
        if a.point.sigma < cont.min_sigma {
            termination = Termination::SigmaFloor;
            break;
        }
        if a.point.v0 < cont.v0_range.0 || a.point.v0 > cont.v0_range.1 {
            termination = Termination::ParameterRange;
            break;
        }
        if cont.stop_after_fold && turning_index(&points[start..]).is_some() {
            termination = Termination::FoldPassed;
            break;
        }
    }

    Ok(Branch {
        points,
        secant,
        termination,
        metadata: BranchMetadata {
            params,
            coarse: *settings,
            continuation: *cont,
            p: ctx.p(),
        },
        context: ctx,
    })
}

/// One-parameter branch at the `h` of `params`, seeded by direct simulations
/// of length `sim_time` at `seed_v0.0` and then `seed_v0.1`.
pub fn branch_from_simulations(
    seed_v0: (f64, f64),
    sim_time: f64,
    p: f64,
    n_steps: usize,
    params: &ModelParams,
    settings: &CoarseSettings,
    cont: &ContinuationSettings,
) -> Result<Branch> {
    let (a, b) = rayon::join(
        || seed_from_simulation(seed_v0.0, sim_time, p, params, settings),
        || seed_from_simulation(seed_v0.1, sim_time, p, params, settings),
    );
    let (a, b) = (a?, b?);
    continue_branch(&a.point, &b.point, n_steps, &b.ctx, params, settings, cont)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FoldEstimate {
    pub sigma: f64,
    pub sigma_healed: f64,
    pub v0: f64,
    pub h: f64,
    /// Index of the `v0`-extremal accepted point.
    pub index: usize,
    /// `F_sigma` changes sign within two points of the turning point.
    pub f_sigma_sign_change: bool,
    /// `|lambda|` crosses 1 within two points of the turning point.
    pub stability_change: bool,
}

fn quadratic_through(t: [f64; 3], y: [f64; 3], at: f64) -> f64 {
    let l0 = (at - t[1]) * (at - t[2]) / ((t[0] - t[1]) * (t[0] - t[2]));
    let l1 = (at - t[0]) * (at - t[2]) / ((t[1] - t[0]) * (t[1] - t[2]));
    let l2 = (at - t[0]) * (at - t[1]) / ((t[2] - t[0]) * (t[2] - t[1]));
    y[0] * l0 + y[1] * l1 + y[2] * l2
}

/// Locates the first turning point of `v0` along the branch by fitting a
/// parabola in arclength through the extremal point and its neighbours.
pub fn detect_fold(branch: &Branch) -> Result<FoldEstimate> {
    let pts = &branch.points;
    let i = turning_index(pts).ok_or(Error::NoFold)?;
    let trio = [pts[i - 1], pts[i], pts[i + 1]];
    let t0 = 0.0;
    let t1 = t0 + norm(&[trio[1].sigma - trio[0].sigma, trio[1].v0 - trio[0].v0]);
    let t2 = t1 + norm(&[trio[2].sigma - trio[1].sigma, trio[2].v0 - trio[1].v0]);
    let t = [t0, t1, t2];
    let v = [trio[0].v0, trio[1].v0, trio[2].v0];
    // Vertex of the interpolating parabola.
    let d1 = (v[1] - v[0]) / (t[1] - t[0]);
    let d2 = (v[2] - v[1]) / (t[2] - t[1]);
    let curvature = (d2 - d1) / (t[2] - t[0]);
    let vertex = if curvature != 0.0 {
        (0.5 * (t[0] + t[1]) - d1 / (2.0 * curvature)).clamp(t[0], t[2])
    } else {
        t[1]
    };
    let lo = i.saturating_sub(2);
    let hi = (i + 2).min(pts.len() - 1);
    let window = &pts[lo..=hi];
    let changes = |f: &dyn Fn(&BranchPoint) -> bool| window.windows(2).any(|w| f(&w[0]) != f(&w[1]));
    Ok(FoldEstimate {
        sigma: quadratic_through(t, [trio[0].sigma, trio[1].sigma, trio[2].sigma], vertex),
        sigma_healed: quadratic_through(
            t,
            [trio[0].sigma_healed, trio[1].sigma_healed, trio[2].sigma_healed],
            vertex,
        ),
        v0: quadratic_through(t, v, vertex),
        h: pts[i].h,
        index: i,
        f_sigma_sign_change: changes(&|p| p.f_sigma > 0.0),
        stability_change: changes(&|p| p.stable),
    })
}

/// Extrapolates the branch to `sigma = 0` by fitting `v0 = c0 + c2 sigma^2`
/// to the last `n` points, using the healed coordinate. Returns `c0`.
pub fn extrapolate_to_zero(branch: &Branch, n: usize) -> Result<f64> {
    if n < 2 || branch.points.len() < n {
        return Err(invalid("n", "need at least two trailing points"));
    }
    let tail = &branch.points[branch.points.len() - n..];
    let xs: Vec<f64> = tail.iter().map(|p| p.sigma_healed * p.sigma_healed).collect();
    let ys: Vec<f64> = tail.iter().map(|p| p.v0).collect();
    let m = n as f64;
    let mx = xs.iter().sum::<f64>() / m;
    let my = ys.iter().sum::<f64>() / m;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if !(sxx > 0.0) {
        return Err(invalid("branch", "tail points coincide in sigma"));
    }
    Ok(my - sxy / sxx * mx)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FoldPoint {
    pub sigma: f64,
    pub sigma_healed: f64,
    pub v0: f64,
    pub h: f64,
    pub rate: f64,
    pub f_sigma: f64,
    pub f_sigma_sigma: f64,
    /// `|F_sigma_sigma|` fell below [`CUSP_THRESHOLD`].
    pub cusp_warning: bool,
    pub halvings: usize,
}

impl FoldPoint {
    pub fn coords(&self) -> [f64; 3] {
        [self.sigma, self.v0, self.h]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldCurve {
    /// Ordered by increasing `h`.
    pub points: Vec<FoldPoint>,
    pub termination: Termination,
    pub metadata: BranchMetadata,
}

impl FoldCurve {
    pub fn truncated(&self) -> bool {
        self.termination.truncated()
    }

    /// Linear interpolation of the fold `v0` at `h`.
    pub fn v0_at(&self, h: f64) -> Option<f64> {
        self.points.windows(2).find_map(|w| {
            let (a, b) = (&w[0], &w[1]);
            let (lo, hi) = if a.h <= b.h { (a, b) } else { (b, a) };
            (lo.h <= h && h <= hi.h && hi.h > lo.h)
                .then(|| lo.v0 + (hi.v0 - lo.v0) * (h - lo.h) / (hi.h - lo.h))
        })
    }
}

struct StencilEval {
    f: [f64; 17],
    base: MacroEval,
}

/// Runs all 17 stencil points around `(sigma, v0, h)`; the returned values
/// are increments `delta F`.
fn stencil_increments(
    x: [f64; 3],
    ctx: &LiftContext,
    params: &ModelParams,
    settings: &CoarseSettings,
) -> Result<StencilEval> {
    let (ds, dv, dh) = (settings.d_sigma, settings.d_v0, settings.d_h);
    let evals = STENCIL
        .par_iter()
        .map(|&(i, j, k)| {
            let pr = params
                .clone()
                .with_v0(x[1] + j as f64 * dv)
                .with_h(x[2] + k as f64 * dh);
            macro_eval(x[0] + i as f64 * ds, ctx, &pr, settings)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut f = [0.0; 17];
    for (slot, e) in f.iter_mut().zip(&evals) {
        *slot = e.increment();
    }
    let base = evals.into_iter().next().expect("17 points");
    Ok(StencilEval { f, base })
}

/// Fold system `delta F = 0`, `d_sigma delta F_sigma = 0`, `w . (X - Xhat) = 0`.
///
/// The second row is scaled by `d_sigma` so that both equation rows are
/// measured in units of sigma and share `newton_tol`.
struct FoldSystem<'a> {
    ctx: &'a LiftContext,
    params: &'a ModelParams,
    settings: &'a CoarseSettings,
    w: Vec<f64>,
    prediction: [f64; 3],
    last: Option<([f64; 3], StencilEval, StencilDerivatives)>,
}

impl NewtonSystem for FoldSystem<'_> {
    fn residual(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        let at = [x[0], x[1], x[2]];
        let s = self.settings;
        let ev = stencil_increments(at, self.ctx, self.params, s)?;
        let d = stencil_from_values(&ev.f, (s.d_sigma, s.d_v0, s.d_h));
        let orth: f64 = (0..3).map(|i| self.w[i] * (x[i] - self.prediction[i])).sum();
        self.last = Some((at, ev, d));
        Ok(vec![d.f, s.d_sigma * d.f_sigma, orth])
    }

    fn jacobian(&mut self, x: &[f64], _r: &[f64]) -> Result<DMatrix<f64>> {
        let at = [x[0], x[1], x[2]];
        let d = match &self.last {
            Some((p, _, d)) if *p == at => *d,
            _ => {
                let s = self.settings;
                let ev = stencil_increments(at, self.ctx, self.params, s)?;
                stencil_from_values(&ev.f, (s.d_sigma, s.d_v0, s.d_h))
            }
        };
        let k = self.settings.d_sigma;
        Ok(DMatrix::from_row_slice(
            3,
            3,
            &[
                d.f_sigma,
                d.f_v0,
                d.f_h,
                k * d.f_sigma_sigma,
                k * d.f_v0_sigma,
                k * d.f_h_sigma,
                self.w[0],
                self.w[1],
                self.w[2],
            ],
        ))
    }
}

/// Fold corrector in `(sigma, v0, h)`.
pub fn correct_fold(
    prediction: [f64; 3],
    w: [f64; 3],
    ctx: &LiftContext,
    params: &ModelParams,
    settings: &CoarseSettings,
) -> Result<(FoldPoint, MicroState, NewtonReport)> {
    let mut sys = FoldSystem {
        ctx,
        params,
        settings,
        w: unit(&w)?,
        prediction,
        last: None,
    };
    let report = newton(&mut sys, &prediction, &settings.into())?.require_converged()?;
    let x = [report.solution[0], report.solution[1], report.solution[2]];
    let (ev, d) = match sys.last.take() {
        Some((p, ev, d)) if p == x => (ev, d),
        _ => {
            let ev = stencil_increments(x, ctx, params, settings)?;
            let d = stencil_from_values(&ev.f, (settings.d_sigma, settings.d_v0, settings.d_h));
            (ev, d)
        }
    };
    let delta = settings.delta;
    let point = FoldPoint {
        sigma: x[0],
        sigma_healed: ev.base.healed,
        v0: x[1],
        h: x[2],
        rate: d.f / delta,
        f_sigma: d.f_sigma / delta,
        f_sigma_sigma: d.f_sigma_sigma / delta,
        cusp_warning: (d.f_sigma_sigma / delta).abs() < CUSP_THRESHOLD,
        halvings: 0,
    };
    Ok((point, ev.base.healed_state, report))
}

/// Refines a one-parameter fold estimate with one three-dimensional Newton
/// solve at fixed `h`.
pub fn refine_fold(
    estimate: &FoldEstimate,
    ctx: &LiftContext,
    params: &ModelParams,
    settings: &CoarseSettings,
) -> Result<(FoldPoint, MicroState)> {
    let x = [estimate.sigma, estimate.v0, estimate.h];
    let (p, u, _) = correct_fold(x, [0.0, 0.0, 1.0], ctx, params, settings)?;
    Ok((p, u))
}

fn fold_run(
    seed: &FoldPoint,
    direction: f64,
    n_steps: usize,
    ctx: &LiftContext,
    params: &ModelParams,
    settings: &CoarseSettings,
    cont: &ContinuationSettings,
) -> Result<(Vec<FoldPoint>, Termination)> {
    let mut points = vec![*seed];
    let mut ctx = ctx.clone();
    let mut termination = Termination::StepBudget;
    for _ in 0..n_steps {
        let last = points[points.len() - 1];
        // The first step is taken in h alone.
        let w = if points.len() < 2 {
            [0.0, 0.0, direction]
        } else {
            secant_direction3(&points[points.len() - 2], &last)?
        };
        let mut s = cont.step;
        let mut accepted = None;
        for halvings in 0..=cont.max_halvings {
            let pred = predict(last.coords(), w, s)?;
            if let Ok((mut p, u, _)) = correct_fold(pred, w, &ctx, params, settings) {
                p.halvings = halvings;
                accepted = Some((p, u));
                break;
            }
            s *= 0.5;
        }
        let Some((p, u)) = accepted else {
            termination = Termination::CorrectorFailure;
            break;
        };
        points.push(p);
        ctx = next_context(&ctx, u, &params.clone().with_v0(p.v0).with_h(p.h))?;
        if p.h < cont.h_range.0 || p.h > cont.h_range.1 {
            termination = Termination::ParameterRange;
            break;
        }
    }
    Ok((points, termination))
}

/// Continues a fold point in `(v0, h)` in both directions of `h` until each
/// end leaves `cont.h_range` or `n_steps` is used up on that side.
pub fn continue_fold(
    seed: &FoldPoint,
    n_steps: usize,
    ctx: &LiftContext,
    params: &ModelParams,
    settings: &CoarseSettings,
    cont: &ContinuationSettings,
) -> Result<FoldCurve> {
    settings.validate()?;
    cont.validate()?;
    let (down, up) = rayon::join(
        || fold_run(seed, -1.0, n_steps, ctx, params, settings, cont),
        || fold_run(seed, 1.0, n_steps, ctx, params, settings, cont),
    );
    let ((mut down, t_down), (up, t_up)) = (down?, up?);
    down.reverse();
    down.pop();
    down.extend(up);
    let termination = if t_down.truncated() { t_down } else { t_up };
    Ok(FoldCurve {
        points: down,
        termination,
        metadata: BranchMetadata {
            params: params.clone(),
            coarse: *settings,
            continuation: *cont,
            p: ctx.p(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn point(sigma: f64, v0: f64) -> BranchPoint {
        BranchPoint {
            sigma,
            sigma_healed: sigma,
            v0,
            h: 1.2,
            rate: 0.0,
            f_sigma: 0.0,
            multiplier: 0.5,
            stable: true,
            halvings: 0,
        }
    }

    fn synthetic(points: Vec<BranchPoint>) -> Branch {
        let params = ModelParams::default();
        Branch {
            context: LiftContext::new(perturbed_state(&params), &params, 1.0).unwrap(),
            points,
            secant: [0.0, -1.0],
            termination: Termination::StepBudget,
            metadata: BranchMetadata {
                params: ModelParams::default(),
                coarse: CoarseSettings::default(),
                continuation: ContinuationSettings::default(),
                p: 1.0,
            },
        }
    }

    #[test]
    fn secant_between_points() {
        let w = secant_direction(&point(0.2, 0.90), &point(0.21, 0.905)).unwrap();
        assert_relative_eq!(w[0], 0.01, epsilon = 1e-15);
        assert_relative_eq!(w[1], 0.005, epsilon = 1e-15);
        assert_eq!(
            secant_direction(&point(0.2, 0.9), &point(0.2, 0.9)),
            Err(Error::ZeroSecant)
        );
    }

    #[test]
    fn predictor_steps_along_unit_secant() {
        let p = predict([0.3, 0.9], [1.0, 0.0], 1e-3).unwrap();
        assert_eq!(p, [0.3 + 1e-3, 0.9]);
        assert_eq!(predict([0.3, 0.9], [3.0, 4.0], 0.0).unwrap(), [0.3, 0.9]);
        let p = predict([0.0, 0.0], [3.0, 4.0], 0.5).unwrap();
        assert_relative_eq!(p[0], 0.3, epsilon = 1e-15);
        assert_relative_eq!(p[1], 0.4, epsilon = 1e-15);
        assert!(predict([0.0; 3], [0.0; 3], 1.0).is_err());
    }

    #[test]
    fn fold_of_a_parabola() {
        // v0 = 0.88 + (sigma - 0.1234)^2, traversed with decreasing sigma.
        let pts: Vec<_> = (0..30)
            .map(|k| {
                let s = 0.3 - 0.01 * k as f64;
                let mut p = point(s, 0.88 + (s - 0.1234).powi(2));
                p.stable = s > 0.1234;
                p.f_sigma = 0.1234 - s;
                p
            })
            .collect();
        let f = detect_fold(&synthetic(pts)).unwrap();
        assert_relative_eq!(f.v0, 0.88, epsilon = 1e-6);
        assert_relative_eq!(f.sigma_healed, 0.1234, epsilon = 1e-6);
        assert!(f.stability_change);
        assert!(f.f_sigma_sign_change);
    }

    #[test]
    fn monotone_branch_has_no_fold() {
        let pts = (0..10).map(|k| point(0.3 - 0.01 * k as f64, 0.91 - 0.001 * k as f64)).collect();
        assert_eq!(detect_fold(&synthetic(pts)), Err(Error::NoFold));
    }

    #[test]
    fn stable_segment_ends_at_turn() {
        let pts: Vec<_> = (0..20)
            .map(|k| {
                let s = 0.3 - 0.02 * k as f64;
                point(s, 0.88 + (s - 0.125).powi(2))
            })
            .collect();
        let b = synthetic(pts);
        let seg = b.stable_segment();
        let last = seg[seg.len() - 1];
        assert!(last.v0 <= seg[seg.len() - 2].v0);
        assert!(b.points[seg.len()].v0 > last.v0);
    }

    #[test]
    fn zero_extrapolation_recovers_intercept() {
        let pts = (1..8)
            .map(|k| {
                let s = 0.01 * k as f64;
                point(s, 0.8869 - 0.3 * s * s)
            })
            .collect();
        let c0 = extrapolate_to_zero(&synthetic(pts), 5).unwrap();
        assert_relative_eq!(c0, 0.8869, epsilon = 1e-12);
    }

    #[test]
    fn fold_curve_interpolation() {
        let mk = |v0: f64, h: f64| FoldPoint {
            sigma: 0.1,
            sigma_healed: 0.1,
            v0,
            h,
            rate: 0.0,
            f_sigma: 0.0,
            f_sigma_sigma: 1.0,
            cusp_warning: false,
            halvings: 0,
        };
        let c = FoldCurve {
            points: vec![mk(0.86, 1.1), mk(0.88, 1.2), mk(0.90, 1.25)],
            termination: Termination::ParameterRange,
            metadata: BranchMetadata {
                params: ModelParams::default(),
                coarse: CoarseSettings::default(),
                continuation: ContinuationSettings::default(),
                p: 1.0,
            },
        };
        assert_relative_eq!(c.v0_at(1.15).unwrap(), 0.87, epsilon = 1e-12);
        assert!(c.v0_at(1.3).is_none());
    }
}
