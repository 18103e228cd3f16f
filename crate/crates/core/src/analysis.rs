//! Analytic Hopf curve, branch comparison and the parameter studies built on
//! continuation: lifting-bias sweeps, healing-time scans, backward
//! trajectories and forward-backward error scans.

use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coarse_map::{restrict, CoarseSettings, LiftContext};
use crate::continuation::{
    continue_branch, seed_from_state, Branch, BranchPoint, ContinuationSettings, MIN_REFERENCE_SIGMA,
};
use crate::error::{invalid, Error, Result};
use crate::integrator::IntegratorSettings;
use crate::micro_model::{self, perturbed_state, MicroState, ModelParams};
use crate::solvers::{forward_backward_error, projective_euler_step, ProjectiveStep};

/// Direct simulations ending below this restriction count as dissolved jams.
pub const JAM_SIGMA: f64 = 0.01;

/// Branch points whose sigma steps backwards by at most this much are dropped
/// when building a graph.
pub const MONOTONE_SLACK: f64 = 1e-6;

const QUAD_TOL: f64 = 1e-10;
const QUAD_MAX_DEPTH: u32 = 50;

fn hopf_angle(j: usize, params: &ModelParams) -> Result<f64> {
    if j == 0 || j >= params.cars {
        return Err(Error::OutOfRange {
            what: "j",
            value: j as i64,
        });
    }
    Ok(2.0 * PI * j as f64 / params.cars as f64)
}

/// `v0` at which the uniform flow loses stability to spatial mode `j`.
pub fn hopf_v0(h: f64, j: usize, params: &ModelParams) -> Result<f64> {
    let theta = hopf_angle(j, params)?;
    let s = theta.sin();
    if s == 0.0 {
        return Err(invalid("j", "mode has sin(2 pi j / N) = 0"));
    }
    let t = (h - params.mean_headway()).tanh();
    Ok((1.0 - theta.cos()) / (params.tau * s * s * (1.0 - t * t)))
}

/// Frequency `omega = V'(L/N) sin(2 pi j / N)` of mode `j` at its Hopf point.
/// The slope `V'` there is fixed by the mode alone, so `omega` does not depend on `h`.
pub fn hopf_frequency(j: usize, params: &ModelParams) -> Result<f64> {
    let theta = hopf_angle(j, params)?;
    let slope = (1.0 - theta.cos()) / (params.tau * theta.sin().powi(2));
    Ok(slope * theta.sin())
}

/// Characteristic residual `(1 - omega^2 tau / V' + i omega / V')^N - 1` of the
/// uniform flow, with `V'` evaluated at `L/N`.
pub fn hopf_residual(v0: f64, omega: f64, h: f64, params: &ModelParams) -> Result<Complex64> {
    let p = params.clone().with_v0(v0).with_h(h);
    let slope = p.ov_slope(p.mean_headway());
    if !(slope > 0.0) {
        return Err(invalid("v0", "optimal-velocity slope must be positive"));
    }
    let base = Complex64::new(1.0 - omega * omega * p.tau / slope, omega / slope);
    Ok(base.powu(p.cars as u32) - 1.0)
}

/// Mode with the smallest Hopf threshold at `h`.
pub fn first_hopf_mode(h: f64, params: &ModelParams) -> Result<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for j in 1..params.cars {
        if let Ok(v) = hopf_v0(h, j, params) {
            if best.is_none_or(|(_, b)| v < b) {
                best = Some((j, v));
            }
        }
    }
    best.ok_or(invalid("cars", "no admissible mode"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HopfRow {
    pub h: f64,
    pub j: usize,
    pub v0: f64,
    pub omega: f64,
}

/// Hopf curves `v0(h)` for each mode in `modes`, ordered by mode then `h`.
pub fn hopf_curves(h_values: &[f64], modes: &[usize], params: &ModelParams) -> Result<Vec<HopfRow>> {
    let mut rows = Vec::with_capacity(h_values.len() * modes.len());
    for &j in modes {
        for &h in h_values {
            rows.push(HopfRow {
                h,
                j,
                v0: hopf_v0(h, j, params)?,
                omega: hopf_frequency(j, params)?,
            });
        }
    }
    Ok(rows)
}

/// Seed parameters for a jam branch at `h`: the values used at `h = 1.2`,
/// shifted with the first Hopf threshold elsewhere.
pub fn seed_v0(h: f64, params: &ModelParams) -> Result<(f64, f64)> {
    if (h - 1.2).abs() < 1e-12 {
        return Ok((0.91, 0.90));
    }
    let v = hopf_v0(h, 1, params)?;
    Ok((v + 0.0231, v + 0.0131))
}

/// Natural cubic spline through strictly increasing knots.
#[derive(Debug, Clone, PartialEq)]
pub struct NaturalSpline {
    x: Vec<f64>,
    y: Vec<f64>,
    /// Second derivatives at the knots.
    m: Vec<f64>,
}

impl NaturalSpline {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        let n = x.len();
        if n != y.len() {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: y.len(),
            });
        }
        if n < 2 {
            return Err(invalid("knots", "need at least two"));
        }
        if x.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(invalid("knots", "must be strictly increasing"));
        }
        let mut m = vec![0.0; n];
        if n > 2 {
            // Thomas algorithm on the interior equations.
            let k = n - 2;
            let mut diag = vec![0.0; k];
            let mut rhs = vec![0.0; k];
            let mut upper = vec![0.0; k];
            for i in 1..n - 1 {
                let h0 = x[i] - x[i - 1];
                let h1 = x[i + 1] - x[i];
                diag[i - 1] = 2.0 * (h0 + h1);
                upper[i - 1] = h1;
                rhs[i - 1] = 6.0 * ((y[i + 1] - y[i]) / h1 - (y[i] - y[i - 1]) / h0);
            }
            for i in 1..k {
                let lower = x[i + 1] - x[i];
                let f = lower / diag[i - 1];
                diag[i] -= f * upper[i - 1];
                rhs[i] -= f * rhs[i - 1];
            }
            m[k] = rhs[k - 1] / diag[k - 1];
            for i in (0..k - 1).rev() {
                m[i + 1] = (rhs[i] - upper[i] * m[i + 2]) / diag[i];
            }
        }
        Ok(Self { x, y, m })
    }

    pub fn eval(&self, t: f64) -> f64 {
        let n = self.x.len();
        let i = match self.x.partition_point(|&v| v <= t) {
            0 => 0,
            k if k >= n => n - 2,
            k => k - 1,
        };
        let h = self.x[i + 1] - self.x[i];
        let a = (self.x[i + 1] - t) / h;
        let b = (t - self.x[i]) / h;
        a * self.y[i]
            + b * self.y[i + 1]
            + ((a * a * a - a) * self.m[i] + (b * b * b - b) * self.m[i + 1]) * h * h / 6.0
    }
}

fn simpson_step<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let diff = left + right - whole;
    if depth == 0 || diff.abs() <= 15.0 * tol {
        return left + right + diff / 15.0;
    }
    simpson_step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
        + simpson_step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
}

/// Adaptive Simpson quadrature of `f` over `[a, b]` to absolute tolerance `tol`.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    let fa = f(a);
    let fb = f(b);
    let fm = f(0.5 * (a + b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_step(&f, a, b, fa, fm, fb, whole, tol, QUAD_MAX_DEPTH)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormKind {
    /// `int (f - g)^2`.
    L2Squared,
    /// `int |f - g|`.
    L1,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchDistanceSpec {
    pub a: f64,
    pub b: f64,
    pub norm: NormKind,
}

impl BranchDistanceSpec {
    /// Squared L2 distance over `[0.125, 0.25]`, used for the lifting study.
    pub fn lifting() -> Self {
        Self {
            a: 0.125,
            b: 0.25,
            norm: NormKind::L2Squared,
        }
    }

    /// L1 distance over `[0.01, 0.28]`, used for the healing-time study.
    pub fn healing_time() -> Self {
        Self {
            a: 0.01,
            b: 0.28,
            norm: NormKind::L1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a < self.b) || !self.a.is_finite() || !self.b.is_finite() {
            return Err(invalid("a", "integration bounds must satisfy a < b"));
        }
        Ok(())
    }

    /// The same spec with `[a, b]` intersected with `[lo, hi]`.
    pub fn clipped(&self, lo: f64, hi: f64) -> Result<Self> {
        let c = Self {
            a: self.a.max(lo),
            b: self.b.min(hi),
            norm: self.norm,
        };
        c.validate().map_err(|_| Error::NotAGraph {
            a: self.a,
            b: self.b,
            reason: format!("no overlap with the common range [{lo}, {hi}]"),
        })?;
        Ok(c)
    }
}

/// `v0` as a function of `sigma`, with strictly increasing `sigma`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Graph {
    pub sigma: Vec<f64>,
    pub v0: Vec<f64>,
}

impl Graph {
    /// Builds a graph from `(sigma, v0)` pairs in branch order. Sigma must be
    /// monotone along the sequence; backward steps up to [`MONOTONE_SLACK`]
    /// are dropped.
    pub fn from_pairs(pairs: &[(f64, f64)]) -> Result<Self> {
        if pairs.len() < 2 {
            return Err(Error::NotAGraph {
                a: f64::NAN,
                b: f64::NAN,
                reason: "fewer than two points".into(),
            });
        }
        let first = pairs[0].0;
        let last = pairs[pairs.len() - 1].0;
        let dir = if last >= first { 1.0 } else { -1.0 };
        let mut kept = vec![pairs[0]];
        for &(s, v) in &pairs[1..] {
            let prev = kept[kept.len() - 1].0;
            let step = (s - prev) * dir;
            if step > 0.0 {
                kept.push((s, v));
            } else if step < -MONOTONE_SLACK {
                return Err(Error::NotAGraph {
                    a: first.min(last),
                    b: first.max(last),
                    reason: format!("sigma reverses at {s}"),
                });
            }
        }
        if dir < 0.0 {
            kept.reverse();
        }
        if kept.len() < 2 {
            return Err(Error::NotAGraph {
                a: first,
                b: last,
                reason: "fewer than two distinct sigma values".into(),
            });
        }
        Ok(Self {
            sigma: kept.iter().map(|p| p.0).collect(),
            v0: kept.iter().map(|p| p.1).collect(),
        })
    }

    /// Graph of `v0` over the healed coordinate.
    pub fn healed(points: &[BranchPoint]) -> Result<Self> {
        let pairs: Vec<_> = points.iter().map(|p| (p.sigma_healed, p.v0)).collect();
        Self::from_pairs(&pairs)
    }

    /// Graph of `v0` over the lifting pre-image coordinate.
    pub fn unhealed(points: &[BranchPoint]) -> Result<Self> {
        let pairs: Vec<_> = points.iter().map(|p| (p.sigma, p.v0)).collect();
        Self::from_pairs(&pairs)
    }

    pub fn direct(points: &[DirectPoint]) -> Result<Self> {
        let pairs: Vec<_> = points.iter().filter(|p| p.jam).map(|p| (p.sigma, p.v0)).collect();
        Self::from_pairs(&pairs)
    }

    pub fn range(&self) -> (f64, f64) {
        (self.sigma[0], self.sigma[self.sigma.len() - 1])
    }

    /// Spline through the knots in `[a, b]` plus one bracketing knot on each side.
    fn spline_over(&self, a: f64, b: f64) -> Result<NaturalSpline> {
        let (lo, hi) = self.range();
        if lo > a || hi < b {
            return Err(Error::NotAGraph {
                a,
                b,
                reason: format!("graph covers only [{lo}, {hi}]"),
            });
        }
        let start = self.sigma.partition_point(|&s| s < a).saturating_sub(1);
        let end = (self.sigma.partition_point(|&s| s <= b) + 1).min(self.sigma.len());
        NaturalSpline::new(self.sigma[start..end].to_vec(), self.v0[start..end].to_vec())
    }
}

/// Intersection of the sigma ranges of all graphs.
pub fn common_range(graphs: &[&Graph]) -> (f64, f64) {
    graphs.iter().fold((f64::NEG_INFINITY, f64::INFINITY), |(lo, hi), g| {
        let (a, b) = g.range();
        (lo.max(a), hi.min(b))
    })
}

/// Distance between two graphs `v0(sigma)` over `[a, b]`, using natural cubic
/// spline interpolants and adaptive Simpson quadrature between merged knots.
pub fn branch_distance(f: &Graph, g: &Graph, spec: &BranchDistanceSpec) -> Result<f64> {
    spec.validate()?;
    let sf = f.spline_over(spec.a, spec.b)?;
    let sg = g.spline_over(spec.a, spec.b)?;
    let mut cuts: Vec<f64> = f
        .sigma
        .iter()
        .chain(&g.sigma)
        .copied()
        .filter(|&s| s > spec.a && s < spec.b)
        .collect();
    cuts.push(spec.a);
    cuts.push(spec.b);
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let width = spec.b - spec.a;
    let integrand = |s: f64| {
        let d = sf.eval(s) - sg.eval(s);
        match spec.norm {
            NormKind::L2Squared => d * d,
            NormKind::L1 => d.abs(),
        }
    };
    Ok(cuts
        .windows(2)
        .map(|w| adaptive_simpson(integrand, w[0], w[1], QUAD_TOL * (w[1] - w[0]) / width))
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectPoint {
    pub v0: f64,
    pub sigma: f64,
    /// The end state is still a jam (`sigma > JAM_SIGMA`).
    pub jam: bool,
}

/// `n` values descending from `start` in steps of `step`.
pub fn downsweep_grid(start: f64, step: f64, n: usize) -> Vec<f64> {
    (0..n).map(|k| start - step * k as f64).collect()
}

/// Direct simulation at each `v0` of `grid` for `sim_time`, each run started
/// from the end state of the previous one (the first from the perturbed
/// uniform flow).
pub fn direct_downsweep(
    grid: &[f64],
    sim_time: f64,
    params: &ModelParams,
    integrator: &IntegratorSettings,
) -> Result<Vec<DirectPoint>> {
    let mut out = Vec::with_capacity(grid.len());
    let mut state: Option<MicroState> = None;
    for &v0 in grid {
        let p = params.clone().with_v0(v0);
        let start = state.take().unwrap_or_else(|| perturbed_state(&p));
        let end = micro_model::integrate(&start, &p, sim_time, integrator)?;
        let sigma = restrict(&end, &p);
        let shift = end.x[0];
        state = Some(end.translated(-shift));
        out.push(DirectPoint {
            v0,
            sigma,
            jam: sigma > JAM_SIGMA,
        });
    }
    Ok(out)
}

/// End states of direct simulations used as lifting references for seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedProfiles {
    pub v0: (f64, f64),
    pub states: (MicroState, MicroState),
}

/// Direct simulations of length `sim_time` from the perturbed uniform flow at
/// both seed parameters.
pub fn seed_profiles(
    v0: (f64, f64),
    sim_time: f64,
    params: &ModelParams,
    integrator: &IntegratorSettings,
) -> Result<SeedProfiles> {
    let run = |v: f64| {
        let p = params.clone().with_v0(v);
        micro_model::integrate(&perturbed_state(&p), &p, sim_time, integrator)
    };
    let (a, b) = rayon::join(|| run(v0.0), || run(v0.1));
    Ok(SeedProfiles {
        v0,
        states: (a?, b?),
    })
}

/// Branch through both seed equilibria, lifted with bias `p`.
pub fn branch_from_profiles(
    profiles: &SeedProfiles,
    p: f64,
    n_steps: usize,
    params: &ModelParams,
    settings: &CoarseSettings,
    cont: &ContinuationSettings,
) -> Result<Branch> {
    let (a, b) = rayon::join(
        || seed_from_state(profiles.states.0.clone(), profiles.v0.0, p, params, settings),
        || seed_from_state(profiles.states.1.clone(), profiles.v0.1, p, params, settings),
    );
    let (a, b) = (a?, b?);
    continue_branch(&a.point, &b.point, n_steps, &b.ctx, params, settings, cont)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiftingRow {
    pub p: f64,
    pub branch: Branch,
    pub unhealed_distance: f64,
    pub healed_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiftingSweep {
    pub rows: Vec<LiftingRow>,
    /// `spec` clipped to the sigma range shared by every compared graph.
    pub spec: BranchDistanceSpec,
}

impl LiftingSweep {
    /// Distance between the healed stable segments of rows `i` and `k`.
    pub fn healed_pair_distance(&self, i: usize, k: usize) -> Result<f64> {
        let f = Graph::healed(self.rows[i].branch.stable_segment())?;
        let g = Graph::healed(self.rows[k].branch.stable_segment())?;
        branch_distance(&f, &g, &self.spec)
    }
}

/// Stable branches for every bias in `p_values`, each compared with the
/// direct downsweep in both the pre-image and the healed coordinate.
#[allow(clippy::too_many_arguments)]
pub fn lifting_sweep(
    p_values: &[f64],
    profiles: &SeedProfiles,
    direct: &[DirectPoint],
    spec: &BranchDistanceSpec,
    n_steps: usize,
    params: &ModelParams,
    settings: &CoarseSettings,
    cont: &ContinuationSettings,
) -> Result<LiftingSweep> {
    let cont = ContinuationSettings {
        stop_after_fold: true,
        ..*cont
    };
    let branches = p_values
        .par_iter()
        .map(|&p| branch_from_profiles(profiles, p, n_steps, params, settings, &cont))
        .collect::<Result<Vec<_>>>()?;
    let reference = Graph::direct(direct)?;
    let mut graphs = Vec::with_capacity(branches.len());
    for b in &branches {
        let seg = b.stable_segment();
        graphs.push((Graph::unhealed(seg)?, Graph::healed(seg)?));
    }
    let mut all: Vec<&Graph> = vec![&reference];
    for (u, h) in &graphs {
        all.push(u);
        all.push(h);
    }
    let (lo, hi) = common_range(&all);
    let spec = spec.clipped(lo, hi)?;
    let mut rows = Vec::with_capacity(branches.len());
    for ((branch, (u, h)), &p) in branches.into_iter().zip(&graphs).zip(p_values) {
        rows.push(LiftingRow {
            p,
            unhealed_distance: branch_distance(u, &reference, &spec)?,
            healed_distance: branch_distance(h, &reference, &spec)?,
            branch,
        });
    }
    Ok(LiftingSweep { rows, spec })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TskipRow {
    pub t_skip: f64,
    pub branch: Branch,
    /// Distance of the healed branch to the reference branch.
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TskipScan {
    pub rows: Vec<TskipRow>,
    pub reference_t_skip: f64,
    pub spec: BranchDistanceSpec,
}

/// Full branches for every healing time, compared with the branch at
/// `reference_t_skip` (which must be in the list) in the healed coordinate.
#[allow(clippy::too_many_arguments)]
pub fn tskip_scan(
    tskip_values: &[f64],
    reference_t_skip: f64,
    profiles: &SeedProfiles,
    spec: &BranchDistanceSpec,
    n_steps: usize,
    params: &ModelParams,
    settings: &CoarseSettings,
    cont: &ContinuationSettings,
) -> Result<TskipScan> {
    let reference_index = tskip_values
        .iter()
        .position(|&t| t == reference_t_skip)
        .ok_or(invalid("reference_t_skip", "must be one of the scanned values"))?;
    let branches = tskip_values
        .par_iter()
        .map(|&t_skip| {
            let s = CoarseSettings { t_skip, ..*settings };
            branch_from_profiles(profiles, 1.0, n_steps, params, &s, cont)
        })
        .collect::<Result<Vec<_>>>()?;
    let graphs = branches
        .iter()
        .map(|b| Graph::healed(&b.points))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Graph> = graphs.iter().collect();
    let (lo, hi) = common_range(&refs);
    let spec = spec.clipped(lo, hi)?;
    let reference = &graphs[reference_index];
    let mut rows = Vec::with_capacity(branches.len());
    for ((branch, g), &t_skip) in branches.into_iter().zip(&graphs).zip(tskip_values) {
        rows.push(TskipRow {
            t_skip,
            distance: branch_distance(g, reference, &spec)?,
            branch,
        });
    }
    Ok(TskipScan {
        rows,
        reference_t_skip,
        spec,
    })
}

/// Iterated projective Euler steps of size `dt` (negative for backward
/// integration) from `sigma0`. With `update_reference`, each step lifts with
/// the healed state of the previous one, as continuation does; otherwise
/// `ctx` is used throughout.
pub fn projective_trajectory(
    sigma0: f64,
    dt: f64,
    n_steps: usize,
    ctx: &LiftContext,
    update_reference: bool,
    params: &ModelParams,
    settings: &CoarseSettings,
) -> Result<Vec<ProjectiveStep>> {
    let mut out: Vec<ProjectiveStep> = Vec::with_capacity(n_steps);
    let mut sigma = sigma0;
    let mut ctx = ctx.clone();
    for _ in 0..n_steps {
        let step = projective_euler_step(sigma, dt, &ctx, params, settings)?;
        sigma = step.sigma;
        if update_reference && step.healed_from >= MIN_REFERENCE_SIGMA {
            ctx = ctx.with_reference(step.healed_state.clone(), params)?;
        }
        out.push(step);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FbErrorRow {
    pub t_skip: f64,
    pub delta: f64,
    pub dt: f64,
    pub sigma_back: f64,
    pub error: f64,
}

/// Forward-backward error at `sigma` for each `(t_skip, delta)` pair, with
/// `dt = -2 delta`.
pub fn fberror_scan(
    sigma: f64,
    pairs: &[(f64, f64)],
    ctx: &LiftContext,
    params: &ModelParams,
    settings: &CoarseSettings,
) -> Result<Vec<FbErrorRow>> {
    pairs
        .par_iter()
        .map(|&(t_skip, delta)| {
            let s = CoarseSettings {
                t_skip,
                delta,
                ..*settings
            };
            let e = forward_backward_error(sigma, -2.0 * delta, ctx, params, &s)?;
            Ok(FbErrorRow {
                t_skip,
                delta,
                dt: -2.0 * delta,
                sigma_back: e.sigma_back,
                error: e.error,
            })
        })
        .collect()
}

/// Least-squares slope of `ln y` against `ln x`, skipping pairs with
/// `y <= floor`.
pub fn loglog_slope(x: &[f64], y: &[f64], floor: f64) -> Result<f64> {
    let pts: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter(|(a, b)| **a > 0.0 && **b > floor)
        .map(|(a, b)| (a.ln(), b.ln()))
        .collect();
    linear_slope(&pts)
}

/// Least-squares slope through `(x, y)` pairs.
pub fn linear_slope(pts: &[(f64, f64)]) -> Result<f64> {
    if pts.len() < 2 {
        return Err(invalid("points", "need at least two points for a fit"));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if !(sxx > 0.0) {
        return Err(invalid("points", "abscissae coincide"));
    }
    Ok(sxy / sxx)
}
