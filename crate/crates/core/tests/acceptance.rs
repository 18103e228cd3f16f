//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion.
//! Set `ACCEPTANCE_STRICT=1` to exit non-zero when any criterion fails.

use std::time::Instant;

use eqfree::analysis::{
    branch_from_profiles, direct_downsweep, downsweep_grid, fberror_scan, hopf_v0,
    lifting_sweep, loglog_slope, projective_trajectory, seed_profiles, seed_v0,
    BranchDistanceSpec, SeedProfiles,
};
use eqfree::coarse_map::{lift, restrict, CoarseSettings, LiftContext};
use eqfree::continuation::{
    branch_from_simulations, continue_fold, detect_fold, extend_branch, extrapolate_to_zero,
    refine_fold, seed_from_state, Branch, ContinuationSettings, Termination,
};
use eqfree::convergence_lab::{convergence_scan, toy_implicit_step, ToySettings, ToySystem};
use eqfree::micro_model::{integrate, perturbed_state, ModelParams};
use eqfree::solvers::fd_second_order;
use eqfree::Result;
use proptest::strategy::{Strategy, ValueTree};
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};

const MAX_STEPS: usize = 800;

struct Outcome {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
    seconds: f64,
}

struct Runner {
    outcomes: Vec<Outcome>,
}

impl Runner {
    fn record(&mut self, id: u32, name: &'static str, start: Instant, res: Result<(bool, String)>) {
        let (pass, detail) = match res {
            Ok(v) => v,
            Err(e) => (false, format!("error: {e}")),
        };
        let o = Outcome {
            id,
            name,
            pass,
            detail,
            seconds: start.elapsed().as_secs_f64(),
        };
        println!(
            "{} {:>2} {}: {} [{:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.id,
            o.name,
            o.detail,
            o.seconds
        );
        self.outcomes.push(o);
    }
}

/// Everything the expensive criteria share, computed once.
struct Shared {
    params: ModelParams,
    coarse: CoarseSettings,
    cont: ContinuationSettings,
    profiles: SeedProfiles,
    /// Branch up to and just past the fold.
    to_fold: Branch,
    /// The same branch continued until sigma reaches zero.
    full: Branch,
}

fn within(x: f64, target: f64, tol: f64) -> bool {
    (x - target).abs() <= tol
}

fn lift_identity() -> Result<(bool, String)> {
    let params = ModelParams::default();
    let reference = integrate(&perturbed_state(&params), &params, 2000.0, &Default::default())?;
    let mut worst: f64 = 0.0;
    for &sigma in &[0.01, 0.05, 0.125, 0.25, 0.4] {
        for &p in &[0.9, 0.95, 1.0, 1.05] {
            let ctx = LiftContext::new(reference.clone(), &params, p)?;
            let r = restrict(&lift(sigma, &ctx, &params)?, &params);
            worst = worst.max((r - p * sigma).abs() / (p * sigma));
        }
    }
    Ok((worst <= 1e-12, format!("max relative error {worst:.2e} over 20 points (tol 1e-12)")))
}

fn stencil_exactness() -> Result<(bool, String)> {
    let config = Config {
        cases: 50,
        ..Config::default()
    };
    let rng = TestRng::deterministic_rng(RngAlgorithm::ChaCha);
    let mut runner = TestRunner::new_with_rng(config, rng);
    let coeff = (0.1..2.0f64, proptest::bool::ANY).prop_map(|(m, s)| if s { m } else { -m });
    let strategy = (
        proptest::collection::vec(coeff, 10),
        (0.0..0.5f64, 0.8..1.0f64, 1.0..1.7f64),
        (0.05..0.5f64, 0.05..0.5f64, 0.05..0.5f64),
    );
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (c, point, offsets) = strategy
            .new_tree(&mut runner)
            .map_err(|e| eqfree::Error::InvalidParameter {
                name: "strategy",
                reason: e.to_string(),
            })?
            .current();
        let q = |s: f64, v: f64, h: f64| {
            c[0] + c[1] * s + c[2] * v + c[3] * h
                + c[4] * s * s + c[5] * v * v + c[6] * h * h
                + c[7] * s * v + c[8] * s * h + c[9] * v * h
        };
        let (s, v, h) = point;
        let d = fd_second_order(|a, b, e| Ok(q(a, b, e)), point, offsets)?;
        let exact = [
            c[1] + 2.0 * c[4] * s + c[7] * v + c[8] * h,
            c[2] + 2.0 * c[5] * v + c[7] * s + c[9] * h,
            c[3] + 2.0 * c[6] * h + c[8] * s + c[9] * v,
            2.0 * c[4],
            c[7],
            c[8],
        ];
        let got = [d.f_sigma, d.f_v0, d.f_h, d.f_sigma_sigma, d.f_v0_sigma, d.f_h_sigma];
        for (g, e) in got.iter().zip(&exact) {
            worst = worst.max((g - e).abs() / e.abs().max(1.0));
        }
    }
    Ok((worst <= 1e-10, format!("max relative error {worst:.2e} over 50 quadratics (tol 1e-10)")))
}

fn theorem_rate() -> Result<(bool, String)> {
    let settings = ToySettings::default();
    let tskips = [2.0, 4.0, 6.0, 8.0, 10.0];
    let mut pass = true;
    let mut parts = Vec::new();
    for eps in [0.001, 0.01, 0.05] {
        let sys = ToySystem {
            epsilon: eps,
            ..ToySystem::default()
        };
        let scan = convergence_scan(0.5, 10.0, &sys, &tskips, &settings)?;
        let ok = scan.slope >= -1.2 * sys.fast_rate && scan.slope <= -0.8 * sys.fast_rate;
        pass &= ok;
        parts.push(format!("slope(eps={eps}) {:.4}", scan.slope));
    }
    let a = ToySystem::default();
    let b = ToySystem {
        lift_offsets: (-0.25, 0.35),
        ..a
    };
    let t_skip = 20.0 / a.fast_rate;
    let pa = toy_implicit_step(0.5, 10.0, t_skip, &a, &settings)?;
    let pb = toy_implicit_step(0.5, 10.0, t_skip, &b, &settings)?;
    let gap = (pa - pb).abs();
    pass &= gap <= 1e-10;
    parts.push(format!(
        "|Phi_A - Phi_B| at t_skip=20 {gap:.2e} (tol 1e-10, offsets {:?} vs {:?})",
        a.lift_offsets, b.lift_offsets
    ));
    Ok((pass, parts.join(", ")))
}

fn direct_regimes() -> Result<(bool, String)> {
    let params = ModelParams::default();
    let run = |v0: f64| -> Result<f64> {
        let p = params.with_v0(v0);
        Ok(restrict(&integrate(&perturbed_state(&p), &p, 5e4, &Default::default())?, &p))
    };
    let low = run(0.87)?;
    let high = run(0.91)?;
    Ok((
        low < 1e-3 && high > 0.1,
        format!("sigma(5e4) = {low:.3e} at v0=0.87 (< 1e-3), {high:.4} at v0=0.91 (> 0.1)"),
    ))
}

fn build_shared() -> Result<Shared> {
    let params = ModelParams::default().with_h(1.2);
    let coarse = CoarseSettings::default();
    let cont = ContinuationSettings::default();
    let profiles = seed_profiles((0.91, 0.90), 5e4, &params, &coarse.integrator)?;
    let to_fold = branch_from_profiles(
        &profiles,
        1.0,
        MAX_STEPS,
        &params,
        &coarse,
        &ContinuationSettings {
            stop_after_fold: true,
            ..cont
        },
    )?;
    let full = extend_branch(&to_fold, MAX_STEPS, &coarse, &cont)?;
    Ok(Shared {
        params,
        coarse,
        cont,
        profiles,
        to_fold,
        full,
    })
}

fn fold_reproduction(s: &Shared) -> Result<(bool, String)> {
    let f = detect_fold(&s.full)?;
    let pass = within(f.v0, 0.88, 0.01) && within(f.sigma_healed, 0.125, 0.01);
    Ok((
        pass,
        format!(
            "fold at v0 {:.5} (0.88 +- 0.01), sigma_healed {:.5} (0.125 +- 0.01), F_sigma sign change {}, stability change {}, {} points",
            f.v0,
            f.sigma_healed,
            f.f_sigma_sign_change,
            f.stability_change,
            s.full.points.len()
        ),
    ))
}

fn hopf_crossing(s: &Shared) -> Result<(bool, String)> {
    let analytic = hopf_v0(1.2, 1, &s.params)?;
    let reached = s.full.termination == Termination::SigmaFloor;
    let last = s.full.points.last().map_or(f64::NAN, |p| p.sigma);
    let v0 = extrapolate_to_zero(&s.full, 5)?;
    Ok((
        reached && within(v0, analytic, 5e-3),
        format!(
            "branch ends at sigma {last:.2e} ({:?}), extrapolated v0 {v0:.7} vs analytic {analytic:.7} (tol 5e-3)",
            s.full.termination
        ),
    ))
}

fn lifting_invariance(s: &Shared) -> Result<(bool, String)> {
    let grid = downsweep_grid(0.91, 0.0015, 20);
    let direct = direct_downsweep(&grid, 3e5, &s.params, &s.coarse.integrator)?;
    let sweep = lifting_sweep(
        &[0.95, 1.0, 1.05],
        &s.profiles,
        &direct,
        &BranchDistanceSpec::lifting(),
        MAX_STEPS,
        &s.params,
        &s.coarse,
        &s.cont,
    )?;
    let unhealed = sweep.rows[0].unhealed_distance;
    let mut pair_max: f64 = 0.0;
    for (i, k) in [(0, 1), (0, 2), (1, 2)] {
        pair_max = pair_max.max(sweep.healed_pair_distance(i, k)?);
    }
    let d: Vec<f64> = sweep.rows.iter().map(|r| r.healed_distance).collect();
    let monotone = (d[1] - d[0]) * (d[2] - d[1]) > 0.0;
    let spread = d.iter().cloned().fold(f64::MIN, f64::max) - d.iter().cloned().fold(f64::MAX, f64::min);
    let trend = monotone && spread > 0.2 * unhealed;
    Ok((
        pair_max * 5.0 <= unhealed && !trend,
        format!(
            "max healed pair distance {pair_max:.3e}, unhealed distance at p=0.95 {unhealed:.3e} (ratio {:.1}, need >= 5), healed-vs-direct {:?} on [{:.4}, {:.4}], trend {}",
            unhealed / pair_max,
            d.iter().map(|v| format!("{v:.3e}")).collect::<Vec<_>>(),
            sweep.spec.a,
            sweep.spec.b,
            if trend { "monotone" } else { "none" }
        ),
    ))
}

/// Healed sigma on the unstable part of `branch` at `v0`, linearly
/// interpolated.
fn unstable_healed_at(branch: &Branch, v0: f64) -> Option<f64> {
    let n = branch.stable_segment().len();
    branch.points[n.saturating_sub(1)..].windows(2).find_map(|w| {
        if (w[0].v0 - v0) * (w[1].v0 - v0) <= 0.0 && w[0].v0 != w[1].v0 {
            let t = (v0 - w[0].v0) / (w[1].v0 - w[0].v0);
            Some(w[0].sigma_healed + t * (w[1].sigma_healed - w[0].sigma_healed))
        } else {
            None
        }
    })
}

struct Backward {
    stable_healed: f64,
    unstable_healed: f64,
    start: f64,
    steps: Vec<eqfree::solvers::ProjectiveStep>,
    ctx: LiftContext,
    params: ModelParams,
}

fn backward_trajectory(s: &Shared) -> Result<Backward> {
    let v0 = 0.884;
    let params = s.params.with_v0(v0);
    let unstable_healed = unstable_healed_at(&s.full, v0).ok_or(eqfree::Error::InvalidParameter {
        name: "v0",
        reason: "outside the unstable segment".into(),
    })?;
    let warm = integrate(&s.profiles.states.1, &params, 5e4, &s.coarse.integrator)?;
    let seed = seed_from_state(warm, v0, 1.0, &s.params, &s.coarse)?;
    let start = seed.point.sigma - 0.005;
    let steps = projective_trajectory(start, -5000.0, 30, &seed.ctx, true, &params, &s.coarse)?;
    Ok(Backward {
        stable_healed: seed.point.sigma_healed,
        unstable_healed,
        start,
        steps,
        ctx: seed.ctx,
        params,
    })
}

fn backward_heteroclinic(b: &Backward) -> Result<(bool, String)> {
    let diffs: Vec<f64> = b
        .steps
        .iter()
        .map(|st| (st.healed_from - b.unstable_healed).abs())
        .collect();
    let tail = diffs[diffs.len() - 10..].iter().cloned().fold(0.0, f64::max);
    let first = diffs.iter().position(|&d| d <= 1e-3);
    Ok((
        tail <= 1e-3,
        format!(
            "healed {:.5} -> {:.5} vs unstable branch {:.5}; max gap over steps 21-30 {tail:.2e} (tol 1e-3), first within tol at step {}",
            b.stable_healed,
            b.steps.last().map_or(f64::NAN, |st| st.healed_from),
            b.unstable_healed,
            first.map_or("none".to_string(), |i| (i + 1).to_string())
        ),
    ))
}

fn fb_error_scaling(b: &Backward, coarse: &CoarseSettings) -> Result<(bool, String)> {
    let mid = 0.5 * (b.stable_healed + b.unstable_healed);
    let j = (0..b.steps.len())
        .min_by(|&i, &k| {
            (b.steps[i].healed_from - mid)
                .abs()
                .total_cmp(&(b.steps[k].healed_from - mid).abs())
        })
        .unwrap_or(0);
    let (sigma, ctx) = if j == 0 {
        (b.start, b.ctx.clone())
    } else {
        (
            b.steps[j - 1].sigma,
            b.ctx.with_reference(b.steps[j - 1].healed_state.clone(), &b.params)?,
        )
    };
    let deltas = [300.0, 600.0, 1200.0, 2400.0, 4800.0];
    let a_pairs: Vec<(f64, f64)> = deltas.iter().map(|&d| (300.0, d)).collect();
    let a = fberror_scan(sigma, &a_pairs, &ctx, &b.params, coarse)?;
    let x: Vec<f64> = a.iter().map(|r| -r.dt).collect();
    let y: Vec<f64> = a.iter().map(|r| r.error).collect();
    let slope = loglog_slope(&x, &y, 0.0)?;
    let b_pairs: Vec<(f64, f64)> = [300.0, 600.0, 1000.0, 1500.0, 2000.0].iter().map(|&t| (t, 2000.0)).collect();
    let bscan = fberror_scan(sigma, &b_pairs, &ctx, &b.params, coarse)?;
    let hi = bscan.iter().map(|r| r.error).fold(f64::MIN, f64::max);
    let lo = bscan.iter().map(|r| r.error).fold(f64::MAX, f64::min);
    let ratio = hi / lo;
    Ok((
        (1.7..=2.3).contains(&slope) && ratio < 10.0,
        format!(
            "base sigma {sigma:.5} (healed {:.5}, step {j}); errors {:?}; slope {slope:.3} (need [1.7, 2.3]); t_skip max/min {ratio:.2} (need < 10)",
            b.steps[j].healed_from,
            y.iter().map(|e| format!("{e:.2e}")).collect::<Vec<_>>()
        ),
    ))
}

fn fold_curve_consistency(s: &Shared) -> Result<(bool, String)> {
    let at_12 = detect_fold(&s.to_fold)?;
    let (seed, _) = refine_fold(&at_12, &s.to_fold.context, &s.params, &s.coarse)?;
    let curve_cont = ContinuationSettings {
        step: 0.005,
        h_range: (1.1, 1.25),
        ..s.cont
    };
    let curve = continue_fold(&seed, 60, &s.to_fold.context, &s.params, &s.coarse, &curve_cont)?;
    let h112 = s.params.with_h(1.12);
    let other = branch_from_simulations(
        seed_v0(1.12, &s.params)?,
        5e4,
        1.0,
        MAX_STEPS,
        &h112,
        &s.coarse,
        &ContinuationSettings {
            stop_after_fold: true,
            ..s.cont
        },
    )?;
    let at_112 = detect_fold(&other)?;
    let (lo, hi) = (
        curve.points.first().map_or(f64::NAN, |p| p.h),
        curve.points.last().map_or(f64::NAN, |p| p.h),
    );
    let c112 = curve.v0_at(1.12).unwrap_or(f64::NAN);
    let c12 = curve.v0_at(1.2).unwrap_or(f64::NAN);
    let d112 = (c112 - at_112.v0).abs();
    let d12 = (c12 - at_12.v0).abs();
    Ok((
        lo <= 1.1 && hi >= 1.25 && d112 <= 2e-3 && d12 <= 2e-3,
        format!(
            "curve spans h [{lo:.4}, {hi:.4}] with {} points; h=1.12: {c112:.6} vs {:.6} (|dv0| {d112:.1e}); h=1.2: {c12:.6} vs {:.6} (|dv0| {d12:.1e}); tol 2e-3",
            curve.points.len(),
            at_112.v0,
            at_12.v0
        ),
    ))
}

fn main() {
    let total = Instant::now();
    let mut r = Runner { outcomes: Vec::new() };

    let t = Instant::now();
    r.record(5, "lift/restrict identity", t, lift_identity());
    let t = Instant::now();
    r.record(8, "stencil exactness", t, stencil_exactness());
    let t = Instant::now();
    r.record(9, "healing-time convergence rate", t, theorem_rate());
    let t = Instant::now();
    r.record(3, "direct-simulation regimes", t, direct_regimes());

    let t = Instant::now();
    match build_shared() {
        Ok(shared) => {
            r.record(1, "fold reproduction", t, fold_reproduction(&shared));
            let t = Instant::now();
            r.record(2, "Hopf cross-validation", t, hopf_crossing(&shared));
            let t = Instant::now();
            match backward_trajectory(&shared) {
                Ok(b) => {
                    r.record(6, "backward heteroclinic", t, backward_heteroclinic(&b));
                    let t = Instant::now();
                    r.record(7, "forward-backward error scaling", t, fb_error_scaling(&b, &shared.coarse));
                }
                Err(e) => {
                    r.record(6, "backward heteroclinic", t, Err(e.clone()));
                    r.record(7, "forward-backward error scaling", t, Err(e));
                }
            }
            let t = Instant::now();
            r.record(10, "fold-curve consistency", t, fold_curve_consistency(&shared));
            let t = Instant::now();
            r.record(4, "lifting invariance", t, lifting_invariance(&shared));
        }
        Err(e) => {
            for (id, name) in [
                (1, "fold reproduction"),
                (2, "Hopf cross-validation"),
                (6, "backward heteroclinic"),
                (7, "forward-backward error scaling"),
                (10, "fold-curve consistency"),
                (4, "lifting invariance"),
            ] {
                r.record(id, name, t, Err(e.clone()));
            }
        }
    }

    let passed = r.outcomes.iter().filter(|o| o.pass).count();
    println!(
        "acceptance: {passed}/{} criteria passed in {:.0}s",
        r.outcomes.len(),
        total.elapsed().as_secs_f64()
    );
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if strict && passed < r.outcomes.len() {
        std::process::exit(1);
    }
}
