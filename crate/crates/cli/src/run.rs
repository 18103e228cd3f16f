use eqfree::analysis::{
    branch_from_profiles, direct_downsweep, downsweep_grid, fberror_scan, hopf_curves, hopf_v0,
    lifting_sweep, loglog_slope, projective_trajectory, seed_profiles, seed_v0, tskip_scan,
    BranchDistanceSpec, NormKind, SeedProfiles,
};
use eqfree::coarse_map::restrict;
use eqfree::continuation::{
    continue_fold, detect_fold, extrapolate_to_zero, refine_fold, seed_from_state, Branch,
    BranchPoint, ContinuationSettings, Termination, MIN_REFERENCE_SIGMA,
};
use eqfree::convergence_lab::{convergence_scan, ERROR_FLOOR};
use eqfree::micro_model::{integrate, integrate_checkpoints, perturbed_state};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{Command, RunConfig};
use crate::error::Result;
use crate::output::{Cell, OutDir, Table};

/// What a finished run produced.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub files: Vec<String>,
    /// A branch or curve stopped on a corrector failure.
    pub truncated: bool,
    pub config_hash: String,
}

/// SHA-256 over the canonical JSON of every setting that affects results.
pub fn config_hash(config: &RunConfig) -> String {
    let mut v = serde_json::to_value(config).expect("config serializes");
    if let Value::Object(m) = &mut v {
        m.remove("threads");
        m.remove("out");
    }
    let digest = Sha256::digest(v.to_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Fixed choices baked into the numerics, recorded alongside the config.
fn design_knobs() -> Value {
    json!({
        "newton_update": "x - nu * J^-1 r",
        "newton_max_condition_1norm": eqfree::solvers::MAX_CONDITION,
        "equilibrium_residual": "P(t_skip + delta) - P(t_skip) = delta * F",
        "reference_policy": "healed end state of each accepted point",
        "min_reference_sigma": MIN_REFERENCE_SIGMA,
        "fold_detection": "first v0 turn, parabola in chord length",
        "hopf_extrapolation": "v0 = c0 + c2 sigma_healed^2 over last 5 points",
        "fold_refinement": "3x3 Newton with h fixed",
        "integrator": "DOPRI5(4), checkpoints hit exactly",
        "distance_quadrature": "natural cubic spline, adaptive Simpson 1e-10",
    })
}

fn branch_seeds(config: &RunConfig) -> Result<(f64, f64)> {
    match config.seed_v0 {
        Some(s) => Ok(s),
        None => Ok(seed_v0(config.model.h, &config.model)?),
    }
}

fn profiles(config: &RunConfig) -> Result<SeedProfiles> {
    Ok(seed_profiles(
        branch_seeds(config)?,
        config.seed_time,
        &config.model,
        &config.coarse.integrator,
    )?)
}

fn branch_table(points: &[BranchPoint], extra: Option<f64>) -> Table {
    let mut header = vec![];
    if extra.is_some() {
        header.push("p");
    }
    header.extend(["sigma", "sigma_healed", "v0", "h", "f_sigma", "multiplier", "stable"]);
    let mut t = Table::new(&header);
    append_branch(&mut t, points, extra);
    t
}

fn append_branch(t: &mut Table, points: &[BranchPoint], extra: Option<f64>) {
    for p in points {
        let mut cells = Vec::with_capacity(8);
        if let Some(x) = extra {
            cells.push(Cell::F(x));
        }
        cells.extend([
            Cell::F(p.sigma),
            Cell::F(p.sigma_healed),
            Cell::F(p.v0),
            Cell::F(p.h),
            Cell::F(p.f_sigma),
            Cell::F(p.multiplier),
            Cell::B(p.stable),
        ]);
        t.row(&cells);
    }
}

fn branch_summary(b: &Branch) -> Value {
    let fold = detect_fold(b).ok().map(|f| {
        json!({
            "v0": f.v0, "sigma": f.sigma, "sigma_healed": f.sigma_healed,
            "f_sigma_sign_change": f.f_sigma_sign_change, "stability_change": f.stability_change,
        })
    });
    let hopf = (b.termination == Termination::SigmaFloor)
        .then(|| extrapolate_to_zero(b, 5).ok())
        .flatten();
    json!({
        "points": b.points.len(),
        "termination": format!("{:?}", b.termination),
        "fold": fold,
        "sigma_zero_v0": hopf,
    })
}

fn simulate(config: &RunConfig, out: &mut OutDir) -> Result<(Value, bool)> {
    let p = config.model;
    let n = (config.simulate.sim_time / config.simulate.sample_dt).round() as usize;
    let times: Vec<f64> = (0..=n).map(|k| k as f64 * config.simulate.sample_dt).collect();
    let traj = integrate_checkpoints(&perturbed_state(&p), &p, &times, &config.coarse.integrator)?;
    let mut t = Table::new(&["t", "sigma"]);
    for (time, s) in times.iter().zip(&traj.states) {
        t.row(&[Cell::F(*time), Cell::F(restrict(s, &p))]);
    }
    out.table("simulation.csv", &t)?;
    let last = traj.states.last().map_or(f64::NAN, |s| restrict(s, &p));
    Ok((
        json!({
            "final_sigma": last,
            "overtaking": traj.overtaking_occurred(),
            "integrator_steps": traj.stats.accepted,
        }),
        false,
    ))
}

fn branch(config: &RunConfig, out: &mut OutDir) -> Result<(Value, bool)> {
    let prof = profiles(config)?;
    let b = branch_from_profiles(&prof, config.p, config.n_steps, &config.model, &config.coarse, &config.continuation)?;
    out.table("branch.csv", &branch_table(&b.points, None))?;
    Ok((branch_summary(&b), b.truncated()))
}

fn fold2(config: &RunConfig, out: &mut OutDir) -> Result<(Value, bool)> {
    let prof = profiles(config)?;
    let cont = ContinuationSettings {
        stop_after_fold: true,
        ..config.continuation
    };
    let b = branch_from_profiles(&prof, config.p, config.n_steps, &config.model, &config.coarse, &cont)?;
    out.table("branch.csv", &branch_table(&b.points, None))?;
    if b.truncated() {
        return Ok((json!({ "branch": branch_summary(&b) }), true));
    }
    let estimate = detect_fold(&b)?;
    let (seed, _) = refine_fold(&estimate, &b.context, &config.model, &config.coarse)?;
    let curve_cont = ContinuationSettings {
        step: config.fold.step,
        h_range: config.fold.h_range,
        ..config.continuation
    };
    let curve = continue_fold(&seed, config.fold.n_steps, &b.context, &config.model, &config.coarse, &curve_cont)?;
    let mut t = Table::new(&[
        "h", "v0", "sigma", "sigma_healed", "f_sigma", "f_sigma_sigma", "cusp_warning",
    ]);
    for q in &curve.points {
        t.row(&[
            Cell::F(q.h),
            Cell::F(q.v0),
            Cell::F(q.sigma),
            Cell::F(q.sigma_healed),
            Cell::F(q.f_sigma),
            Cell::F(q.f_sigma_sigma),
            Cell::B(q.cusp_warning),
        ]);
    }
    out.table("fold_curve.csv", &t)?;
    Ok((
        json!({
            "branch": branch_summary(&b),
            "refined_fold": { "v0": seed.v0, "sigma": seed.sigma, "sigma_healed": seed.sigma_healed, "h": seed.h },
            "curve_points": curve.points.len(),
            "curve_termination": format!("{:?}", curve.termination),
        }),
        curve.truncated(),
    ))
}

/// Stable equilibrium at `v0`, reached by a warm-started direct run from the
/// second seed profile.
fn stable_seed(config: &RunConfig, v0: f64) -> Result<eqfree::continuation::Seed> {
    let prof = profiles(config)?;
    let p = config.model.with_v0(v0);
    let warm = integrate(&prof.states.1, &p, config.seed_time, &config.coarse.integrator)?;
    Ok(seed_from_state(warm, v0, config.p, &config.model, &config.coarse)?)
}

fn backward(config: &RunConfig, out: &mut OutDir) -> Result<(Value, bool)> {
    let bw = &config.backward;
    let seed = stable_seed(config, bw.v0)?;
    let p = config.model.with_v0(bw.v0);
    let start = seed.point.sigma - bw.offset;
    let steps = projective_trajectory(start, bw.dt, bw.n_steps, &seed.ctx, bw.update_reference, &p, &config.coarse)?;
    let mut t = Table::new(&["step", "t", "sigma", "sigma_healed", "rate"]);
    let mut sigma = start;
    for (j, st) in steps.iter().enumerate() {
        t.row(&[
            Cell::U(j),
            Cell::F(j as f64 * bw.dt),
            Cell::F(sigma),
            Cell::F(st.healed_from),
            Cell::F(st.rate),
        ]);
        sigma = st.sigma;
    }
    t.row(&[
        Cell::U(steps.len()),
        Cell::F(steps.len() as f64 * bw.dt),
        Cell::F(sigma),
        Cell::F(f64::NAN),
        Cell::F(f64::NAN),
    ]);
    out.table("backward.csv", &t)?;
    Ok((
        json!({
            "stable_sigma": seed.point.sigma,
            "stable_sigma_healed": seed.point.sigma_healed,
            "final_sigma": sigma,
            "final_sigma_healed": steps.last().map(|s| s.healed_from),
        }),
        false,
    ))
}

fn hopf(config: &RunConfig, out: &mut OutDir) -> Result<(Value, bool)> {
    let (lo, hi) = config.hopf.h_range;
    let n = config.hopf.points;
    let hs: Vec<f64> = (0..n)
        .map(|k| if n == 1 { lo } else { lo + (hi - lo) * k as f64 / (n - 1) as f64 })
        .collect();
    let rows = hopf_curves(&hs, &config.hopf.modes, &config.model)?;
    let mut t = Table::new(&["h", "j", "v0", "omega"]);
    for r in &rows {
        t.row(&[Cell::F(r.h), Cell::U(r.j), Cell::F(r.v0), Cell::F(r.omega)]);
    }
    out.table("hopf.csv", &t)?;
    Ok((json!({ "v0_at_h": { "h": config.model.h, "j1": hopf_v0(config.model.h, 1, &config.model)? } }), false))
}

fn lifting(config: &RunConfig, out: &mut OutDir) -> Result<(Value, bool)> {
    let l = &config.lifting;
    let prof = profiles(config)?;
    let grid = downsweep_grid(l.direct_v0_start, l.direct_v0_step, l.direct_points);
    let direct = direct_downsweep(&grid, l.direct_time, &config.model, &config.coarse.integrator)?;
    let spec = BranchDistanceSpec {
        a: l.a,
        b: l.b,
        norm: NormKind::L2Squared,
    };
    let sweep = lifting_sweep(&l.p_list, &prof, &direct, &spec, config.n_steps, &config.model, &config.coarse, &config.continuation)?;
    let mut d = Table::new(&["v0", "sigma", "jam"]);
    for p in &direct {
        d.row(&[Cell::F(p.v0), Cell::F(p.sigma), Cell::B(p.jam)]);
    }
    out.table("sweep_direct.csv", &d)?;
    let mut s = Table::new(&["p", "unhealed_distance", "healed_distance"]);
    let mut branches = branch_table(&[], Some(0.0));
    let mut truncated = false;
    for r in &sweep.rows {
        s.row(&[Cell::F(r.p), Cell::F(r.unhealed_distance), Cell::F(r.healed_distance)]);
        append_branch(&mut branches, &r.branch.points, Some(r.p));
        truncated |= r.branch.truncated();
    }
    out.table("sweep_lifting.csv", &s)?;
    out.table("sweep_lifting_branches.csv", &branches)?;
    let mut pairs = Vec::new();
    for i in 0..sweep.rows.len() {
        for k in i + 1..sweep.rows.len() {
            pairs.push(json!({
                "p": [sweep.rows[i].p, sweep.rows[k].p],
                "healed_distance": sweep.healed_pair_distance(i, k)?,
            }));
        }
    }
    Ok((json!({ "interval": [sweep.spec.a, sweep.spec.b], "pairs": pairs }), truncated))
}

fn tskip(config: &RunConfig, out: &mut OutDir) -> Result<(Value, bool)> {
    let ts = &config.tskip;
    let prof = profiles(config)?;
    let spec = BranchDistanceSpec {
        a: ts.a,
        b: ts.b,
        norm: NormKind::L1,
    };
    let scan = tskip_scan(&ts.values, ts.reference, &prof, &spec, config.n_steps, &config.model, &config.coarse, &config.continuation)?;
    let mut s = Table::new(&["t_skip", "distance"]);
    let mut branches = Table::new(&[
        "t_skip", "sigma", "sigma_healed", "v0", "h", "f_sigma", "multiplier", "stable",
    ]);
    let mut truncated = false;
    for r in &scan.rows {
        s.row(&[Cell::F(r.t_skip), Cell::F(r.distance)]);
        append_branch(&mut branches, &r.branch.points, Some(r.t_skip));
        truncated |= r.branch.truncated();
    }
    out.table("sweep_tskip.csv", &s)?;
    out.table("sweep_tskip_branches.csv", &branches)?;
    Ok((json!({ "interval": [scan.spec.a, scan.spec.b], "reference_t_skip": scan.reference_t_skip }), truncated))
}

fn fberror(config: &RunConfig, out: &mut OutDir) -> Result<(Value, bool)> {
    let fb = &config.fberror;
    let seed = stable_seed(config, fb.v0)?;
    let p = config.model.with_v0(fb.v0);
    let a_pairs: Vec<(f64, f64)> = fb.delta_list.iter().map(|&d| (config.coarse.t_skip, d)).collect();
    let b_pairs: Vec<(f64, f64)> = fb.tskip_list.iter().map(|&t| (t, config.coarse.delta)).collect();
    let a = fberror_scan(fb.sigma, &a_pairs, &seed.ctx, &p, &config.coarse)?;
    let b = fberror_scan(fb.sigma, &b_pairs, &seed.ctx, &p, &config.coarse)?;
    let mut t = Table::new(&["scan", "t_skip", "delta", "dt", "sigma_back", "error"]);
    for (label, rows) in [("dt", &a), ("t_skip", &b)] {
        for r in rows {
            t.row(&[
                Cell::S(label),
                Cell::F(r.t_skip),
                Cell::F(r.delta),
                Cell::F(r.dt),
                Cell::F(r.sigma_back),
                Cell::F(r.error),
            ]);
        }
    }
    out.table("sweep_fberror.csv", &t)?;
    let x: Vec<f64> = a.iter().map(|r| -r.dt).collect();
    let y: Vec<f64> = a.iter().map(|r| r.error).collect();
    let slope = loglog_slope(&x, &y, 0.0).ok();
    let hi = b.iter().map(|r| r.error).fold(f64::MIN, f64::max);
    let lo = b.iter().map(|r| r.error).fold(f64::MAX, f64::min);
    Ok((json!({ "loglog_slope_dt": slope, "t_skip_error_ratio": hi / lo }), false))
}

fn converge(config: &RunConfig, out: &mut OutDir) -> Result<(Value, bool)> {
    let toy = &config.toy;
    let scan = convergence_scan(toy.x, toy.delta, &toy.system, &toy.tskip_list, &toy.settings)?;
    let mut t = Table::new(&["t_skip", "value", "error"]);
    for r in &scan.rows {
        t.row(&[Cell::F(r.t_skip), Cell::F(r.value), Cell::F(r.error)]);
    }
    out.table("convergence.csv", &t)?;
    let slope = scan.slope.is_finite().then_some(scan.slope);
    Ok((
        json!({ "reference": scan.reference, "slope": slope, "error_floor": ERROR_FLOOR }),
        false,
    ))
}

/// Runs the configured command, writing CSV files, a `TRUNCATED` marker for
/// partial results and `run.json` into `config.out`.
pub fn run(config: &RunConfig) -> Result<RunSummary> {
    config.validate()?;
    let mut out = OutDir::create(&config.out)?;
    let (results, truncated) = match config.command {
        Command::Simulate => simulate(config, &mut out)?,
        Command::Branch => branch(config, &mut out)?,
        Command::Fold2 => fold2(config, &mut out)?,
        Command::Backward => backward(config, &mut out)?,
        Command::Hopf => hopf(config, &mut out)?,
        Command::LiftingSweep => lifting(config, &mut out)?,
        Command::TskipScan => tskip(config, &mut out)?,
        Command::FberrorScan => fberror(config, &mut out)?,
        Command::ConvergeLab => converge(config, &mut out)?,
    };
    if truncated {
        out.write("TRUNCATED", "corrector failed after the maximum number of step halvings\n")?;
    }
    let hash = config_hash(config);
    let meta = json!({
        "version": env!("CARGO_PKG_VERSION"),
        "command": config.command,
        "config_hash": hash,
        "config": config,
        "design": design_knobs(),
        "truncated": truncated,
        "files": out.written(),
        "results": results,
    });
    let text = serde_json::to_string_pretty(&meta).expect("metadata serializes") + "\n";
    out.write("run.json", &text)?;
    Ok(RunSummary {
        files: out.written().to_vec(),
        truncated,
        config_hash: hash,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_output_location_and_threads() {
        let a = RunConfig::defaults(Command::Hopf);
        let mut b = a.clone();
        b.out = "elsewhere".into();
        b.threads = Some(3);
        assert_eq!(config_hash(&a), config_hash(&b));
        b.model.h = 1.3;
        assert_ne!(config_hash(&a), config_hash(&b));
        assert_eq!(config_hash(&a).len(), 64);
    }
}
