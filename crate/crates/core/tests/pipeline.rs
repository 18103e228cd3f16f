use eqfree::analysis::{hopf_v0, seed_v0};
use eqfree::coarse_map::{macro_eval, restrict, CoarseSettings, LiftContext};
use eqfree::continuation::{branch_from_simulations, ContinuationSettings, Termination};
use eqfree::micro_model::{perturbed_state, uniform_flow_state, ModelParams};

#[test]
fn uniform_flow_is_a_coarse_fixed_point() {
    let params = ModelParams::default().with_v0(0.87);
    let settings = CoarseSettings {
        t_skip: 50.0,
        delta: 100.0,
        ..Default::default()
    };
    let ctx = LiftContext::new(perturbed_state(&params), &params, 1.0).unwrap();
    let e = macro_eval(0.0, &ctx, &params, &settings).unwrap();
    // Integrator tolerance is 1e-8 on positions.
    assert!(e.healed.abs() < 1e-6 && e.advanced.abs() < 1e-6, "{} {}", e.healed, e.advanced);
    assert_eq!(restrict(&uniform_flow_state(&params), &params), 0.0);
}

#[test]
fn short_branch_stays_on_the_stable_jam() {
    let params = ModelParams::default();
    let settings = CoarseSettings::default();
    let cont = ContinuationSettings::default();
    let b = branch_from_simulations((0.91, 0.90), 5e4, 1.0, 2, &params, &settings, &cont).unwrap();
    assert_eq!(b.termination, Termination::StepBudget);
    assert_eq!(b.points.len(), 4);
    for p in &b.points {
        assert!(p.stable, "{p:?}");
        assert!(p.sigma_healed > 0.15, "{p:?}");
        assert!(p.rate.abs() < 1e-6, "{p:?}");
    }
    // Moving along the stable segment lowers v0 towards the fold.
    assert!(b.points[3].v0 < b.points[0].v0);
}

#[test]
fn seeds_follow_the_hopf_threshold() {
    let params = ModelParams::default();
    assert_eq!(seed_v0(1.2, &params).unwrap(), (0.91, 0.90));
    // Offsets are rounded to four digits.
    let shift = hopf_v0(1.12, 1, &params).unwrap() - hopf_v0(1.2, 1, &params).unwrap();
    let (a, b) = seed_v0(1.12, &params).unwrap();
    assert!((a - 0.91 - shift).abs() < 1e-4 && (b - 0.90 - shift).abs() < 1e-4);
}
