//! Optimal-velocity car-following model on a ring road.
//!
//! Car `n` follows car `n + 1`; the last car follows the first one, which is
//! one lap (`road_length`) ahead. Positions are stored unwrapped.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::integrator::{self, IntegrationStats, IntegratorSettings, OdeSystem};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Driver/car inertia.
    pub tau: f64,
    /// Velocity scale of the optimal-velocity function.
    pub v0: f64,
    /// Safety distance (inflection point of the optimal-velocity function).
    pub h: f64,
    pub road_length: f64,
    pub cars: usize,
    /// Amplitude of the sinusoidal initial perturbation.
    pub mu: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            tau: 1.0 / 1.7,
            v0: 0.91,
            h: 1.2,
            road_length: 60.0,
            cars: 60,
            mu: 0.1,
        }
    }
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(invalid("tau", "must be positive"));
        }
        if !(self.v0 > 0.0) {
            return Err(invalid("v0", "must be positive"));
        }
        if !self.h.is_finite() {
            return Err(invalid("h", "must be finite"));
        }
        if !(self.road_length > 0.0) {
            return Err(invalid("L", "must be positive"));
        }
        if self.cars < 2 {
            return Err(invalid("N", "at least two cars are required"));
        }
        if !(self.mu >= 0.0) {
            return Err(invalid("mu", "must be non-negative"));
        }
        Ok(())
    }

    pub fn with_v0(mut self, v0: f64) -> Self {
        self.v0 = v0;
        self
    }

    pub fn with_h(mut self, h: f64) -> Self {
        self.h = h;
        self
    }

    /// Mean headway `L / N`.
    pub fn mean_headway(&self) -> f64 {
        self.road_length / self.cars as f64
    }

    /// `V(dx) = v0 (tanh(dx - h) + tanh(h))`.
    #[inline]
    pub fn ov_velocity(&self, dx: f64) -> f64 {
        self.v0 * ((dx - self.h).tanh() + self.h.tanh())
    }

    /// Derivative `V'(dx)`.
    pub fn ov_slope(&self, dx: f64) -> f64 {
        let t = (dx - self.h).tanh();
        self.v0 * (1.0 - t * t)
    }
}

/// `V(dx)` for the given parameters.
pub fn ov_velocity(dx: f64, params: &ModelParams) -> f64 {
    params.ov_velocity(dx)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicroState {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl MicroState {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: x.len(),
                actual: y.len(),
            });
        }
        Ok(Self { x, y })
    }

    pub fn cars(&self) -> usize {
        self.x.len()
    }

    fn check(&self, params: &ModelParams) -> Result<()> {
        for len in [self.x.len(), self.y.len()] {
            if len != params.cars {
                return Err(Error::DimensionMismatch {
                    expected: params.cars,
                    actual: len,
                });
            }
        }
        Ok(())
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut u = Vec::with_capacity(2 * self.x.len());
        u.extend_from_slice(&self.x);
        u.extend_from_slice(&self.y);
        u
    }

    fn from_flat(u: &[f64]) -> Self {
        let n = u.len() / 2;
        Self {
            x: u[..n].to_vec(),
            y: u[n..].to_vec(),
        }
    }

    /// Shifts all positions by `c`.
    pub fn translated(&self, c: f64) -> Self {
        Self {
            x: self.x.iter().map(|x| x + c).collect(),
            y: self.y.clone(),
        }
    }

    /// Relabels the cars so that car `n` becomes car `n - k` (mod N), keeping
    /// positions unwrapped and monotone.
    pub fn rotated(&self, k: usize, params: &ModelParams) -> Self {
        let n = self.x.len();
        let k = k % n;
        let mut x = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let j = i + k;
            if j < n {
                x.push(self.x[j]);
            } else {
                x.push(self.x[j - n] + params.road_length);
            }
            y.push(self.y[j % n]);
        }
        Self { x, y }
    }
}

/// Headways `x_{n+1} - x_n`, with the last one wrapping around the ring.
pub fn headways(state: &MicroState, params: &ModelParams) -> Vec<f64> {
    headways_of(&state.x, params.road_length)
}

fn headways_of(x: &[f64], road_length: f64) -> Vec<f64> {
    let n = x.len();
    (0..n)
        .map(|i| {
            if i + 1 < n {
                x[i + 1] - x[i]
            } else {
                x[0] + road_length - x[i]
            }
        })
        .collect()
}

/// Time derivative of the state.
pub fn rhs(state: &MicroState, params: &ModelParams) -> Result<MicroState> {
    state.check(params)?;
    let sys = OvSystem::new(params);
    let u = state.to_flat();
    let mut du = vec![0.0; u.len()];
    sys.rhs(&u, &mut du);
    Ok(MicroState::from_flat(&du))
}

/// Flat-vector form of the model, `u = (x_1..x_N, y_1..y_N)`.
pub struct OvSystem {
    cars: usize,
    inv_tau: f64,
    v0: f64,
    h: f64,
    tanh_h: f64,
    road_length: f64,
}

impl OvSystem {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            cars: params.cars,
            inv_tau: 1.0 / params.tau,
            v0: params.v0,
            h: params.h,
            tanh_h: params.h.tanh(),
            road_length: params.road_length,
        }
    }
}

impl OdeSystem for OvSystem {
    fn dim(&self) -> usize {
        2 * self.cars
    }

    #[inline]
    fn rhs(&self, u: &[f64], du: &mut [f64]) {
        let n = self.cars;
        let (x, y) = u.split_at(n);
        let (dx, dy) = du.split_at_mut(n);
        dx.copy_from_slice(y);
        for i in 0..n {
            let ahead = if i + 1 < n {
                x[i + 1]
            } else {
                x[0] + self.road_length
            };
            let v = self.v0 * ((ahead - x[i] - self.h).tanh() + self.tanh_h);
            dy[i] = self.inv_tau * (v - y[i]);
        }
    }
}

/// Result of a microscopic run with checkpoints.
#[derive(Debug, Clone)]
pub struct Trajectory {
    /// States at the requested times, in order.
    pub states: Vec<MicroState>,
    pub stats: IntegrationStats,
    /// Smallest headway seen at any accepted step; non-positive means cars
    /// overtook each other at some point.
    pub min_headway: f64,
}

impl Trajectory {
    pub fn overtaking_occurred(&self) -> bool {
        self.min_headway <= 0.0
    }
}

/// Integrates the model and returns the states at each of `times`.
///
/// Positions are shifted so that car 1 starts at the origin while integrating,
/// which keeps relative error control independent of absolute position.
pub fn integrate_checkpoints(
    state: &MicroState,
    params: &ModelParams,
    times: &[f64],
    settings: &IntegratorSettings,
) -> Result<Trajectory> {
    params.validate()?;
    state.check(params)?;
    let offset = state.x[0];
    let mut u0 = state.to_flat();
    for v in &mut u0[..params.cars] {
        *v -= offset;
    }
    let sys = OvSystem::new(params);
    let n = params.cars;
    let l = params.road_length;
    let mut min_headway = headways_of(&u0[..n], l)
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    let (out, stats) = integrator::integrate_observed(&sys, &u0, times, settings, |_, u| {
        for i in 0..n {
            let ahead = if i + 1 < n { u[i + 1] } else { u[0] + l };
            min_headway = min_headway.min(ahead - u[i]);
        }
    })?;
    let states = out
        .iter()
        .map(|u| MicroState::from_flat(u).translated(offset))
        .collect();
    Ok(Trajectory {
        states,
        stats,
        min_headway,
    })
}

/// Flow map `M(t; state)`.
pub fn integrate(
    state: &MicroState,
    params: &ModelParams,
    t: f64,
    settings: &IntegratorSettings,
) -> Result<MicroState> {
    if !(t >= 0.0) {
        return Err(invalid("t", "integration time must be non-negative"));
    }
    let mut traj = integrate_checkpoints(state, params, &[t], settings)?;
    Ok(traj.states.pop().expect("one checkpoint requested"))
}

/// Uniform flow: equal headways, every car at `V(L/N)`.
pub fn uniform_flow_state(params: &ModelParams) -> MicroState {
    perturbed_with(params, 0.0)
}

/// Uniform flow with positions perturbed by `mu sin(2 pi n / N)`.
pub fn perturbed_state(params: &ModelParams) -> MicroState {
    perturbed_with(params, params.mu)
}

fn perturbed_with(params: &ModelParams, mu: f64) -> MicroState {
    let n = params.cars;
    let spacing = params.mean_headway();
    let v = params.ov_velocity(spacing);
    let x = (1..=n)
        .map(|k| {
            let base = (k - 1) as f64 * spacing;
            if mu == 0.0 {
                base
            } else {
                base + mu * (2.0 * std::f64::consts::PI * k as f64 / n as f64).sin()
            }
        })
        .collect();
    MicroState {
        x,
        y: vec![v; n],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn params() -> ModelParams {
        ModelParams::default()
    }

    #[test]
    fn ov_velocity_values() {
        let p = ModelParams {
            v0: 0.9,
            h: 1.2,
            ..params()
        };
        assert_relative_eq!(p.ov_velocity(1.2), 0.9 * 1.2f64.tanh(), epsilon = 1e-15);
        assert_relative_eq!(p.ov_velocity(1e3), 0.9 * (1.0 + 1.2f64.tanh()), epsilon = 1e-14);
        assert_relative_eq!(0.9 * (1.0 + 1.2f64.tanh()), 1.650_290, epsilon = 1e-5);
        // tanh(-0.2) = -0.197375320224904, tanh(1.2) = 0.833654607012155
        assert_relative_eq!(p.ov_velocity(1.0), 0.572_651_358_108_526, epsilon = 1e-12);
    }

    #[test]
    fn ov_velocity_is_increasing_and_bounded() {
        let p = params();
        let lo = p.v0 * (p.h.tanh() - 1.0);
        let hi = p.v0 * (1.0 + p.h.tanh());
        let mut prev = f64::NEG_INFINITY;
        for k in -200..200 {
            let v = p.ov_velocity(k as f64 * 0.05);
            assert!(v > prev);
            assert!(v > lo && v < hi);
            prev = v;
        }
    }

    #[test]
    fn uniform_flow_has_zero_acceleration() {
        let p = params();
        let s = uniform_flow_state(&p);
        assert_eq!(s.x[..3], [0.0, 1.0, 2.0]);
        assert_eq!(s.x[59], 59.0);
        let d = rhs(&s, &p).unwrap();
        assert!(d.y.iter().all(|&a| a == 0.0));
        assert!(d.x.iter().all(|&v| v == p.ov_velocity(1.0)));
    }

    #[test]
    fn rhs_at_rest_with_safety_headway() {
        let p = ModelParams {
            road_length: 1.2 * 60.0,
            ..params()
        };
        let s = MicroState {
            x: (0..60).map(|k| 1.2 * k as f64).collect(),
            y: vec![0.0; 60],
        };
        let d = rhs(&s, &p).unwrap();
        for a in d.y {
            assert_relative_eq!(a, 1.7 * p.v0 * 1.2f64.tanh(), epsilon = 1e-12);
        }
    }

    #[test]
    fn rhs_two_cars() {
        let p = ModelParams {
            tau: 1.0 / 1.7,
            v0: 0.9,
            h: 1.2,
            road_length: 2.0,
            cars: 2,
            mu: 0.0,
        };
        let s = MicroState::new(vec![0.0, 0.8], vec![0.5, 0.6]).unwrap();
        let d = rhs(&s, &p).unwrap();
        // Scalar oracle: V(0.8) and V(1.2) evaluated term by term.
        let v = |dx: f64| 0.9 * ((dx - 1.2f64).tanh() + 1.2f64.tanh());
        assert_relative_eq!(d.y[0], (1.0 / (1.0 / 1.7)) * (v(0.8) - 0.5), epsilon = 1e-14);
        assert_relative_eq!(d.y[1], (1.0 / (1.0 / 1.7)) * (v(1.2) - 0.6), epsilon = 1e-14);
        assert_eq!(d.x, vec![0.5, 0.6]);
    }

    #[test]
    fn rhs_rejects_wrong_dimension() {
        let p = params();
        let s = MicroState::new(vec![0.0; 3], vec![0.0; 3]).unwrap();
        assert!(matches!(rhs(&s, &p), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn perturbed_state_values() {
        let p = params();
        let s = perturbed_state(&p);
        assert_relative_eq!(s.x[0], 0.1 * (2.0 * std::f64::consts::PI / 60.0).sin(), epsilon = 1e-16);
        assert_relative_eq!(s.x[0], 0.010_452_846_326_765_347, epsilon = 1e-15);
        let sum: f64 = headways(&s, &p).iter().sum();
        assert_relative_eq!(sum, 60.0, epsilon = 1e-12);
        let flat = perturbed_state(&ModelParams { mu: 0.0, ..p });
        assert_eq!(flat, uniform_flow_state(&p));
    }

    #[test]
    fn headway_definition() {
        let p = ModelParams {
            road_length: 6.0,
            cars: 3,
            ..params()
        };
        let s = MicroState::new(vec![0.0, 1.0, 3.0], vec![0.0; 3]).unwrap();
        assert_eq!(headways(&s, &p), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn uniform_flow_is_transported() {
        let p = params();
        let s = uniform_flow_state(&p);
        let t = 37.5;
        let out = integrate(&s, &p, t, &IntegratorSettings::default()).unwrap();
        let v = p.ov_velocity(1.0);
        for (a, b) in out.x.iter().zip(&s.x) {
            assert_relative_eq!(*a, b + v * t, epsilon = 1e-7);
        }
        for dx in headways(&out, &p) {
            assert_relative_eq!(dx, 1.0, epsilon = 1e-7);
        }
    }

    #[test]
    fn rotation_preserves_headway_multiset() {
        let p = params();
        let s = perturbed_state(&p);
        let r = s.rotated(7, &p);
        let h0 = headways(&s, &p);
        let h1 = headways(&r, &p);
        for i in 0..60 {
            assert_relative_eq!(h1[i], h0[(i + 7) % 60], epsilon = 1e-12);
        }
    }

    #[test]
    fn negative_time_is_rejected() {
        let p = params();
        let s = uniform_flow_state(&p);
        assert!(integrate(&s, &p, -1.0, &IntegratorSettings::default()).is_err());
    }
}
