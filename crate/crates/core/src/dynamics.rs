//! Longitudinal vehicle model.
//!
//! The plant is the nonlinear point-mass model driven by wheel torque and
//! opposed by rolling resistance plus quadratic aerodynamic drag. The MPC
//! prediction models are obtained by linearizing the drag about the current
//! velocity and discretizing with a zero-order hold on the torque, the
//! disturbance velocities and the constant affine offset.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Physical constants of the homogeneous vehicle model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VehicleParams {
    /// Vehicle mass (kg).
    pub mass: f64,
    /// Frontal reference area (m²).
    pub area: f64,
    /// Air density (kg/m³).
    pub air_density: f64,
    /// Aerodynamic drag coefficient.
    pub drag_coefficient: f64,
    /// Rolling resistance coefficient.
    pub roll_coefficient: f64,
    /// Effective wheel radius (m).
    pub wheel_radius: f64,
    /// Gravitational acceleration (m/s²).
    pub gravity: f64,
    /// Road grade (rad). Only flat roads are modelled.
    pub road_grade: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            mass: 1722.0,
            area: 2.6292,
            air_density: 1.206,
            drag_coefficient: 0.2047,
            roll_coefficient: 0.0106,
            // Recovered by inverting the maximum-deceleration bound with
            // a_min = -3.218 m/s², u_min = -2000 Nm and v_max = 30 m/s.
            wheel_radius: 0.39445,
            gravity: 9.81,
            road_grade: 0.0,
        }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> crate::Result<()> {
        let positive = [
            ("mass", self.mass),
            ("area", self.area),
            ("air_density", self.air_density),
            ("drag_coefficient", self.drag_coefficient),
            ("roll_coefficient", self.roll_coefficient),
            ("wheel_radius", self.wheel_radius),
            ("gravity", self.gravity),
        ];
        for (name, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(crate::Error::Config(format!(
                    "vehicle.{name} must be strictly positive, got {value}"
                )));
            }
        }
        if self.road_grade != 0.0 {
            return Err(crate::Error::Config(
                "vehicle.road_grade must be 0 (graded roads are not modelled)".into(),
            ));
        }
        Ok(())
    }

    /// Coefficient of v² in the aerodynamic drag, ½·ρ·A·c_x.
    pub fn drag_gain(&self) -> f64 {
        0.5 * self.air_density * self.area * self.drag_coefficient
    }

    /// Grade plus rolling resistance, M·g·(sin θ + c_r·cos θ).
    pub fn rolling_force(&self) -> f64 {
        self.mass * self.gravity * (self.road_grade.sin() + self.roll_coefficient * self.road_grade.cos())
    }

    /// Total resistive force at velocity `v` (N).
    pub fn friction_force(&self, v: f64) -> f64 {
        self.rolling_force() + self.drag_gain() * v * v.abs()
    }

    /// Wheel torque that exactly balances resistance at constant speed `v`.
    pub fn equilibrium_torque(&self, v: f64) -> f64 {
        self.wheel_radius * self.friction_force(v)
    }

    /// Acceleration of a moving vehicle, without the static-friction clamp.
    fn moving_acceleration(&self, v: f64, torque: f64) -> f64 {
        (torque / self.wheel_radius - self.friction_force(v)) / self.mass
    }

    /// True when a vehicle at rest cannot be set in motion by `torque`.
    fn held_at_rest(&self, v: f64, torque: f64) -> bool {
        v <= 0.0 && torque / self.wheel_radius <= self.rolling_force()
    }
}

/// Leader plant state `[p; v]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LeaderState {
    pub p: f64,
    pub v: f64,
}

/// Follower plant state `[p; s; h; v]`: position, distance to the leader,
/// distance to the predecessor and velocity.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FollowerState {
    pub p: f64,
    pub s: f64,
    pub h: f64,
    pub v: f64,
}

/// One classical RK4 step of the point-mass ODE with the torque held.
fn rk4(params: &VehicleParams, p: f64, v: f64, torque: f64, dt: f64) -> (f64, f64) {
    let acc = |v: f64| params.moving_acceleration(v, torque);
    let (k1p, k1v) = (v, acc(v));
    let (k2p, k2v) = (v + 0.5 * dt * k1v, acc(v + 0.5 * dt * k1v));
    let (k3p, k3v) = (v + 0.5 * dt * k2v, acc(v + 0.5 * dt * k2v));
    let (k4p, k4v) = (v + dt * k3v, acc(v + dt * k3v));
    (
        p + dt / 6.0 * (k1p + 2.0 * k2p + 2.0 * k3p + k4p),
        v + dt / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v),
    )
}

/// Advances `(p, v)` by `dt` under constant wheel torque.
///
/// A vehicle at rest whose tractive force cannot overcome rolling resistance
/// stays put. A braking vehicle that would cross zero velocity inside the
/// step is stopped at the crossing instant (located by bisection on the
/// integration length) and held for the remainder.
pub fn integrate(params: &VehicleParams, p: f64, v: f64, torque: f64, dt: f64) -> (f64, f64) {
    if params.held_at_rest(v, torque) {
        return (p, 0.0);
    }
    let (p1, v1) = rk4(params, p, v, torque, dt);
    if v1 >= 0.0 {
        return (p1, v1);
    }
    let (mut lo, mut hi) = (0.0_f64, dt);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if rk4(params, p, v, torque, mid).1 >= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (rk4(params, p, v, torque, lo).0, 0.0)
}

impl LeaderState {
    /// Advances the leader plant by one sampling interval.
    pub fn step(&self, params: &VehicleParams, torque: f64, dt: f64) -> LeaderState {
        let (p, v) = integrate(params, self.p, self.v, torque, dt);
        LeaderState { p, v }
    }
}

impl FollowerState {
    /// Advances the follower plant by one sampling interval with the leader
    /// and predecessor velocities `w = [v_L, v_pred]` held over the step.
    pub fn step(&self, params: &VehicleParams, torque: f64, w: [f64; 2], dt: f64) -> FollowerState {
        let (p, v) = integrate(params, self.p, self.v, torque, dt);
        let travelled = p - self.p;
        FollowerState {
            p,
            s: self.s + w[0] * dt - travelled,
            h: self.h + w[1] * dt - travelled,
            v,
        }
    }
}

/// Continuous-time affine model `ẋ = Ā x + B̄ u + Ē w + c̄` about `v0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousModel {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub e: Option<DMatrix<f64>>,
    pub c: DVector<f64>,
    pub v0: f64,
}

/// Zero-order-hold discretization of a [`ContinuousModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteModel {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub e: Option<DMatrix<f64>>,
    pub c: DVector<f64>,
    pub v0: f64,
    pub dt: f64,
}

impl DiscreteModel {
    pub fn nx(&self) -> usize {
        self.a.nrows()
    }

    pub fn nw(&self) -> usize {
        self.e.as_ref().map_or(0, |e| e.ncols())
    }

    /// `A x + B u + E w + c`.
    pub fn apply(&self, x: &DVector<f64>, u: f64, w: Option<&DVector<f64>>) -> DVector<f64> {
        let mut next = &self.a * x + &self.b * u + &self.c;
        if let (Some(e), Some(w)) = (&self.e, w) {
            next += e * w;
        }
        next
    }
}

/// Velocity-row terms of the linearization: (∂v̇/∂v, ∂v̇/∂u, offset).
///
/// At rest the rolling-resistance offset is dropped: static friction holds a
/// stopped vehicle for every torque below the breakaway level, so the
/// prediction is exact for holding inputs.
fn velocity_row(params: &VehicleParams, v0: f64) -> (f64, f64, f64) {
    let k = params.drag_gain();
    let slope = -2.0 * k * v0 / params.mass;
    let gain = 1.0 / (params.mass * params.wheel_radius);
    let offset = if v0 > 0.0 {
        (k * v0 * v0 - params.rolling_force()) / params.mass
    } else {
        0.0
    };
    (slope, gain, offset)
}

/// Linearization of the leader dynamics (`x = [p; v]`) about `v0`.
pub fn linearize_leader(params: &VehicleParams, v0: f64) -> ContinuousModel {
    let (slope, gain, offset) = velocity_row(params, v0);
    ContinuousModel {
        a: DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, slope]),
        b: DVector::from_vec(vec![0.0, gain]),
        e: None,
        c: DVector::from_vec(vec![0.0, offset]),
        v0,
    }
}

/// Linearization of the follower dynamics (`x = [p; s; h; v]`,
/// `w = [v_L; v_pred]`) about `v0`.
pub fn linearize_follower(params: &VehicleParams, v0: f64) -> ContinuousModel {
    let (slope, gain, offset) = velocity_row(params, v0);
    #[rustfmt::skip]
    let a = DMatrix::from_row_slice(4, 4, &[
        0.0, 0.0, 0.0, 1.0,
        0.0, 0.0, 0.0, -1.0,
        0.0, 0.0, 0.0, -1.0,
        0.0, 0.0, 0.0, slope,
    ]);
    #[rustfmt::skip]
    let e = DMatrix::from_row_slice(4, 2, &[
        0.0, 0.0,
        1.0, 0.0,
        0.0, 1.0,
        0.0, 0.0,
    ]);
    ContinuousModel {
        a,
        b: DVector::from_vec(vec![0.0, 0.0, 0.0, gain]),
        e: Some(e),
        c: DVector::from_vec(vec![0.0, 0.0, 0.0, offset]),
        v0,
    }
}

/// `(e^{x} - 1)/x` and `(e^{x} - 1 - x)/x²`, accurate near zero.
fn phi_functions(x: f64) -> (f64, f64) {
    if x.abs() < 0.5 {
        let (mut phi1, mut phi2) = (0.0, 0.0);
        let mut term = 1.0; // x^k / (k+1)!
        for k in 0..40 {
            phi1 += term;
            let t2 = term / (k as f64 + 2.0); // x^k / (k+2)!
            phi2 += t2;
            term *= x / (k as f64 + 2.0);
            if t2.abs() < 1e-18 {
                break;
            }
        }
        (phi1, phi2)
    } else {
        let em1 = x.exp_m1();
        (em1 / x, (em1 - x) / (x * x))
    }
}

/// True when only the last column of `a` is nonzero, so that
/// `Āⁿ = λⁿ⁻¹ Ā` with `λ` the bottom-right entry.
fn last_column_only(a: &DMatrix<f64>) -> bool {
    let n = a.ncols();
    a.columns(0, n - 1).iter().all(|&x| x == 0.0)
}

/// Zero-order-hold discretization.
///
/// The vehicle models couple every state only through velocity, which gives
/// the closed forms `e^{Āt} = I + φ₁(t) Ā` and `∫₀ᵗ e^{Āτ}dτ = t I + φ₂(t) Ā`.
/// Other matrices go through a scaling-and-squaring Taylor exponential of
/// the augmented system.
pub fn discretize(model: &ContinuousModel, dt: f64) -> DiscreteModel {
    let n = model.a.nrows();
    if last_column_only(&model.a) {
        let lambda = model.a[(n - 1, n - 1)];
        let (phi1, phi2) = phi_functions(lambda * dt);
        let eye = DMatrix::<f64>::identity(n, n);
        let a = &eye + &model.a * (phi1 * dt);
        let integral = &eye * dt + &model.a * (phi2 * dt * dt);
        return DiscreteModel {
            a,
            b: &integral * &model.b,
            e: model.e.as_ref().map(|e| &integral * e),
            c: &integral * &model.c,
            v0: model.v0,
            dt,
        };
    }
    discretize_series(model, dt)
}

/// Discretization through the exponential of the augmented matrix
/// `[[Ā, B̄ Ē c̄], [0, 0]]·dt`.
pub fn discretize_series(model: &ContinuousModel, dt: f64) -> DiscreteModel {
    let n = model.a.nrows();
    let nw = model.e.as_ref().map_or(0, |e| e.ncols());
    let m = n + 1 + nw + 1;
    let mut aug = DMatrix::<f64>::zeros(m, m);
    aug.view_mut((0, 0), (n, n)).copy_from(&model.a);
    aug.view_mut((0, n), (n, 1)).copy_from(&model.b);
    if let Some(e) = &model.e {
        aug.view_mut((0, n + 1), (n, nw)).copy_from(e);
    }
    aug.view_mut((0, n + 1 + nw), (n, 1)).copy_from(&model.c);
    let exp = expm(&(aug * dt), 1e-12);
    DiscreteModel {
        a: exp.view((0, 0), (n, n)).into_owned(),
        b: exp.view((0, n), (n, 1)).column(0).into_owned(),
        e: model.e.as_ref().map(|_| exp.view((0, n + 1), (n, nw)).into_owned()),
        c: exp.view((0, n + 1 + nw), (n, 1)).column(0).into_owned(),
        v0: model.v0,
        dt,
    }
}

/// Matrix exponential by scaling and squaring with a truncated Taylor
/// series; terms are summed until they drop below `tol` relative to the
/// accumulated sum.
pub fn expm(m: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    let n = m.nrows();
    let norm = m.iter().fold(0.0_f64, |acc, x| acc.max(x.abs())) * n as f64;
    let squarings = if norm > 0.5 { (norm / 0.5).log2().ceil() as i32 } else { 0 };
    let scaled = m / 2f64.powi(squarings);
    let mut result = DMatrix::<f64>::identity(n, n);
    let mut term = DMatrix::<f64>::identity(n, n);
    for k in 1..60 {
        term = &term * &scaled / k as f64;
        result += &term;
        if term.amax() <= tol * result.amax() * 1e-4 {
            break;
        }
    }
    for _ in 0..squarings {
        result = &result * &result;
    }
    result
}

/// Discrete leader model at the current velocity.
pub fn leader_model(params: &VehicleParams, v0: f64, dt: f64) -> DiscreteModel {
    discretize(&linearize_leader(params, v0), dt)
}

/// Discrete follower model at the current velocity.
pub fn follower_model(params: &VehicleParams, v0: f64, dt: f64) -> DiscreteModel {
    discretize(&linearize_follower(params, v0), dt)
}
