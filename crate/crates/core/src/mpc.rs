//! Leader and follower model predictive controllers.
//!
//! Both controllers condense the linearized prediction model into a dense QP
//! over the torque sequence `u(t) … u(t+N_p−1)`. The follower adds one
//! nonnegative slack that softens the minimum-distance and terminal-set
//! constraints; inputs and velocities stay hard.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{DiscreteModel, FollowerState, LeaderState, VehicleParams};
use crate::qp::{self, condense, Prediction, QProblem, QpStatus, SolverOptions};
use crate::safeset::{braking_velocity_profile, guaranteed_deceleration, max_deceleration, BrakingSpec, SafeSet, SafeSetCache};
use crate::v2v::{estimate_leader_position, estimate_velocity_profile, V2VMessage};
use crate::{Error, Result};

/// Slack values at or below this are reported as zero.
const SLACK_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcConfig {
    /// Prediction horizon `N_p` in steps.
    pub horizon: usize,
    /// Jerk weight, per Nm² of torque change.
    pub alpha: f64,
    pub h_des: f64,
    pub h_min: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub v_des: f64,
    pub u_min: f64,
    pub u_max: f64,
    /// Limit on torque increases in Nm/s. Braking may be applied at once.
    pub du_max: f64,
    /// Trust horizon `F` in steps.
    pub trust: usize,
    /// Braking deceleration used by the safe sets (negative). Derived from
    /// the vehicle parameters when absent.
    pub a_min: Option<f64>,
    /// Deceleration the follower is credited with in the safe sets. Defaults
    /// to the deceleration reachable under `u_min` at every speed.
    pub a_follower: Option<f64>,
    /// Quadratic slack weight.
    pub slack_weight: f64,
    /// Linear slack weight; large enough to make the penalty exact.
    pub slack_linear_weight: f64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 20,
            alpha: 1e-4,
            h_des: 9.0,
            h_min: 6.5,
            v_min: 0.0,
            v_max: 30.0,
            v_des: 15.64,
            u_min: -2000.0,
            u_max: 1500.0,
            du_max: 2500.0,
            trust: 0,
            a_min: None,
            a_follower: None,
            slack_weight: 1e6,
            slack_linear_weight: 1e6,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.horizon == 0 {
            return bad("mpc.horizon must be at least 1".into());
        }
        if self.trust > self.horizon {
            return bad(format!("mpc.trust = {} exceeds the horizon {}", self.trust, self.horizon));
        }
        if !(self.alpha > 0.0) {
            return bad(format!("mpc.alpha must be positive, got {}", self.alpha));
        }
        if !(self.u_min < 0.0 && 0.0 < self.u_max) {
            return bad(format!("need u_min < 0 < u_max, got [{}, {}]", self.u_min, self.u_max));
        }
        if !(self.h_min > 0.0 && self.h_min < self.h_des) {
            return bad(format!("need 0 < h_min < h_des, got h_min = {}, h_des = {}", self.h_min, self.h_des));
        }
        if !(self.v_min >= 0.0 && self.v_min < self.v_max) {
            return bad(format!("need 0 <= v_min < v_max, got [{}, {}]", self.v_min, self.v_max));
        }
        if !(self.v_min..=self.v_max).contains(&self.v_des) {
            return bad(format!("mpc.v_des = {} outside [v_min, v_max]", self.v_des));
        }
        if !(self.du_max > 0.0) {
            return bad("mpc.du_max must be positive".into());
        }
        for (name, a) in [("a_min", self.a_min), ("a_follower", self.a_follower)] {
            if let Some(a) = a {
                if !(a < 0.0) {
                    return bad(format!("mpc.{name} must be negative, got {a}"));
                }
            }
        }
        if !(self.slack_weight > 0.0 && self.slack_linear_weight >= 0.0) {
            return bad("slack weights must be positive".into());
        }
        Ok(())
    }

    /// Largest torque increase between consecutive steps.
    pub fn slew_step(&self, dt: f64) -> f64 {
        self.du_max * dt
    }

    /// Braking assumptions shared by the safe sets and the previews.
    pub fn braking_spec(&self, params: &VehicleParams, dt: f64) -> BrakingSpec {
        BrakingSpec {
            a_min: self.a_min.unwrap_or_else(|| max_deceleration(params, self.u_min, self.v_max)),
            a_follower: self.a_follower.unwrap_or_else(|| guaranteed_deceleration(params, self.u_min)),
            h_min: self.h_min,
            dt,
            v_max: self.v_max,
        }
    }
}

/// Result of one controller solve.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlPlan {
    /// Planned torques `u(t) … u(t+N_p−1)`; the first is applied.
    pub inputs: Vec<f64>,
    /// Planned velocities `v(t) … v(t+N_p)`.
    pub velocities: Vec<f64>,
    /// Planned positions `p(t) … p(t+N_p)`.
    pub positions: Vec<f64>,
    /// False when the QP failed and the fallback input was used.
    pub feasible: bool,
    pub slack_used: f64,
    pub status: QpStatus,
    pub kkt_residual: f64,
    pub iterations: usize,
    /// Controller cost of the plan, including constant terms.
    pub objective: f64,
}

impl ControlPlan {
    pub fn applied(&self) -> f64 {
        self.inputs[0]
    }
}

/// Accumulates `row · z ≤ bound` constraints.
struct Rows {
    n: usize,
    data: Vec<f64>,
    bounds: Vec<f64>,
}

impl Rows {
    fn new(n: usize) -> Self {
        Self { n, data: Vec::new(), bounds: Vec::new() }
    }

    fn push(&mut self, row: impl IntoIterator<Item = f64>, bound: f64) {
        let before = self.data.len();
        self.data.extend(row);
        debug_assert_eq!(self.data.len() - before, self.n);
        self.bounds.push(bound);
    }

    fn finish(self) -> (DMatrix<f64>, DVector<f64>) {
        let m = self.bounds.len();
        (DMatrix::from_row_slice(m, self.n, &self.data), DVector::from_vec(self.bounds))
    }
}

/// Input bounds and the slew limit on increases anchored at `u_prev`, over
/// the first `nu` variables of a problem with `n` variables.
fn input_rows(rows: &mut Rows, nu: usize, u_prev: f64, cfg: &MpcConfig, dt: f64) {
    let n = rows.n;
    let step = cfg.slew_step(dt);
    let unit = |k: usize, s: f64| (0..n).map(move |j| if j == k { s } else { 0.0 });
    for k in 0..nu {
        rows.push(unit(k, 1.0), cfg.u_max);
        rows.push(unit(k, -1.0), -cfg.u_min);
    }
    for k in 0..nu {
        let diff = |s: f64| (0..n).map(move |j| if j == k { s } else if k > 0 && j == k - 1 { -s } else { 0.0 });
        let anchor = if k == 0 { u_prev } else { 0.0 };
        rows.push(diff(1.0), step + anchor);
    }
}

/// `v_min ≤ v(k) ≤ v_max` for `k = 1 … N_p`.
fn velocity_rows(rows: &mut Rows, pred: &Prediction, vi: usize, cfg: &MpcConfig) {
    let n = rows.n;
    for k in 1..=pred.horizon {
        let r = pred.index(k, vi);
        let g = pred.gamma.row(r);
        let c = pred.free[r];
        rows.push((0..n).map(|j| if j < pred.horizon { g[j] } else { 0.0 }), cfg.v_max - c);
        rows.push((0..n).map(|j| if j < pred.horizon { -g[j] } else { 0.0 }), c - cfg.v_min);
    }
}

/// Adds `α ‖D u − e‖²` (jerk with the first difference anchored at
/// `u_prev`) to the cost `½ zᵀ H z + fᵀ z`.
fn add_jerk(h: &mut DMatrix<f64>, f: &mut DVector<f64>, nu: usize, u_prev: f64, alpha: f64) {
    for k in 0..nu {
        h[(k, k)] += 2.0 * alpha;
        if k > 0 {
            h[(k - 1, k - 1)] += 2.0 * alpha;
            h[(k, k - 1)] -= 2.0 * alpha;
            h[(k - 1, k)] -= 2.0 * alpha;
        }
    }
    f[0] -= 2.0 * alpha * u_prev;
}

/// Adds `(c + gᵀ u − target)²` to the cost.
fn add_tracking(h: &mut DMatrix<f64>, f: &mut DVector<f64>, g: &[f64], c: f64, target: f64) {
    let nu = g.len();
    for i in 0..nu {
        f[i] += 2.0 * (c - target) * g[i];
        for j in 0..nu {
            h[(i, j)] += 2.0 * g[i] * g[j];
        }
    }
}

fn jerk_cost(inputs: &[f64], u_prev: f64) -> f64 {
    let mut last = u_prev;
    inputs
        .iter()
        .map(|&u| {
            let d = u - last;
            last = u;
            d * d
        })
        .sum()
}

fn trajectory(pred: &Prediction, u: &DVector<f64>, x0: &DVector<f64>, pi: usize, vi: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![x0[vi]];
    let mut p = vec![x0[pi]];
    for k in 1..=pred.horizon {
        let x = pred.state(k, u);
        v.push(x[vi]);
        p.push(x[pi]);
    }
    (v, p)
}

/// Removes rounding-level violations of the input bounds and the rise limit
/// from a solver output.
fn certified_inputs(z: &[f64], u_prev: f64, cfg: &MpcConfig, dt: f64) -> Vec<f64> {
    let step = cfg.slew_step(dt);
    let mut last = u_prev;
    z.iter()
        .map(|&u| {
            last = u.min(last + step).clamp(cfg.u_min, cfg.u_max);
            last
        })
        .collect()
}

/// Full braking, used when the QP has no solution.
fn fallback_plan(pred: &Prediction, x0: &DVector<f64>, indices: (usize, usize), cfg: &MpcConfig, sol: &qp::QpSolution) -> ControlPlan {
    let inputs = vec![cfg.u_min; cfg.horizon];
    let u = DVector::from_column_slice(&inputs);
    let (mut velocities, positions) = trajectory(pred, &u, x0, indices.0, indices.1);
    velocities.iter_mut().for_each(|v| *v = v.max(0.0));
    ControlPlan {
        objective: f64::NAN,
        inputs,
        velocities,
        positions,
        feasible: false,
        slack_used: 0.0,
        status: sol.status,
        kkt_residual: sol.kkt_residual,
        iterations: sol.iterations,
    }
}

/// Leader MPC: reach `v_des` at the end of the horizon with little jerk.
pub fn solve_leader(
    state: &LeaderState,
    u_prev: f64,
    model: &DiscreteModel,
    cfg: &MpcConfig,
    opts: &SolverOptions,
) -> Result<ControlPlan> {
    let n = cfg.horizon;
    let x0 = DVector::from_vec(vec![state.p, state.v]);
    let pred = condense(std::slice::from_ref(model), n, &x0, &[]);

    let mut h = DMatrix::zeros(n, n);
    let mut f = DVector::zeros(n);
    let r = pred.index(n, 1);
    let g: Vec<f64> = pred.gamma.row(r).iter().copied().collect();
    add_tracking(&mut h, &mut f, &g, pred.free[r], cfg.v_des);
    add_jerk(&mut h, &mut f, n, u_prev, cfg.alpha);

    let mut rows = Rows::new(n);
    input_rows(&mut rows, n, u_prev, cfg, model.dt);
    velocity_rows(&mut rows, &pred, 1, cfg);
    let (gm, gb) = rows.finish();
    let problem = QProblem::new(h, f).with_inequalities(gm, gb);
    let sol = qp::solve(&problem, opts)?;

    if !matches!(sol.status, QpStatus::Optimal | QpStatus::Inaccurate) {
        warn!("leader QP {} at v = {:.3}; applying fallback input", sol.status, state.v);
        return Ok(fallback_plan(&pred, &x0, (0, 1), cfg, &sol));
    }
    let inputs = certified_inputs(sol.z.as_slice(), u_prev, cfg, model.dt);
    let (velocities, positions) = trajectory(&pred, &DVector::from_column_slice(&inputs), &x0, 0, 1);
    let objective = (velocities[n] - cfg.v_des).powi(2) + cfg.alpha * jerk_cost(&inputs, u_prev);
    Ok(ControlPlan {
        inputs,
        velocities,
        positions,
        feasible: true,
        slack_used: 0.0,
        status: sol.status,
        kkt_residual: sol.kkt_residual,
        iterations: sol.iterations,
        objective,
    })
}

/// Everything a follower controller needs at one step.
#[derive(Debug, Clone)]
pub struct FollowerProblem<'a> {
    /// Position in the platoon, `i ≥ 1`.
    pub index: usize,
    /// Estimated initial state `[p; ŝ; h; v]`.
    pub state: FollowerState,
    pub u_prev: f64,
    /// Leader velocity estimates for steps `t … t+N_p`.
    pub leader_preview: Vec<f64>,
    /// Predecessor velocity estimates for steps `t … t+N_p`, with braking
    /// injected at the trust horizon.
    pub pred_preview: Vec<f64>,
    pub terminal: &'a SafeSet,
}

/// Disturbance over each interval: the mean of the velocity estimates at
/// its two ends.
fn interval_preview(leader: &[f64], pred: &[f64], horizon: usize) -> Vec<DVector<f64>> {
    (0..horizon)
        .map(|k| DVector::from_vec(vec![0.5 * (leader[k] + leader[k + 1]), 0.5 * (pred[k] + pred[k + 1])]))
        .collect()
}

/// Follower MPC: track `s_des = h_des·i` while keeping `h ≥ h_min` and
/// entering the terminal safe set at step `max(F, 1)`.
pub fn solve_follower(
    problem: &FollowerProblem<'_>,
    model: &DiscreteModel,
    cfg: &MpcConfig,
    opts: &SolverOptions,
) -> Result<ControlPlan> {
    let n = cfg.horizon;
    if problem.leader_preview.len() != n + 1 || problem.pred_preview.len() != n + 1 {
        return Err(Error::MalformedProblem(format!(
            "previews must hold {} entries, got {} and {}",
            n + 1,
            problem.leader_preview.len(),
            problem.pred_preview.len()
        )));
    }
    let st = &problem.state;
    let x0 = DVector::from_vec(vec![st.p, st.s, st.h, st.v]);
    let preview = interval_preview(&problem.leader_preview, &problem.pred_preview, n);
    let pred = condense(std::slice::from_ref(model), n, &x0, &preview);
    let s_des = cfg.h_des * problem.index as f64;
    let nz = n + 1;
    let slack = n;

    let mut h = DMatrix::zeros(nz, nz);
    let mut f = DVector::zeros(nz);
    for k in 1..=n {
        let r = pred.index(k, 1);
        let mut g: Vec<f64> = pred.gamma.row(r).iter().copied().collect();
        g.push(0.0);
        add_tracking(&mut h, &mut f, &g, pred.free[r], s_des);
    }
    add_jerk(&mut h, &mut f, n, problem.u_prev, cfg.alpha);
    h[(slack, slack)] += 2.0 * cfg.slack_weight;
    f[slack] += cfg.slack_linear_weight;

    let mut rows = Rows::new(nz);
    input_rows(&mut rows, n, problem.u_prev, cfg, model.dt);
    velocity_rows(&mut rows, &pred, 3, cfg);
    // h(k) ≥ h_min − δ
    for k in 1..=n {
        let r = pred.index(k, 2);
        let g = pred.gamma.row(r);
        rows.push((0..nz).map(|j| if j < n { -g[j] } else { -1.0 }), pred.free[r] - cfg.h_min);
    }
    // [h; v](k_F) ∈ C, each facet relaxed by δ.
    let kf = cfg.trust.max(1);
    let (rh, rv) = (pred.index(kf, 2), pred.index(kf, 3));
    for hs in problem.terminal.headway_halfspaces() {
        let [a, b] = hs.normal;
        let c = a * pred.free[rh] + b * pred.free[rv];
        let row = (0..nz).map(|j| if j < n { a * pred.gamma[(rh, j)] + b * pred.gamma[(rv, j)] } else { -1.0 });
        rows.push(row, hs.offset - c);
    }
    rows.push((0..nz).map(|j| if j == slack { -1.0 } else { 0.0 }), 0.0);

    let (gm, gb) = rows.finish();
    let qproblem = QProblem::new(h, f).with_inequalities(gm, gb);
    let sol = qp::solve(&qproblem, opts)?;

    if !matches!(sol.status, QpStatus::Optimal | QpStatus::Inaccurate) {
        warn!(
            "follower {} QP {} at h = {:.3}, v = {:.3}; applying fallback input",
            problem.index, sol.status, st.h, st.v
        );
        return Ok(fallback_plan(&pred, &x0, (0, 3), cfg, &sol));
    }
    let inputs = certified_inputs(&sol.z.as_slice()[..n], problem.u_prev, cfg, model.dt);
    let u = DVector::from_column_slice(&inputs);
    let (velocities, positions) = trajectory(&pred, &u, &x0, 0, 3);
    // Solver noise below the tolerance is not slack usage.
    let delta = if sol.z[slack] > SLACK_EPS { sol.z[slack] } else { 0.0 };
    let tracking: f64 = (1..=n).map(|k| (pred.state(k, &u)[1] - s_des).powi(2)).sum();
    let objective = tracking
        + cfg.alpha * jerk_cost(&inputs, problem.u_prev)
        + cfg.slack_weight * delta * delta
        + cfg.slack_linear_weight * delta;
    Ok(ControlPlan {
        inputs,
        velocities,
        positions,
        feasible: true,
        slack_used: delta,
        status: sol.status,
        kkt_residual: sol.kkt_residual,
        iterations: sol.iterations,
        objective,
    })
}

/// A received message together with its delay in steps.
#[derive(Debug, Clone, Copy)]
pub struct Link<'a> {
    pub msg: &'a V2VMessage,
    pub delay: usize,
}

/// Safe set for the terminal constraint: keyed by the radar speed when
/// `F = 0` (or when no plan has been received), otherwise by the
/// predecessor's estimated speed at `t+F`.
pub fn select_terminal_set<'c>(pred: Option<Link<'_>>, trust: usize, radar_v: f64, cache: &'c SafeSetCache) -> &'c SafeSet {
    let v0 = match pred {
        Some(link) if trust > 0 => estimate_velocity_profile(link.msg, link.delay, trust)[trust],
        _ => radar_v,
    };
    cache.select(v0)
}

/// Sensor readings available to follower `i` at the current step.
#[derive(Debug, Clone, Copy)]
pub struct Measurement {
    pub p: f64,
    /// Radar distance to the predecessor.
    pub h: f64,
    pub v: f64,
    /// Radar speed of the predecessor.
    pub pred_v: f64,
    /// Distance to the leader to assume when no leader message is usable.
    pub s_fallback: f64,
}

/// Assembles the follower problem from measurements and the latest
/// messages of the leader and the predecessor.
///
/// Follower 1 measures its leader distance directly (the leader is its
/// predecessor) and uses the braking preview for both disturbance rows.
/// Without a leader message the predecessor preview stands in for the
/// leader's.
#[allow(clippy::too_many_arguments)]
pub fn follower_problem<'c>(
    index: usize,
    meas: &Measurement,
    u_prev: f64,
    leader: Option<Link<'_>>,
    pred: Option<Link<'_>>,
    cfg: &MpcConfig,
    cache: &'c SafeSetCache,
) -> FollowerProblem<'c> {
    let n = cfg.horizon;
    let spec = cache.spec();
    let mut base = match pred {
        Some(link) => estimate_velocity_profile(link.msg, link.delay, n),
        None => vec![meas.pred_v; n + 1],
    };
    if cfg.trust == 0 {
        base[0] = meas.pred_v;
    }
    let pred_preview = braking_velocity_profile(&base, cfg.trust, spec);
    let terminal = select_terminal_set(pred, cfg.trust, meas.pred_v, cache);

    let leader_link = if index == 1 { None } else { leader };
    let leader_preview = match leader_link {
        Some(link) => estimate_velocity_profile(link.msg, link.delay, n),
        None => pred_preview.clone(),
    };
    let s = if index == 1 {
        meas.h
    } else {
        leader_link
            .and_then(|link| estimate_leader_position(link.msg, link.delay, meas.p, spec.dt))
            .unwrap_or(meas.s_fallback)
    };
    FollowerProblem {
        index,
        state: FollowerState { p: meas.p, s, h: meas.h, v: meas.v },
        u_prev,
        leader_preview,
        pred_preview,
        terminal,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{follower_model, leader_model};
    use crate::safeset::{braking_positions, build_safe_set};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::sync::OnceLock;

    const DT: f64 = 0.1;

    fn params() -> VehicleParams {
        VehicleParams::default()
    }

    fn cache() -> &'static SafeSetCache {
        static CACHE: OnceLock<SafeSetCache> = OnceLock::new();
        CACHE.get_or_init(|| {
            let cfg = MpcConfig::default();
            SafeSetCache::build(cfg.braking_spec(&params(), DT), cfg.v_min).unwrap()
        })
    }

    fn opts() -> SolverOptions {
        SolverOptions::default()
    }

    fn assert_slew(plan: &ControlPlan, u_prev: f64, cfg: &MpcConfig) {
        let step = cfg.slew_step(DT);
        let mut last = u_prev;
        for &u in &plan.inputs {
            assert!(u <= cfg.u_max + 1e-9 && u >= cfg.u_min - 1e-9, "torque {u} out of bounds");
            assert!(u - last <= step + 1e-9, "torque rise {} exceeds {step}", u - last);
            last = u;
        }
    }

    #[test]
    fn leader_holds_desired_speed() {
        let cfg = MpcConfig::default();
        let p = params();
        let u_eq = p.equilibrium_torque(cfg.v_des);
        assert_abs_diff_eq!(u_eq, 101.9, epsilon = 1.0);
        let state = LeaderState { p: 100.0, v: cfg.v_des };
        let plan = solve_leader(&state, u_eq, &leader_model(&p, state.v, DT), &cfg, &opts()).unwrap();
        assert_eq!(plan.status, QpStatus::Optimal);
        assert_abs_diff_eq!(plan.applied(), u_eq, epsilon = 1.0);
        for v in &plan.velocities {
            assert_abs_diff_eq!(*v, cfg.v_des, epsilon = 1e-3);
        }
    }

    #[test]
    fn leader_launch_respects_bounds() {
        let cfg = MpcConfig::default();
        let p = params();
        let state = LeaderState::default();
        let plan = solve_leader(&state, 0.0, &leader_model(&p, 0.0, DT), &cfg, &opts()).unwrap();
        assert_eq!(plan.status, QpStatus::Optimal);
        assert!(plan.velocities.windows(2).all(|w| w[1] >= w[0] - 1e-12));
        assert!(plan.velocities[cfg.horizon] > 0.0);
        assert_slew(&plan, 0.0, &cfg);
    }

    #[test]
    fn leader_saturated_at_top_speed() {
        let cfg = MpcConfig { v_des: 30.0, ..MpcConfig::default() };
        let p = params();
        let u_eq = p.equilibrium_torque(30.0);
        let state = LeaderState { p: 0.0, v: 30.0 };
        let plan = solve_leader(&state, u_eq, &leader_model(&p, 30.0, DT), &cfg, &opts()).unwrap();
        assert_eq!(plan.status, QpStatus::Optimal);
        for v in &plan.velocities {
            assert!(*v <= cfg.v_max + 1e-9);
            assert_abs_diff_eq!(*v, 30.0, epsilon = 1e-3);
        }
    }

    /// Leader cost of an arbitrary input sequence.
    fn leader_cost(state: &LeaderState, u_prev: f64, model: &DiscreteModel, cfg: &MpcConfig, inputs: &[f64]) -> f64 {
        let x0 = DVector::from_vec(vec![state.p, state.v]);
        let pred = condense(std::slice::from_ref(model), cfg.horizon, &x0, &[]);
        let v = pred.state(cfg.horizon, &DVector::from_column_slice(inputs))[1];
        (v - cfg.v_des).powi(2) + cfg.alpha * jerk_cost(inputs, u_prev)
    }

    #[test]
    fn receding_solve_beats_shifted_plan() {
        // Linear plant equal to the prediction model, so the shifted tail of
        // the previous plan stays feasible and bounds the new optimum.
        let cfg = MpcConfig::default();
        let p = params();
        let model = leader_model(&p, 14.0, DT);
        let mut x = DVector::from_vec(vec![0.0, 14.0]);
        let mut u_prev = p.equilibrium_torque(14.0);
        let mut shifted: Option<Vec<f64>> = None;
        for _ in 0..150 {
            let state = LeaderState { p: x[0], v: x[1] };
            let plan = solve_leader(&state, u_prev, &model, &cfg, &opts()).unwrap();
            assert_abs_diff_eq!(plan.objective, leader_cost(&state, u_prev, &model, &cfg, &plan.inputs), epsilon = 1e-12);
            if let Some(tail) = &shifted {
                let candidate = leader_cost(&state, u_prev, &model, &cfg, tail);
                assert!(plan.objective <= candidate + 1e-9, "{} > {candidate}", plan.objective);
            }
            let mut tail = plan.inputs[1..].to_vec();
            tail.push(*tail.last().unwrap());
            shifted = Some(tail);
            u_prev = plan.applied();
            x = model.apply(&x, u_prev, None);
        }
        assert!((x[1] - cfg.v_des).abs() < 0.2);
    }

    fn equilibrium_problem(index: usize, cfg: &MpcConfig) -> FollowerProblem<'static> {
        let n = cfg.horizon;
        let v = cfg.v_des;
        let base = vec![v; n + 1];
        let spec = cache().spec();
        FollowerProblem {
            index,
            state: FollowerState { p: -cfg.h_des * index as f64, s: cfg.h_des * index as f64, h: cfg.h_des, v },
            u_prev: params().equilibrium_torque(v),
            leader_preview: base.clone(),
            pred_preview: braking_velocity_profile(&base, cfg.trust, spec),
            terminal: cache().select(v),
        }
    }

    #[test]
    fn follower_rests_at_equilibrium() {
        let cfg = MpcConfig { trust: 20, ..MpcConfig::default() };
        let p = params();
        let prob = equilibrium_problem(2, &cfg);
        let plan = solve_follower(&prob, &follower_model(&p, cfg.v_des, DT), &cfg, &opts()).unwrap();
        assert_eq!(plan.status, QpStatus::Optimal);
        assert_eq!(plan.slack_used, 0.0);
        // The weaker follower braking puts h_b(v_des) slightly above h_des,
        // so the plan eases off a little.
        assert_abs_diff_eq!(plan.applied(), p.equilibrium_torque(cfg.v_des), epsilon = 5.0);
        let next = prob.state.step(&p, plan.applied(), [cfg.v_des, cfg.v_des], DT);
        assert!((next.s - 18.0).abs() < 0.01);
        assert!((next.h - 9.0).abs() < 0.01);
    }

    #[test]
    fn follower_baseline_keeps_safe_distance() {
        let cfg = MpcConfig::default();
        let p = params();
        for index in 1..=3 {
            let prob = equilibrium_problem(index, &cfg);
            let plan = solve_follower(&prob, &follower_model(&p, cfg.v_des, DT), &cfg, &opts()).unwrap();
            assert_eq!(plan.status, QpStatus::Optimal);
            assert_eq!(plan.slack_used, 0.0);
            assert!(plan.kkt_residual <= 1e-6);
            assert_slew(&plan, prob.u_prev, &cfg);
        }
    }

    #[test]
    fn follower_from_standstill() {
        let cfg = MpcConfig::default();
        let p = params();
        let meas = Measurement { p: -6.5, h: 6.5, v: 0.0, pred_v: 0.0, s_fallback: 6.5 };
        let prob = follower_problem(1, &meas, 0.0, None, None, &cfg, cache());
        let plan = solve_follower(&prob, &follower_model(&p, 0.0, DT), &cfg, &opts()).unwrap();
        assert_eq!(plan.status, QpStatus::Optimal);
        assert_eq!(plan.slack_used, 0.0);
        assert_slew(&plan, 0.0, &cfg);
    }

    #[test]
    fn terminal_set_selection() {
        let c = cache();
        assert_abs_diff_eq!(select_terminal_set(None, 0, 7.5, c).v0_tilde, 7.4014, epsilon = 2e-4);
        let msg = V2VMessage {
            sender: 1,
            sent_step: 0,
            t_sent: 0.0,
            position: None,
            plan: (0..=20).map(|k| 10.0 + 0.1 * k as f64).collect(),
        };
        let link = Link { msg: &msg, delay: 1 };
        // Delay 1 with F = 20 runs off the plan and holds its final 12.0.
        let set = select_terminal_set(Some(link), 20, 3.0, c);
        assert_eq!(set.k_s, 37);
        assert_abs_diff_eq!(set.v0_tilde, 37.0 * c.spec().speed_quantum(), epsilon = 1e-12);
        assert_abs_diff_eq!(set.v0_tilde, 11.9066, epsilon = 5e-4);
        // Radar overrides the plan when F = 0.
        assert_abs_diff_eq!(select_terminal_set(Some(link), 0, 3.0, c).v0_tilde, 9.0 * c.spec().speed_quantum(), epsilon = 1e-9);
        let stopped = select_terminal_set(None, 0, 0.0, c);
        let spec = c.spec();
        let follower = BrakingSpec { a_min: spec.a_follower, ..*spec };
        for j in [6, 26, 65] {
            let v = j as f64 * follower.speed_quantum();
            let stop = *braking_positions(v, &follower).last().unwrap();
            assert_abs_diff_eq!(stopped.boundary_headway(v), 6.5 + stop, epsilon = 1e-9);
        }
    }

    #[test]
    fn follower_one_uses_radar_for_leader_distance() {
        let cfg = MpcConfig { trust: 5, ..MpcConfig::default() };
        let msg = V2VMessage { sender: 0, sent_step: 4, t_sent: 0.4, position: Some(50.0), plan: vec![10.0; 21] };
        let link = Link { msg: &msg, delay: 1 };
        let meas = Measurement { p: 30.0, h: 19.5, v: 10.0, pred_v: 10.0, s_fallback: 0.0 };
        let prob = follower_problem(1, &meas, 100.0, Some(link), Some(link), &cfg, cache());
        assert_eq!(prob.state.s, 19.5);
        assert_eq!(prob.leader_preview, prob.pred_preview);
        assert_eq!(prob.pred_preview[4], 10.0);
        assert!(prob.pred_preview[5] < 10.0);
        let prob2 = follower_problem(2, &meas, 100.0, Some(link), Some(link), &cfg, cache());
        assert_abs_diff_eq!(prob2.state.s, 50.0 + 1.0 - 30.0, epsilon = 1e-12);
        assert_eq!(prob2.leader_preview, vec![10.0; 21]);
    }

    #[test]
    fn predecessor_only_falls_back_on_headway() {
        let cfg = MpcConfig { trust: 3, ..MpcConfig::default() };
        let msg = V2VMessage { sender: 2, sent_step: 4, t_sent: 0.4, position: None, plan: vec![8.0; 21] };
        let link = Link { msg: &msg, delay: 1 };
        let meas = Measurement { p: 0.0, h: 9.0, v: 8.0, pred_v: 8.0, s_fallback: 27.0 };
        let prob = follower_problem(3, &meas, 0.0, None, Some(link), &cfg, cache());
        assert_eq!(prob.state.s, 27.0);
        assert_eq!(prob.leader_preview, prob.pred_preview);
    }

    #[test]
    fn rejects_short_previews() {
        let cfg = MpcConfig::default();
        let mut prob = equilibrium_problem(1, &cfg);
        prob.leader_preview.pop();
        let err = solve_follower(&prob, &follower_model(&params(), 10.0, DT), &cfg, &opts());
        assert!(matches!(err, Err(Error::MalformedProblem(_))));
    }

    #[test]
    fn follower_brakes_fully_when_too_close() {
        let cfg = MpcConfig::default();
        let p = params();
        // 16.4 m of braking plus h_min exceeds the 20 m gap.
        let meas = Measurement { p: 0.0, h: 20.0, v: 10.0, pred_v: 0.0, s_fallback: 20.0 };
        let prob = follower_problem(1, &meas, 500.0, None, None, &cfg, cache());
        let plan = solve_follower(&prob, &follower_model(&p, 10.0, DT), &cfg, &opts()).unwrap();
        assert!(plan.feasible);
        assert!(plan.slack_used > 0.0);
        assert_abs_diff_eq!(plan.applied(), cfg.u_min, epsilon = 1e-6);
    }

    #[test]
    fn config_validation() {
        assert!(MpcConfig::default().validate().is_ok());
        for bad in [
            MpcConfig { trust: 21, ..MpcConfig::default() },
            MpcConfig { h_min: 9.5, ..MpcConfig::default() },
            MpcConfig { u_min: 10.0, ..MpcConfig::default() },
            MpcConfig { alpha: 0.0, ..MpcConfig::default() },
            MpcConfig { a_min: Some(1.0), ..MpcConfig::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn explicit_a_min_overrides_derived() {
        let cfg = MpcConfig { a_min: Some(-3.218), ..MpcConfig::default() };
        assert_eq!(cfg.braking_spec(&params(), DT).a_min, -3.218);
        let derived = MpcConfig::default().braking_spec(&params(), DT).a_min;
        assert_abs_diff_eq!(derived, -3.218, epsilon = 1e-3);
        let spec = MpcConfig::default().braking_spec(&params(), DT);
        assert_abs_diff_eq!(spec.a_follower, (-2000.0 / 0.39445 - 1722.0 * 9.81 * 0.0106) / 1722.0, epsilon = 1e-9);
        spec.validate().unwrap();
        let _ = build_safe_set(7.5, &cfg.braking_spec(&params(), DT));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn applied_inputs_respect_bounds(
            v in 0.0..30.0_f64,
            h in 6.5..40.0_f64,
            pred_v in 0.0..30.0_f64,
            u_prev in -2000.0..1500.0_f64,
            trust in 0usize..=20,
            index in 1usize..4,
        ) {
            let cfg = MpcConfig { trust, ..MpcConfig::default() };
            let p = params();
            let meas = Measurement { p: 0.0, h, v, pred_v, s_fallback: h * index as f64 };
            let prob = follower_problem(index, &meas, u_prev, None, None, &cfg, cache());
            let plan = solve_follower(&prob, &follower_model(&p, v, DT), &cfg, &opts()).unwrap();
            let u = plan.applied();
            prop_assert!(u >= cfg.u_min && u <= cfg.u_max);
            prop_assert!(u <= u_prev + cfg.slew_step(DT));
            if plan.feasible {
                prop_assert!(plan.kkt_residual <= 1e-6);
            }
            let lead = solve_leader(&LeaderState { p: 0.0, v }, u_prev, &leader_model(&p, v, DT), &cfg, &opts()).unwrap();
            let u = lead.applied();
            prop_assert!(u >= cfg.u_min && u <= cfg.u_max);
            prop_assert!(u <= u_prev + cfg.slew_step(DT));
        }
    }
}
