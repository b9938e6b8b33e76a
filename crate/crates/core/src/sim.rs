//! Closed-loop simulation of a platoon leaving an intersection.
//!
//! Each step runs deliver → solve → send → advance. Controllers solve in
//! parallel on the mailbox contents delivered at the start of the step, so
//! the result does not depend on scheduling.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::dynamics::{follower_model, integrate, leader_model, LeaderState};
use crate::mpc::{self, ControlPlan, Link, Measurement, MpcConfig};
use crate::qp::QpStatus;
use crate::safeset::SafeSetCache;
use crate::v2v::{compute_delay, Delivery, MessageBus, Topology, TopologyKind, V2VMessage, VehicleId};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Platoon size `N`, leader included.
    pub vehicles: usize,
    /// Initial distance between consecutive vehicles (m).
    pub spacing: f64,
    /// Simulated time (s).
    pub duration: f64,
    /// Sampling time (s).
    pub dt: f64,
    /// Throughput measurement position ℓ (m).
    pub ell: f64,
    /// Latency of every V2V arc (s).
    pub latency: f64,
    /// Trust horizons for the sweep.
    pub trust_values: Vec<usize>,
    pub topology: TopologyKind,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            vehicles: 4,
            spacing: 6.5,
            duration: 30.0,
            dt: 0.1,
            ell: 30.0,
            latency: 0.1,
            trust_values: vec![0, 5, 10, 15, 20],
            topology: TopologyKind::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self, mpc: &MpcConfig) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.vehicles < 2 {
            return bad(format!("scenario.vehicles must be at least 2, got {}", self.vehicles));
        }
        if self.spacing < mpc.h_min {
            return bad(format!(
                "scenario.spacing = {} violates the minimum distance h_min = {}",
                self.spacing, mpc.h_min
            ));
        }
        if !(self.ell > 0.0) {
            return bad(format!("scenario.ell must be positive, got {}", self.ell));
        }
        if !(self.dt > 0.0 && self.duration >= self.dt) {
            return bad("scenario.dt must be positive and no longer than the duration".into());
        }
        if !(self.latency >= 0.0) {
            return bad("scenario.latency must be nonnegative".into());
        }
        if let Some(f) = self.trust_values.iter().find(|&&f| f > mpc.horizon) {
            return bad(format!("trust value {f} exceeds the horizon {}", mpc.horizon));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.duration / self.dt).round() as usize
    }
}

/// Plant positions and velocities of the whole platoon; distances are
/// derived from positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Platoon {
    pub p: Vec<f64>,
    pub v: Vec<f64>,
}

impl Platoon {
    /// Distance to the leader, `p_L − p_i`.
    pub fn s(&self, i: usize) -> f64 {
        self.p[0] - self.p[i]
    }

    /// Distance to the predecessor, `p_{i−1} − p_i`.
    pub fn h(&self, i: usize) -> f64 {
        self.p[i - 1] - self.p[i]
    }

    pub fn advance(&mut self, params: &crate::dynamics::VehicleParams, torques: &[f64], dt: f64) {
        for ((p, v), &u) in self.p.iter_mut().zip(self.v.iter_mut()).zip(torques) {
            (*p, *v) = integrate(params, *p, *v, u, dt);
        }
    }
}

/// Vehicles at rest behind the stop bar, `spacing` apart.
pub fn init_scenario(cfg: &ScenarioConfig, mpc: &MpcConfig) -> Result<Platoon> {
    cfg.validate(mpc)?;
    Ok(Platoon {
        // Adding 0.0 keeps the leader at +0 rather than −0.
        p: (0..cfg.vehicles).map(|i| -(cfg.spacing * i as f64) + 0.0).collect(),
        v: vec![0.0; cfg.vehicles],
    })
}

/// One row per vehicle per step, recorded at the start of the step together
/// with the torque applied over it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRow {
    pub t: f64,
    pub vehicle_id: VehicleId,
    pub p: f64,
    /// Empty for the leader.
    pub s: Option<f64>,
    pub h: Option<f64>,
    pub v: f64,
    pub u: f64,
    pub slack: f64,
    pub status: QpStatus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimLog {
    pub dt: f64,
    pub vehicles: usize,
    pub rows: Vec<LogRow>,
}

impl SimLog {
    pub fn steps(&self) -> usize {
        self.rows.len() / self.vehicles
    }

    pub fn vehicle(&self, id: VehicleId) -> impl Iterator<Item = &LogRow> + '_ {
        self.rows.iter().skip(id).step_by(self.vehicles)
    }

    pub fn positions(&self, id: VehicleId) -> Vec<f64> {
        self.vehicle(id).map(|r| r.p).collect()
    }

    pub fn headways(&self, id: VehicleId) -> Vec<f64> {
        self.vehicle(id).filter_map(|r| r.h).collect()
    }

    /// `t,vehicle_id,p,s,h,v,u,slack,status`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "vehicle_id", "p", "s", "h", "v", "u", "slack", "status"])?;
        let opt = |x: Option<f64>| x.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                format!("{:.4}", r.t),
                r.vehicle_id.to_string(),
                r.p.to_string(),
                opt(r.s),
                opt(r.h),
                r.v.to_string(),
                r.u.to_string(),
                r.slack.to_string(),
                r.status.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-solve controller record. Solve times vary between runs, so they are
/// kept apart from the deterministic [`SimLog`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ControllerRecord {
    pub t: f64,
    pub vehicle_id: VehicleId,
    pub status: QpStatus,
    pub feasible: bool,
    pub slack: f64,
    pub u: f64,
    pub iterations: usize,
    pub kkt_residual: f64,
    pub solve_time_us: u128,
}

/// A stretch of time during which a follower was closer than `h_min`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub vehicle_id: VehicleId,
    pub start: f64,
    pub duration: f64,
    /// Largest shortfall below `h_min` (m).
    pub depth: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct Diagnostics {
    /// How often each message delay (in steps) was used by a controller.
    pub delay_counts: BTreeMap<usize, usize>,
    /// Largest `|ŝ − s|` over followers that estimate it from leader messages.
    pub max_leader_distance_error: f64,
    pub max_kkt_residual: f64,
    pub solves: usize,
    pub non_optimal: usize,
    pub fallbacks: usize,
    pub max_slack: f64,
    pub total_slack: f64,
    pub min_headway: f64,
    pub violations: Vec<Violation>,
    pub stale_messages: usize,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub log: SimLog,
    pub controller: Vec<ControllerRecord>,
    pub deliveries: Vec<Delivery>,
    pub diagnostics: Diagnostics,
}

/// Tolerance below `h_min` before the collision monitor raises a flag.
pub const VIOLATION_TOL: f64 = 1e-6;

/// Flags every interval with `h < h_min − tol`.
pub fn collision_monitor(log: &SimLog, h_min: f64, tol: f64) -> Vec<Violation> {
    let mut out = Vec::new();
    for id in 1..log.vehicles {
        let mut open: Option<Violation> = None;
        for r in log.vehicle(id) {
            let h = r.h.expect("followers log h");
            if h < h_min - tol {
                let v = open.get_or_insert(Violation { vehicle_id: id, start: r.t, duration: 0.0, depth: 0.0 });
                v.duration = r.t - v.start + log.dt;
                v.depth = v.depth.max(h_min - h);
            } else if let Some(v) = open.take() {
                out.push(v);
            }
        }
        out.extend(open);
    }
    out
}

struct Solved {
    plan: ControlPlan,
    delays: Vec<usize>,
    s_error: Option<f64>,
    micros: u128,
}

fn link<'a>(bus: &'a MessageBus, receiver: VehicleId, sender: VehicleId, t: f64, dt: f64) -> Result<Option<Link<'a>>> {
    match bus.latest(receiver, sender) {
        Some(rx) => Ok(Some(Link { msg: &rx.msg, delay: compute_delay(t, rx.msg.t_sent, dt)? })),
        None => Ok(None),
    }
}

/// Runs one closed-loop scenario.
pub fn run(cfg: &Config, cache: &SafeSetCache) -> Result<RunOutput> {
    cfg.validate()?;
    if cache.spec() != &cfg.braking_spec() {
        return Err(Error::Config("safe-set cache was built for a different braking spec".into()));
    }
    let sc = &cfg.scenario;
    let n = sc.vehicles;
    let dt = sc.dt;
    let params = &cfg.vehicle;
    let topology = Topology::new(sc.topology, n);
    let mut bus = MessageBus::new(&topology, n, sc.latency, dt, cfg.mpc.horizon);
    let mut plant = init_scenario(sc, &cfg.mpc)?;
    let mut u_prev = vec![0.0; n];

    let steps = sc.steps();
    let mut rows = Vec::with_capacity(steps * n);
    let mut controller = Vec::with_capacity(steps * n);
    let mut diag = Diagnostics { min_headway: f64::INFINITY, ..Diagnostics::default() };

    for step in 0..steps {
        let t = step as f64 * dt;
        bus.tick(step as u64);

        let solved: Vec<Result<Solved>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let started = Instant::now();
                let v = plant.v[i];
                if i == 0 {
                    let model = leader_model(params, v, dt);
                    let state = LeaderState { p: plant.p[0], v };
                    let plan = mpc::solve_leader(&state, u_prev[0], &model, &cfg.mpc, &cfg.solver)?;
                    return Ok(Solved { plan, delays: vec![], s_error: None, micros: started.elapsed().as_micros() });
                }
                let leader = if i > 1 { link(&bus, i, 0, t, dt)? } else { None };
                let pred = link(&bus, i, i - 1, t, dt)?;
                let s_fallback = if step == 0 { sc.spacing * i as f64 } else { plant.h(i) + cfg.mpc.h_des * (i - 1) as f64 };
                let meas = Measurement { p: plant.p[i], h: plant.h(i), v, pred_v: plant.v[i - 1], s_fallback };
                let problem = mpc::follower_problem(i, &meas, u_prev[i], leader, pred, &cfg.mpc, cache);
                let s_error = leader.and(Some((problem.state.s - plant.s(i)).abs()));
                let model = follower_model(params, v, dt);
                let plan = mpc::solve_follower(&problem, &model, &cfg.mpc, &cfg.solver)?;
                let delays = leader.iter().chain(pred.iter()).map(|l| l.delay).collect();
                Ok(Solved { plan, delays, s_error, micros: started.elapsed().as_micros() })
            })
            .collect();

        let mut torques = Vec::with_capacity(n);
        for (i, res) in solved.into_iter().enumerate() {
            let Solved { plan, delays, s_error, micros } = res?;
            let u = plan.applied();
            for d in delays {
                *diag.delay_counts.entry(d).or_default() += 1;
            }
            if let Some(e) = s_error {
                diag.max_leader_distance_error = diag.max_leader_distance_error.max(e);
            }
            diag.solves += 1;
            if plan.status != QpStatus::Optimal {
                diag.non_optimal += 1;
            }
            if !plan.feasible {
                diag.fallbacks += 1;
            }
            if plan.kkt_residual.is_finite() {
                diag.max_kkt_residual = diag.max_kkt_residual.max(plan.kkt_residual);
            }
            diag.max_slack = diag.max_slack.max(plan.slack_used);
            diag.total_slack += plan.slack_used;

            let (s, h) = if i == 0 { (None, None) } else { (Some(plant.s(i)), Some(plant.h(i))) };
            if let Some(h) = h {
                diag.min_headway = diag.min_headway.min(h);
            }
            rows.push(LogRow { t, vehicle_id: i, p: plant.p[i], s, h, v: plant.v[i], u, slack: plan.slack_used, status: plan.status });
            controller.push(ControllerRecord {
                t,
                vehicle_id: i,
                status: plan.status,
                feasible: plan.feasible,
                slack: plan.slack_used,
                u,
                iterations: plan.iterations,
                kkt_residual: plan.kkt_residual,
                solve_time_us: micros,
            });
            bus.send(V2VMessage {
                sender: i,
                sent_step: step as u64,
                t_sent: t,
                position: (i == 0).then_some(plant.p[0]),
                plan: plan.velocities,
            });
            torques.push(u);
        }
        plant.advance(params, &torques, dt);
        u_prev = torques;
    }

    let log = SimLog { dt, vehicles: n, rows };
    diag.violations = collision_monitor(&log, cfg.mpc.h_min, VIOLATION_TOL);
    diag.stale_messages = bus.stale_count();
    Ok(RunOutput { log, controller, deliveries: bus.deliveries().to_vec(), diagnostics: diag })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThroughputResult {
    pub t_leader: f64,
    pub t_last: f64,
    pub vph: f64,
}

/// First time `positions` reaches `ell`, interpolated linearly between
/// samples `dt` apart.
pub fn crossing_time(positions: &[f64], dt: f64, ell: f64) -> Option<f64> {
    let k = positions.iter().position(|&p| p >= ell)?;
    if k == 0 {
        return Some(0.0);
    }
    let (a, b) = (positions[k - 1], positions[k]);
    Some(dt * ((k - 1) as f64 + (ell - a) / (b - a)))
}

/// Vehicles per hour from the leader and last-follower crossings of `ell`.
pub fn measure_throughput(log: &SimLog, ell: f64) -> Result<ThroughputResult> {
    let n = log.vehicles;
    let cross = |id: VehicleId| {
        crossing_time(&log.positions(id), log.dt, ell).ok_or(Error::NoCrossing { vehicle: id, ell })
    };
    let t_leader = cross(0)?;
    let t_last = cross(n - 1)?;
    Ok(ThroughputResult { t_leader, t_last, vph: throughput_vph(n, t_leader, t_last) })
}

pub fn throughput_vph(vehicles: usize, t_leader: f64, t_last: f64) -> f64 {
    3600.0 * (vehicles - 1) as f64 / (t_last - t_leader)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    #[serde(rename = "F")]
    pub trust: usize,
    #[serde(rename = "t_L")]
    pub t_leader: f64,
    pub t_last: f64,
    pub vph: f64,
}

/// One independent run per trust horizon, otherwise identical.
pub fn sweep_trust(cfg: &Config, trust_values: &[usize], cache: &SafeSetCache) -> Result<Vec<(SweepRow, Diagnostics)>> {
    if trust_values.is_empty() {
        return Err(Error::Config("the trust-horizon list is empty".into()));
    }
    trust_values
        .par_iter()
        .map(|&trust| {
            let mut run_cfg = cfg.clone();
            run_cfg.mpc.trust = trust;
            let out = run(&run_cfg, cache)?;
            let tp = measure_throughput(&out.log, cfg.scenario.ell)?;
            Ok((SweepRow { trust, t_leader: tp.t_leader, t_last: tp.t_last, vph: tp.vph }, out.diagnostics))
        })
        .collect()
}

/// `F,t_L,t_last,vph`.
pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
