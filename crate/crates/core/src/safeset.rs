//! Safe sets under worst-case predecessor braking.
//!
//! `C(v0)` is the set of follower states `(h, v)` from which the follower can
//! keep `h ≥ h_min` forever when its predecessor, starting from speed `v0`,
//! brakes at the maximum deceleration until it stops. Both vehicles are
//! approximated by the discrete kinematic model
//! `p⁺ = p + v·dt + ½·a·dt²`, `v⁺ = v + a·dt`.
//!
//! Membership is decided exactly by rolling out maximal braking for both
//! vehicles: any other follower input only increases its travel. The
//! follower may be credited with a weaker deceleration `a_follower` than the
//! predecessor. The follower's braking distance is piecewise linear in its
//! initial speed with breakpoints at the multiples of `|a_follower|·dt`.
//! With equal decelerations the boundary `h_b(v)` sampled there is exact;
//! otherwise the boundary is convex and its chords over-approximate it, so
//! the polytope is an inner approximation.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::VehicleParams;
use crate::{Error, Result};

/// Guard for floors of ratios that are integral up to rounding.
const FLOOR_EPS: f64 = 1e-9;

/// Maximum deceleration `(u_min/R_w − F_f^max)/M`, with the friction bound
/// evaluated at `v_max`. No vehicle can decelerate harder than this.
pub fn max_deceleration(params: &VehicleParams, u_min: f64, v_max: f64) -> f64 {
    (u_min / params.wheel_radius - params.friction_force(v_max)) / params.mass
}

/// Deceleration every vehicle can reach under `u_min` at any speed, the
/// friction being smallest at rest.
pub fn guaranteed_deceleration(params: &VehicleParams, u_min: f64) -> f64 {
    max_deceleration(params, u_min, 0.0)
}

/// Parameters of the worst-case braking manoeuvre.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BrakingSpec {
    /// Maximum deceleration of the predecessor (negative, m/s²).
    pub a_min: f64,
    /// Deceleration the follower is credited with, `a_min ≤ a_follower < 0`.
    pub a_follower: f64,
    /// Minimum distance (m).
    pub h_min: f64,
    pub dt: f64,
    pub v_max: f64,
}

impl BrakingSpec {
    /// Both vehicles brake at `a_min`.
    pub fn symmetric(a_min: f64, h_min: f64, dt: f64, v_max: f64) -> Self {
        Self { a_min, a_follower: a_min, h_min, dt, v_max }
    }

    /// The predecessor's kinematics.
    fn predecessor(&self) -> Braking {
        Braking { a: self.a_min, dt: self.dt }
    }

    /// The follower's kinematics.
    fn follower(&self) -> Braking {
        Braking { a: self.a_follower, dt: self.dt }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a_min < 0.0) {
            return Err(Error::Config(format!("a_min must be negative, got {}", self.a_min)));
        }
        if !(self.a_follower < 0.0 && self.a_follower >= self.a_min) {
            return Err(Error::Config(format!(
                "a_follower must lie in [a_min, 0), got {} with a_min {}",
                self.a_follower, self.a_min
            )));
        }
        if !(self.h_min > 0.0) {
            return Err(Error::Config(format!("h_min must be positive, got {}", self.h_min)));
        }
        if !(self.dt > 0.0 && self.v_max > 0.0) {
            return Err(Error::Config("dt and v_max must be positive".into()));
        }
        Ok(())
    }

    /// Velocity lost per step of maximal braking, `|a_min|·dt`.
    pub fn speed_quantum(&self) -> f64 {
        self.a_min.abs() * self.dt
    }

    /// SHA-256 over the exact bit patterns of the spec fields.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for x in [self.a_min, self.a_follower, self.h_min, self.dt, self.v_max] {
            hasher.update(x.to_bits().to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }
}

/// Stopping steps `k_s = floor(v0/(|a_min|·dt))` and the under-approximated
/// speed `ṽ0 = |a_min|·dt·k_s` from which braking stops in exactly `k_s`
/// steps.
pub fn stopping_steps(v0: f64, spec: &BrakingSpec) -> (usize, f64) {
    let q = spec.speed_quantum();
    let k = (v0.max(0.0) / q + FLOOR_EPS).floor() as usize;
    (k, k as f64 * q)
}

/// Under-approximated speed `ṽ0`.
pub fn tilde_speed(v0: f64, spec: &BrakingSpec) -> f64 {
    stopping_steps(v0, spec).1
}

/// Kinematic point-mass state.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KinematicState {
    pub p: f64,
    pub v: f64,
    pub a: f64,
}

/// Deceleration `a` applied with step `dt`.
#[derive(Debug, Clone, Copy)]
struct Braking {
    a: f64,
    dt: f64,
}

impl KinematicState {
    /// One step at deceleration `a_min`. When the remaining speed is below
    /// one quantum the deceleration is reduced so the vehicle lands exactly
    /// on zero velocity.
    pub fn brake(&self, spec: &BrakingSpec) -> KinematicState {
        self.brake_with(spec.predecessor())
    }

    fn brake_with(&self, b: Braking) -> KinematicState {
        if self.v <= 0.0 {
            return KinematicState { p: self.p, v: 0.0, a: 0.0 };
        }
        let a = b.a.max(-self.v / b.dt);
        let v = self.v + a * b.dt;
        KinematicState {
            p: self.p + self.v * b.dt + 0.5 * a * b.dt * b.dt,
            // Avoid a −1e-16 residual from the subtraction.
            v: if v.abs() < 1e-12 { 0.0 } else { v },
            a,
        }
    }
}

/// Positions of a vehicle braking at `a_min` from `v` until it stops (first
/// entry 0).
pub fn braking_positions(v: f64, spec: &BrakingSpec) -> Vec<f64> {
    positions_with(v, spec.predecessor())
}

fn positions_with(v: f64, b: Braking) -> Vec<f64> {
    let mut state = KinematicState { p: 0.0, v, a: 0.0 };
    let mut out = vec![0.0];
    while state.v > 0.0 {
        state = state.brake_with(b);
        out.push(state.p);
    }
    out
}

/// Smallest headway over the joint braking rollout.
///
/// The predecessor brakes from `ṽ0(v0)` at `a_min` and the follower from
/// `vf` at `a_follower`, starting `h0` apart; the headway is sampled at
/// every step until both have stopped.
pub fn rollout_min_headway(h0: f64, vf: f64, v0: f64, spec: &BrakingSpec) -> f64 {
    let lead = positions_with(tilde_speed(v0, spec), spec.predecessor());
    let follow = positions_with(vf, spec.follower());
    let steps = lead.len().max(follow.len());
    (0..steps)
        .map(|k| {
            let pl = lead[k.min(lead.len() - 1)];
            let pf = follow[k.min(follow.len() - 1)];
            h0 + pl - pf
        })
        .fold(f64::INFINITY, f64::min)
}

/// Exact membership oracle: `h ≥ h_min` holds along the extremal rollout.
pub fn rollout_membership(h0: f64, vf: f64, v0: f64, spec: &BrakingSpec) -> bool {
    vf >= 0.0 && vf <= spec.v_max && rollout_min_headway(h0, vf, v0, spec) >= spec.h_min
}

/// Linear constraint `normal · [h, v] ≤ offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Halfspace {
    pub normal: [f64; 2],
    pub offset: f64,
}

impl Halfspace {
    pub fn eval(&self, h: f64, v: f64) -> f64 {
        self.normal[0] * h + self.normal[1] * v - self.offset
    }
}

/// Polytopic safe set `{(h, v) : h ≥ h_b(v), 0 ≤ v ≤ v_max}`.
#[derive(Debug, Clone, PartialEq)]
pub struct SafeSet {
    pub v0: f64,
    pub v0_tilde: f64,
    pub k_s: usize,
    /// Boundary vertices `(v, h_b(v))` with increasing `v`, from `v = 0` to
    /// `v = v_max`.
    boundary: Vec<(f64, f64)>,
    /// Headway facets followed by the two velocity facets.
    halfspaces: Vec<Halfspace>,
}

impl SafeSet {
    pub fn boundary(&self) -> &[(f64, f64)] {
        &self.boundary
    }

    pub fn halfspaces(&self) -> &[Halfspace] {
        &self.halfspaces
    }

    /// Facets that bound the headway, excluding `0 ≤ v ≤ v_max`.
    pub fn headway_halfspaces(&self) -> &[Halfspace] {
        &self.halfspaces[..self.halfspaces.len() - 2]
    }

    /// Boundary headway `h_b(v)` by interpolation; `v` is clamped to the
    /// velocity range.
    pub fn boundary_headway(&self, v: f64) -> f64 {
        let b = &self.boundary;
        let v = v.clamp(b[0].0, b[b.len() - 1].0);
        let j = b.partition_point(|&(bv, _)| bv <= v).clamp(1, b.len() - 1);
        let (v1, h1) = b[j - 1];
        let (v2, h2) = b[j];
        if v2 == v1 {
            return h1.max(h2);
        }
        h1 + (h2 - h1) * (v - v1) / (v2 - v1)
    }

    /// Halfspace membership with tolerance `tol` on every facet.
    pub fn contains_with_tol(&self, h: f64, v: f64, tol: f64) -> bool {
        self.halfspaces.iter().all(|hs| hs.eval(h, v) <= tol)
    }

    pub fn contains(&self, h: f64, v: f64) -> bool {
        self.contains_with_tol(h, v, 0.0)
    }
}

/// Builds `C(v0)`.
///
/// The boundary is evaluated with the rollout oracle at the follower speeds
/// `j·|a_follower|·dt` (and at `v_max`); consecutive points are joined by
/// segments and collinear runs are merged.
pub fn build_safe_set(v0: f64, spec: &BrakingSpec) -> SafeSet {
    let (k_s, v0_tilde) = stopping_steps(v0, spec);
    let q = spec.a_follower.abs() * spec.dt;
    let last = (spec.v_max / q + FLOOR_EPS).floor() as usize;
    let mut speeds: Vec<f64> = (0..=last).map(|j| j as f64 * q).collect();
    if spec.v_max - speeds[last] > 1e-12 {
        speeds.push(spec.v_max);
    }
    let raw: Vec<(f64, f64)> = speeds
        .iter()
        .map(|&v| {
            // h_b(v) = h_min − (min headway change over the rollout).
            let dip = rollout_min_headway(0.0, v, v0_tilde, spec);
            (v, spec.h_min - dip)
        })
        .collect();

    let mut boundary: Vec<(f64, f64)> = vec![raw[0]];
    for &pt in &raw[1..] {
        if boundary.len() >= 2 {
            let (v1, h1) = boundary[boundary.len() - 2];
            let (v2, h2) = boundary[boundary.len() - 1];
            let s_prev = (h2 - h1) / (v2 - v1);
            let s_next = (pt.1 - h2) / (pt.0 - v2);
            if (s_next - s_prev).abs() <= 1e-9 * (1.0 + s_prev.abs()) {
                boundary.pop();
            }
        }
        boundary.push(pt);
    }

    let mut halfspaces = Vec::with_capacity(boundary.len() + 2);
    for w in boundary.windows(2) {
        let ((v1, h1), (v2, h2)) = (w[0], w[1]);
        let slope = (h2 - h1) / (v2 - v1);
        // h ≥ h1 + slope (v − v1)  ⇔  −h + slope·v ≤ slope·v1 − h1
        halfspaces.push(Halfspace { normal: [-1.0, slope], offset: slope * v1 - h1 });
    }
    halfspaces.push(Halfspace { normal: [0.0, 1.0], offset: spec.v_max });
    halfspaces.push(Halfspace { normal: [0.0, -1.0], offset: 0.0 });

    SafeSet { v0, v0_tilde, k_s, boundary, halfspaces }
}

/// Predecessor velocity preview with braking injected at the trust horizon.
///
/// `estimates[k]` is the estimated predecessor speed `k` steps ahead
/// (index 0 is the current step). The first `trust` entries are kept; at
/// `trust` the speed is replaced by `ṽ0` of the estimate there, after which
/// it drops by `|a_min|·dt` per step down to zero.
pub fn braking_velocity_profile(estimates: &[f64], trust: usize, spec: &BrakingSpec) -> Vec<f64> {
    assert!(trust < estimates.len(), "trust horizon beyond preview");
    let q = spec.speed_quantum();
    let (k_s, _) = stopping_steps(estimates[trust], spec);
    estimates
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            if k < trust {
                v
            } else {
                k_s.saturating_sub(k - trust) as f64 * q
            }
        })
        .collect()
}

const CACHE_MAGIC: &str = "platoon-safeset-cache v2";

/// Offline collection of safe sets, one per attainable `ṽ0` in
/// `[v_min, v_max]`.
#[derive(Debug, Clone)]
pub struct SafeSetCache {
    spec: BrakingSpec,
    first: usize,
    sets: Vec<SafeSet>,
}

impl SafeSetCache {
    pub fn build(spec: BrakingSpec, v_min: f64) -> Result<Self> {
        spec.validate()?;
        let q = spec.speed_quantum();
        let first = stopping_steps(v_min, &spec).0;
        let last = stopping_steps(spec.v_max, &spec).0;
        let sets = (first..=last)
            .into_par_iter()
            .map(|k| build_safe_set(k as f64 * q, &spec))
            .collect();
        Ok(Self { spec, first, sets })
    }

    pub fn spec(&self) -> &BrakingSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn sets(&self) -> &[SafeSet] {
        &self.sets
    }

    /// Set keyed by `ṽ0(v0)`; speeds outside the grid map to its ends.
    pub fn select(&self, v0: f64) -> &SafeSet {
        let k = stopping_steps(v0, &self.spec).0;
        let idx = k.saturating_sub(self.first).min(self.sets.len() - 1);
        &self.sets[idx]
    }

    /// Text table: header, spec fingerprint, then one block per set.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let s = &self.spec;
        let _ = writeln!(out, "{CACHE_MAGIC}");
        let _ = writeln!(out, "spec {}", s.fingerprint());
        let _ = writeln!(out, "braking {:e} {:e} {:e} {:e} {:e}", s.a_min, s.a_follower, s.h_min, s.dt, s.v_max);
        let _ = writeln!(out, "first {}", self.first);
        for set in &self.sets {
            let _ = writeln!(out, "set {} {:e} {}", set.k_s, set.v0_tilde, set.boundary.len());
            for &(v, h) in &set.boundary {
                let _ = writeln!(out, "{v:e} {h:e}");
            }
        }
        out
    }

    /// Parses a cache written by [`Self::to_text`]; fails when the embedded
    /// fingerprint does not match `spec`.
    pub fn from_text(text: &str, spec: &BrakingSpec, path: &Path) -> Result<Self> {
        let stale = |reason: &str| Error::StaleCache { path: path.to_path_buf(), reason: reason.into() };
        let mut lines = text.lines();
        if lines.next() != Some(CACHE_MAGIC) {
            return Err(stale("unknown format version"));
        }
        let fp = lines
            .next()
            .and_then(|l| l.strip_prefix("spec "))
            .ok_or_else(|| stale("missing spec fingerprint"))?;
        if fp != spec.fingerprint() {
            return Err(stale("braking spec changed"));
        }
        lines.next().ok_or_else(|| stale("missing braking line"))?;
        let first: usize = lines
            .next()
            .and_then(|l| l.strip_prefix("first "))
            .and_then(|l| l.parse().ok())
            .ok_or_else(|| stale("missing grid start"))?;
        let mut sets = Vec::new();
        while let Some(line) = lines.next() {
            let mut it = line.split_whitespace();
            if it.next() != Some("set") {
                return Err(stale("expected set header"));
            }
            let k_s: usize = it.next().and_then(|x| x.parse().ok()).ok_or_else(|| stale("bad k_s"))?;
            let v0_tilde: f64 = it.next().and_then(|x| x.parse().ok()).ok_or_else(|| stale("bad v0"))?;
            let n: usize = it.next().and_then(|x| x.parse().ok()).ok_or_else(|| stale("bad count"))?;
            let mut boundary = Vec::with_capacity(n);
            for _ in 0..n {
                let l = lines.next().ok_or_else(|| stale("truncated set"))?;
                let mut xs = l.split_whitespace().map(str::parse::<f64>);
                match (xs.next(), xs.next()) {
                    (Some(Ok(v)), Some(Ok(h))) => boundary.push((v, h)),
                    _ => return Err(stale("bad boundary vertex")),
                }
            }
            // Halfspaces are rebuilt from the stored vertices.
            let mut set = build_safe_set(v0_tilde, spec);
            if set.k_s != k_s || set.boundary.len() != boundary.len() {
                return Err(stale("set does not match its spec"));
            }
            set.boundary = boundary;
            sets.push(set);
        }
        if sets.is_empty() {
            return Err(stale("no sets"));
        }
        Ok(Self { spec: *spec, first, sets })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Loads the cache at `path`, rebuilding and rewriting it when it is
    /// missing or was built for a different spec.
    pub fn load_or_build(path: &Path, spec: BrakingSpec, v_min: f64) -> Result<Self> {
        if let Ok(text) = std::fs::read_to_string(path) {
            match Self::from_text(&text, &spec, path) {
                Ok(cache) => return Ok(cache),
                Err(e) => log::info!("{e}; rebuilding"),
            }
        }
        let cache = Self::build(spec, v_min)?;
        cache.save(path)?;
        Ok(cache)
    }
}
