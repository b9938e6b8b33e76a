//! Vehicle-to-vehicle messaging.
//!
//! Every vehicle broadcasts its planned velocity trajectory once per step.
//! Messages travel over directed arcs that point away from the leader and
//! are delivered after a fixed per-arc latency. Receivers keep only the most
//! recent message per sender and use it to build velocity previews and the
//! leader-distance estimate.

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Index of a vehicle in the platoon; 0 is the leader.
pub type VehicleId = usize;

/// Rounding guard for time ratios that are integral up to floating-point
/// error (timestamps are exact multiples of the sampling time).
const STEP_EPS: f64 = 1e-9;

/// A broadcast plan: timestamp, optional leader position, and the planned
/// velocities `v(t|t) … v(t+N_p|t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct V2VMessage {
    pub sender: VehicleId,
    /// Step index at which the message was sent.
    pub sent_step: u64,
    pub t_sent: f64,
    /// Current position `p^L(t|t)`; present only for the leader.
    pub position: Option<f64>,
    pub plan: Vec<f64>,
}

/// Over-estimated delay in whole steps, `ceil((t_received − t_sent)/dt)`.
pub fn compute_delay(t_received: f64, t_sent: f64, dt: f64) -> Result<usize> {
    let gap = t_received - t_sent;
    if gap < -STEP_EPS * dt {
        return Err(Error::ClockViolation { t_sent, t_received });
    }
    Ok((gap / dt - STEP_EPS).ceil().max(0.0) as usize)
}

/// Velocity estimate `k` steps ahead of the current step from a plan that
/// originated `d` steps ago; beyond the plan the terminal velocity is held.
pub fn estimate_velocity(msg: &V2VMessage, d: usize, k: usize) -> f64 {
    let idx = (d + k).min(msg.plan.len() - 1);
    msg.plan[idx]
}

/// Estimates for every step `t … t+horizon`.
pub fn estimate_velocity_profile(msg: &V2VMessage, d: usize, horizon: usize) -> Vec<f64> {
    (0..=horizon).map(|k| estimate_velocity(msg, d, k)).collect()
}

/// Distance to the leader reconstructed from a leader message that is `d`
/// steps old: the transmitted position advanced by the planned velocities,
/// minus the receiver's own position. `None` if the message carries no
/// position.
pub fn estimate_leader_position(msg: &V2VMessage, d: usize, own_p: f64, dt: f64) -> Option<f64> {
    let p = msg.position?;
    let advanced: f64 = (0..d).map(|k| msg.plan[k.min(msg.plan.len() - 1)]).sum::<f64>();
    Some(p + dt * advanced - own_p)
}

/// Information-flow topology.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TopologyKind {
    /// Each follower hears only its predecessor.
    PredecessorFollowing,
    /// Each follower hears its predecessor and the leader.
    #[default]
    PredecessorFollowingLeader,
}

/// Directed sender→receiver arcs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    arcs: Vec<(VehicleId, VehicleId)>,
}

impl Topology {
    pub fn new(kind: TopologyKind, n: usize) -> Self {
        let mut arcs = Vec::new();
        for i in 1..n {
            arcs.push((i - 1, i));
            if kind == TopologyKind::PredecessorFollowingLeader && i >= 2 {
                arcs.push((0, i));
            }
        }
        Self { arcs }
    }

    /// Builds a topology from explicit arcs. Information may only flow
    /// rearward, which also makes the graph acyclic.
    pub fn from_arcs(arcs: Vec<(VehicleId, VehicleId)>) -> Result<Self> {
        for &(s, r) in &arcs {
            if s >= r {
                return Err(Error::Config(format!(
                    "arc {s}->{r} does not point away from the leader"
                )));
            }
        }
        Ok(Self { arcs })
    }

    pub fn arcs(&self) -> &[(VehicleId, VehicleId)] {
        &self.arcs
    }

    /// Senders that `receiver` listens to.
    pub fn senders_of(&self, receiver: VehicleId) -> impl Iterator<Item = VehicleId> + '_ {
        self.arcs.iter().filter(move |a| a.1 == receiver).map(|a| a.0)
    }
}

/// A queued message with its delivery step.
#[derive(Debug, Clone)]
struct InFlight {
    deliver_step: u64,
    msg: V2VMessage,
}

/// FIFO queue on one arc with constant latency.
#[derive(Debug, Clone)]
pub struct DelayedChannel {
    pub sender: VehicleId,
    pub receiver: VehicleId,
    pub latency: f64,
    latency_steps: u64,
    queue: VecDeque<InFlight>,
}

impl DelayedChannel {
    fn new(sender: VehicleId, receiver: VehicleId, latency: f64, dt: f64) -> Self {
        Self {
            sender,
            receiver,
            latency,
            latency_steps: (latency / dt - STEP_EPS).ceil().max(0.0) as u64,
            queue: VecDeque::new(),
        }
    }

    pub fn in_flight(&self) -> usize {
        self.queue.len()
    }
}

/// A message as held by a receiver.
#[derive(Debug, Clone, PartialEq)]
pub struct Received {
    pub msg: V2VMessage,
    pub t_received: f64,
}

impl Received {
    /// Age in steps at time `t`, per the over-estimating delay rule.
    pub fn delay_at(&self, t: f64, dt: f64) -> Result<usize> {
        compute_delay(t, self.msg.t_sent, dt)
    }
}

/// One delivered message, as written to the message log.
#[derive(Debug, Clone, PartialEq)]
pub struct Delivery {
    pub t_sent: f64,
    pub t_received: f64,
    pub sender: VehicleId,
    pub receiver: VehicleId,
    pub delay: usize,
    pub plan: Vec<f64>,
}

/// Delayed message bus. Single-owner state machine advanced once per step.
#[derive(Debug, Clone)]
pub struct MessageBus {
    channels: Vec<DelayedChannel>,
    mailboxes: Vec<BTreeMap<VehicleId, Received>>,
    dt: f64,
    horizon: usize,
    last_step: Option<u64>,
    deliveries: Vec<Delivery>,
    stale: usize,
}

impl MessageBus {
    /// `horizon` is the plan horizon; messages older than it are discarded.
    pub fn new(topology: &Topology, n: usize, latency: f64, dt: f64, horizon: usize) -> Self {
        let channels = topology
            .arcs()
            .iter()
            .map(|&(s, r)| DelayedChannel::new(s, r, latency, dt))
            .collect();
        Self {
            channels,
            mailboxes: vec![BTreeMap::new(); n],
            dt,
            horizon,
            last_step: None,
            deliveries: Vec::new(),
            stale: 0,
        }
    }

    pub fn channels(&self) -> &[DelayedChannel] {
        &self.channels
    }

    /// Number of channels a vehicle listens on.
    pub fn channel_count(&self, receiver: VehicleId) -> usize {
        self.channels.iter().filter(|c| c.receiver == receiver).count()
    }

    /// Enqueues `msg` on every outgoing arc of its sender.
    pub fn send(&mut self, msg: V2VMessage) {
        for ch in self.channels.iter_mut().filter(|c| c.sender == msg.sender) {
            ch.queue.push_back(InFlight {
                deliver_step: msg.sent_step + ch.latency_steps,
                msg: msg.clone(),
            });
        }
    }

    /// Delivers every message due at `step`, in per-arc order, and returns
    /// what was delivered. Receivers keep only the newest message per sender.
    pub fn tick(&mut self, step: u64) -> Vec<Delivery> {
        assert!(
            self.last_step.is_none_or(|s| step > s),
            "bus must be advanced with increasing steps"
        );
        self.last_step = Some(step);
        let t = step as f64 * self.dt;
        let mut delivered = Vec::new();
        for ch in &mut self.channels {
            while ch.queue.front().is_some_and(|m| m.deliver_step <= step) {
                let InFlight { msg, .. } = ch.queue.pop_front().expect("front checked");
                // Delivery always happens at or after the send time.
                let delay = compute_delay(t, msg.t_sent, self.dt).expect("delivery after send");
                if delay > self.horizon {
                    self.stale += 1;
                    continue;
                }
                delivered.push(Delivery {
                    t_sent: msg.t_sent,
                    t_received: t,
                    sender: msg.sender,
                    receiver: ch.receiver,
                    delay,
                    plan: msg.plan.clone(),
                });
                let mailbox = &mut self.mailboxes[ch.receiver];
                let newer = mailbox
                    .get(&msg.sender)
                    .is_none_or(|held| held.msg.sent_step <= msg.sent_step);
                if newer {
                    mailbox.insert(msg.sender, Received { msg, t_received: t });
                }
            }
        }
        self.deliveries.extend(delivered.iter().cloned());
        delivered
    }

    /// Most recent message `receiver` holds from `sender`.
    pub fn latest(&self, receiver: VehicleId, sender: VehicleId) -> Option<&Received> {
        self.mailboxes[receiver].get(&sender)
    }

    /// Immutable snapshot of every mailbox.
    pub fn snapshot(&self) -> Vec<BTreeMap<VehicleId, Received>> {
        self.mailboxes.clone()
    }

    pub fn deliveries(&self) -> &[Delivery] {
        &self.deliveries
    }

    /// Messages dropped on arrival for being older than the plan horizon.
    pub fn stale_count(&self) -> usize {
        self.stale
    }

    /// Writes the delivery log as CSV:
    /// `t_sent,t_received,sender,receiver,d,plan_0,…,plan_Np`.
    pub fn write_log<W: Write>(&self, out: W) -> Result<()> {
        write_delivery_log(&self.deliveries, self.horizon, out)
    }
}

pub fn write_delivery_log<W: Write>(deliveries: &[Delivery], horizon: usize, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["t_sent", "t_received", "sender", "receiver", "d"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..=horizon).map(|k| format!("plan_{k}")));
    w.write_record(&header)?;
    for d in deliveries {
        let mut row = vec![
            format!("{:.6}", d.t_sent),
            format!("{:.6}", d.t_received),
            d.sender.to_string(),
            d.receiver.to_string(),
            d.delay.to_string(),
        ];
        row.extend(d.plan.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
