//! Background traffic: IDM car following, pure-pursuit path tracking, and the
//! per-tick agent update used by both log generation and closed-loop rollout.

use serde::{Deserialize, Serialize};

use crate::control::bicycle_step;
use crate::geom::{wrap_angle, OrientedBox, Polyline, Pose2, Vec2};
use crate::scenario::{AgentKind, AgentTrack, EgoState, Scenario, VehicleParams, HISTORY_LEN, SIM_DT};

/// Lateral capture half-width when searching for a leader on a path, meters.
pub const LEADER_CAPTURE_M: f64 = 2.2;

/// Intelligent Driver Model parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdmParams {
    /// Desired free-flow speed, m/s.
    pub v0: f64,
    /// Desired time headway, s.
    pub t_headway: f64,
    /// Jam distance, m.
    pub s0: f64,
    /// Maximum acceleration, m/s^2.
    pub a: f64,
    /// Comfortable braking, m/s^2 (hard cap is twice this).
    pub b: f64,
    /// Free-road exponent.
    pub delta: f64,
}

impl IdmParams {
    /// Defaults with the given target speed.
    pub fn with_target_speed(v0: f64) -> Self {
        IdmParams { v0, t_headway: 1.5, s0: 2.0, a: 1.5, b: 2.0, delta: 4.0 }
    }

    /// Hard braking cap.
    pub fn b_max(&self) -> f64 {
        2.0 * self.b
    }
}

/// IDM acceleration for speed `v` given an optional leader as
/// (bumper-to-bumper gap, leader speed). Output is clipped to
/// `[-b_max, a]`; a non-positive gap commands full braking.
pub fn idm_accel(p: &IdmParams, v: f64, leader: Option<(f64, f64)>) -> f64 {
    debug_assert!(p.v0 > 0.0, "target speed must be positive");
    let free = 1.0 - (v / p.v0).powf(p.delta);
    let interaction = match leader {
        None => 0.0,
        Some((gap, _)) if gap <= 0.0 => return -p.b_max(),
        Some((gap, lead_v)) => {
            let dv = v - lead_v;
            let s_star = p.s0 + (v * p.t_headway + v * dv / (2.0 * (p.a * p.b).sqrt())).max(0.0);
            (s_star / gap).powi(2)
        }
    };
    (p.a * (free - interaction)).clamp(-p.b_max(), p.a)
}

/// Pure-pursuit steering toward a lookahead point on `path`.
pub fn pure_pursuit_steer(path: &Polyline, pose: &Pose2, v: f64, wheelbase: f64) -> f64 {
    let lookahead = (0.8 * v).max(4.0);
    let (s, _) = path.project(pose.position());
    let target = path.point_at(s + lookahead);
    let d = target - pose.position();
    let alpha = wrap_angle(d.y.atan2(d.x) - pose.yaw);
    (2.0 * wheelbase * alpha.sin() / lookahead).atan()
}

/// One IDM + pure-pursuit step along a path; `accel_limit` optionally
/// tightens the IDM band (used by the expert so demonstrations stay within
/// the comfort envelope).
pub fn follow_path_step(
    state: &EgoState,
    path: &Polyline,
    idm: &IdmParams,
    leader: Option<(f64, f64)>,
    vp: &VehicleParams,
    accel_limit: Option<f64>,
    dt: f64,
) -> EgoState {
    let mut accel = idm_accel(idm, state.velocity, leader);
    if let Some(limit) = accel_limit {
        accel = accel.clamp(-limit, limit);
    }
    let steer = pure_pursuit_steer(path, &state.pose, state.velocity, vp.wheelbase);
    let mut next = bicycle_step(state, accel, steer, vp, dt);
    if next.velocity < 0.0 {
        next.velocity = 0.0;
    }
    next
}

/// How an agent behaves during rollout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgentPolicy {
    /// Replays its recorded states verbatim.
    Replay,
    /// Longitudinal IDM along its recorded path; reacts to traffic and ego.
    Reactive,
}

/// Live agent state during a rollout.
#[derive(Debug, Clone)]
pub struct AgentSimState {
    pub id: String,
    pub kind: AgentKind,
    pub length: f64,
    pub width: f64,
    pub policy: AgentPolicy,
    pub pose: Pose2,
    pub v: f64,
    /// Station along `path` (reactive agents only).
    pub s: f64,
    path: Polyline,
    idm: IdmParams,
    track: AgentTrack,
}

impl AgentSimState {
    pub fn footprint(&self) -> OrientedBox {
        OrientedBox::new(self.pose, self.length, self.width)
    }
}

/// Recorded positions deduplicated and extended ~100 m along the final
/// heading so reactive agents can overrun the log.
fn extended_path(track: &AgentTrack) -> Option<Polyline> {
    let mut pts: Vec<Vec2> = Vec::new();
    for (pose, _) in &track.states {
        let p = pose.position();
        if pts.last().map(|q| q.dist(p) > 1e-6).unwrap_or(true) {
            pts.push(p);
        }
    }
    if pts.len() < 2 {
        return None;
    }
    let arc: f64 = pts.windows(2).map(|w| w[0].dist(w[1])).sum();
    if arc < 0.5 {
        return None;
    }
    let last_yaw = track.states.last().unwrap().0.yaw;
    let end = *pts.last().unwrap();
    pts.push(end + Vec2::new(last_yaw.cos(), last_yaw.sin()).scaled(100.0));
    Some(Polyline::new(pts))
}

/// Background traffic for one scenario rollout.
#[derive(Debug, Clone)]
pub struct TrafficSim {
    pub agents: Vec<AgentSimState>,
}

impl TrafficSim {
    /// Set up agents at the t=0 window step. With `reactive` set, vehicles
    /// with a usable recorded path follow IDM; everything else replays.
    pub fn new(scenario: &Scenario, reactive: bool) -> Self {
        let now = HISTORY_LEN - 1;
        let agents = scenario
            .agents
            .iter()
            .map(|track| {
                let (pose, v) = track.states[now];
                let path = if reactive && track.kind == AgentKind::Vehicle {
                    extended_path(track)
                } else {
                    None
                };
                let speed_limit = scenario
                    .map
                    .nearest_lane(pose.position())
                    .map(|l| l.speed_limit)
                    .unwrap_or(13.89);
                match path {
                    Some(path) => {
                        let (s, _) = path.project(pose.position());
                        AgentSimState {
                            id: track.id.clone(),
                            kind: track.kind,
                            length: track.length,
                            width: track.width,
                            policy: AgentPolicy::Reactive,
                            pose: Pose2::new(
                                path.point_at(s).x,
                                path.point_at(s).y,
                                path.heading_at(s),
                            ),
                            v,
                            s,
                            path,
                            idm: IdmParams::with_target_speed(speed_limit),
                            track: track.clone(),
                        }
                    }
                    None => AgentSimState {
                        id: track.id.clone(),
                        kind: track.kind,
                        length: track.length,
                        width: track.width,
                        policy: AgentPolicy::Replay,
                        pose,
                        v,
                        s: 0.0,
                        path: Polyline::new(vec![pose.position(), pose.position() + Vec2::new(1.0, 0.0)]),
                        idm: IdmParams::with_target_speed(speed_limit),
                        track: track.clone(),
                    },
                }
            })
            .collect();
        TrafficSim { agents }
    }

    /// Current footprints and speeds (e.g. as prediction seeds for planning).
    pub fn snapshot(&self) -> Vec<(AgentKind, OrientedBox, f64)> {
        self.agents.iter().map(|a| (a.kind, a.footprint(), a.v)).collect()
    }

    /// Advance all agents to `future_step` (1-based, 10 Hz). Leaders are
    /// resolved against positions at tick start, including the ego.
    pub fn step(&mut self, future_step: usize, ego: Option<(&OrientedBox, f64)>) {
        // Snapshot of every participant: (position, speed, half length).
        let mut others: Vec<(Vec2, f64, f64)> = self
            .agents
            .iter()
            .map(|a| (a.pose.position(), a.v, a.length / 2.0))
            .collect();
        if let Some((ego_box, ego_v)) = ego {
            others.push((ego_box.center.position(), ego_v, ego_box.length / 2.0));
        }
        let step = HISTORY_LEN - 1 + future_step;
        for (i, agent) in self.agents.iter_mut().enumerate() {
            match agent.policy {
                AgentPolicy::Replay => {
                    if let Some((pose, v)) = agent.track.states.get(step) {
                        agent.pose = *pose;
                        agent.v = *v;
                    }
                }
                AgentPolicy::Reactive => {
                    let mut leader: Option<(f64, f64)> = None;
                    for (j, &(pos, v, half_len)) in others.iter().enumerate() {
                        if j == i {
                            continue;
                        }
                        let (s_o, d) = agent.path.project(pos);
                        if d > LEADER_CAPTURE_M || s_o <= agent.s {
                            continue;
                        }
                        let gap = s_o - agent.s - half_len - agent.length / 2.0;
                        if leader.map(|(g, _)| gap < g).unwrap_or(true) {
                            leader = Some((gap, v));
                        }
                    }
                    let accel = idm_accel(&agent.idm, agent.v, leader);
                    agent.v = (agent.v + accel * SIM_DT).max(0.0);
                    agent.s += agent.v * SIM_DT;
                    let p = agent.path.point_at(agent.s);
                    agent.pose = Pose2::new(p.x, p.y, agent.path.heading_at(agent.s));
                }
            }
        }
    }
}
