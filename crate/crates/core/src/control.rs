//! Kinematic bicycle model, decoupled LQR trajectory tracking, and the
//! 21-candidate sampler/scorer that wraps the planner model's raw output.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{wrap_angle, OrientedBox, Polyline, Pose2, Vec2};
use crate::scenario::{AgentKind, EgoState, MapModel, VehicleParams, SIM_DT};

/// Lateral offsets for candidate paths, meters.
pub const DEFAULT_OFFSETS: [f64; 3] = [-1.0, 0.0, 1.0];
/// Target-speed fractions of the speed limit for candidate profiles.
pub const DEFAULT_FRACTIONS: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];

/// One time-parameterized trajectory point (10 Hz grid).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajPoint {
    pub pose: Pose2,
    pub v: f64,
    pub t: f64,
}

/// 8 s plan: 80 points at t = 0.1 ..= 8.0.
pub type Trajectory = Vec<TrajPoint>;

/// Convert ego-frame (x, y, yaw) points into a world-frame trajectory,
/// deriving per-point speeds from displacements.
pub fn trajectory_from_local_poses(points: &[Pose2], anchor: &Pose2) -> Trajectory {
    let mut out = Vec::with_capacity(points.len());
    let mut prev = anchor.position();
    for (k, p) in points.iter().enumerate() {
        let world = p.from_frame(anchor);
        let v = world.position().dist(prev) / SIM_DT;
        prev = world.position();
        out.push(TrajPoint { pose: world, v, t: (k + 1) as f64 * SIM_DT });
    }
    out
}

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("Riccati iteration did not converge within {0} iterations")]
    RiccatiDiverged(usize),
    #[error("centerline is degenerate ({0} points)")]
    DegenerateCenterline(usize),
}

/// LQR weights: state costs (lateral, heading, station, speed) and control
/// costs (accel, steer).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LqrConfig {
    pub q: [f64; 4],
    pub r: [f64; 2],
    pub max_iters: usize,
    pub tol: f64,
    pub dt: f64,
}

impl Default for LqrConfig {
    fn default() -> Self {
        LqrConfig { q: [1.0, 5.0, 1.0, 1.0], r: [0.5, 5.0], max_iters: 500, tol: 1e-9, dt: SIM_DT }
    }
}

/// One integration step of the kinematic bicycle; inputs are clipped to the
/// vehicle limits first.
pub fn bicycle_step(state: &EgoState, accel: f64, steer: f64, vp: &VehicleParams, dt: f64) -> EgoState {
    let accel = accel.clamp(vp.a_min, vp.a_max);
    let steer = steer.clamp(-vp.max_steer, vp.max_steer);
    let (s, c) = state.pose.yaw.sin_cos();
    let x = state.pose.x + state.velocity * c * dt;
    let y = state.pose.y + state.velocity * s * dt;
    let yaw = wrap_angle(state.pose.yaw + state.velocity * steer.tan() / vp.wheelbase * dt);
    let v = (state.velocity + accel * dt).max(vp.v_min);
    EgoState {
        pose: Pose2::new(x, y, yaw),
        velocity: v,
        acceleration: accel,
        steering: steer,
        timestamp: state.timestamp + dt,
    }
}

/// Discrete-time Riccati iteration for a 2-state / 1-control system with
/// diagonal state cost; returns the feedback gain row.
fn dlqr2(a: [[f64; 2]; 2], b: [f64; 2], q: [f64; 2], r: f64, max_iters: usize, tol: f64) -> Result<[f64; 2], ControlError> {
    let mut p = [[q[0], 0.0], [0.0, q[1]]];
    for _ in 0..max_iters {
        // pb = P b; s = r + b' P b; atw = A' P b
        let pb = [p[0][0] * b[0] + p[0][1] * b[1], p[1][0] * b[0] + p[1][1] * b[1]];
        let s = r + b[0] * pb[0] + b[1] * pb[1];
        let atw = [a[0][0] * pb[0] + a[1][0] * pb[1], a[0][1] * pb[0] + a[1][1] * pb[1]];
        // A' P A
        let pa = [
            [p[0][0] * a[0][0] + p[0][1] * a[1][0], p[0][0] * a[0][1] + p[0][1] * a[1][1]],
            [p[1][0] * a[0][0] + p[1][1] * a[1][0], p[1][0] * a[0][1] + p[1][1] * a[1][1]],
        ];
        let atpa = [
            [a[0][0] * pa[0][0] + a[1][0] * pa[1][0], a[0][0] * pa[0][1] + a[1][0] * pa[1][1]],
            [a[0][1] * pa[0][0] + a[1][1] * pa[1][0], a[0][1] * pa[0][1] + a[1][1] * pa[1][1]],
        ];
        let mut next = [[0.0; 2]; 2];
        let mut diff = 0.0f64;
        for i in 0..2 {
            for j in 0..2 {
                let qij = if i == j { q[i] } else { 0.0 };
                next[i][j] = atpa[i][j] - atw[i] * atw[j] / s + qij;
                diff = diff.max((next[i][j] - p[i][j]).abs());
            }
        }
        // keep symmetric against round-off
        let off = 0.5 * (next[0][1] + next[1][0]);
        next[0][1] = off;
        next[1][0] = off;
        p = next;
        if diff < tol {
            let pb = [p[0][0] * b[0] + p[0][1] * b[1], p[1][0] * b[0] + p[1][1] * b[1]];
            let s = r + b[0] * pb[0] + b[1] * pb[1];
            let k = [
                (a[0][0] * pb[0] + a[1][0] * pb[1]) / s,
                (a[0][1] * pb[0] + a[1][1] * pb[1]) / s,
            ];
            return Ok(k);
        }
    }
    Err(ControlError::RiccatiDiverged(max_iters))
}

/// Reusable LQR feedback law: decoupled longitudinal/lateral gains with
/// feedforward from the reference. The longitudinal gain is fixed; lateral
/// gains depend on speed and are memoized on 0.05 m/s bins, so a tracker can
/// be stepped incrementally across many plans without re-solving Riccati.
pub struct LqrTracker {
    vp: VehicleParams,
    dt: f64,
    k_long: [f64; 2],
    lat_q: [f64; 2],
    lat_r: f64,
    max_iters: usize,
    tol: f64,
    lat_cache: std::collections::HashMap<i64, [f64; 2]>,
}

impl LqrTracker {
    pub fn new(vp: &VehicleParams, cfg: &LqrConfig) -> Result<Self, ControlError> {
        let dt = cfg.dt;
        // Longitudinal error system: [station err, speed err], control accel.
        let k_long = dlqr2([[1.0, dt], [0.0, 1.0]], [0.0, dt], [cfg.q[2], cfg.q[3]], cfg.r[0], cfg.max_iters, cfg.tol)?;
        Ok(LqrTracker {
            vp: *vp,
            dt,
            k_long,
            lat_q: [cfg.q[0], cfg.q[1]],
            lat_r: cfg.r[1],
            max_iters: cfg.max_iters,
            tol: cfg.tol,
            lat_cache: std::collections::HashMap::new(),
        })
    }

    fn k_lat_for(&mut self, v: f64) -> Result<[f64; 2], ControlError> {
        // Gain scheduling floors at 1 m/s: below that the lateral system is
        // so weakly actuated that the Riccati recursion cannot reach the
        // tolerance inside the iteration budget (and steering authority is
        // physically negligible anyway).
        let vg = v.abs().max(1.0);
        let bin = (vg / 0.05).round() as i64;
        if let Some(k) = self.lat_cache.get(&bin) {
            return Ok(*k);
        }
        let vq = bin as f64 * 0.05;
        let dt = self.dt;
        let k = dlqr2(
            [[1.0, vq * dt], [0.0, 1.0]],
            [0.0, vq * dt / self.vp.wheelbase],
            self.lat_q,
            self.lat_r,
            self.max_iters,
            self.tol,
        )?;
        self.lat_cache.insert(bin, k);
        Ok(k)
    }

    /// One control cycle: errors measured against `ref_now`, feedforward
    /// toward `ref_next`, then a single bicycle integration step.
    pub fn step(&mut self, state: &EgoState, ref_now: &TrajPoint, ref_next: &TrajPoint) -> Result<EgoState, ControlError> {
        let dt = self.dt;
        // Errors in the frame of the current reference point.
        let local = state.pose.into_frame(&ref_now.pose);
        let e_station = local.x;
        let e_lat = local.y;
        let e_heading = local.yaw;
        let e_speed = state.velocity - ref_now.v;
        // Feedforward from the reference.
        let a_ref = (ref_next.v - ref_now.v) / dt;
        let ds = ref_next.pose.position().dist(ref_now.pose.position());
        let kappa_ref = if ds > 1e-6 { wrap_angle(ref_next.pose.yaw - ref_now.pose.yaw) / ds } else { 0.0 };
        let steer_ref = (kappa_ref * self.vp.wheelbase).atan();

        let accel = a_ref - self.k_long[0] * e_station - self.k_long[1] * e_speed;
        let k_lat = self.k_lat_for(state.velocity)?;
        let steer_cmd = steer_ref - k_lat[0] * e_lat - k_lat[1] * e_heading;
        // Steering-rate limit relative to the previous applied steer.
        let max_delta = self.vp.steer_rate_max * dt;
        let steer = state.steering + (steer_cmd - state.steering).clamp(-max_delta, max_delta);
        Ok(bicycle_step(state, accel, steer, &self.vp, dt))
    }
}

/// Track a time-parameterized reference with decoupled longitudinal/lateral
/// LQR feedback plus feedforward; returns the closed-loop rollout (one state
/// per reference point).
pub fn lqr_track(reference: &Trajectory, start: &EgoState, vp: &VehicleParams, cfg: &LqrConfig) -> Result<Vec<EgoState>, ControlError> {
    let mut tracker = LqrTracker::new(vp, cfg)?;
    // Extended reference with the start state as the t=0 anchor.
    let anchor = TrajPoint { pose: start.pose, v: start.velocity, t: start.timestamp };
    let mut state = *start;
    let mut rollout = Vec::with_capacity(reference.len());
    for k in 0..reference.len() {
        let ref_now = if k == 0 { &anchor } else { &reference[k - 1] };
        state = tracker.step(&state, ref_now, &reference[k])?;
        rollout.push(state);
    }
    Ok(rollout)
}

/// How a candidate was constructed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Provenance {
    /// The model's trajectory, untouched.
    ModelRaw,
    /// Route-based path: lateral offset and speed fraction; `blended` paths
    /// merge the model's lateral profile over the first 2 s.
    OffsetPath { offset: f64, fraction: f64, blended: bool },
}

#[derive(Debug, Clone)]
pub struct Candidate {
    pub provenance: Provenance,
    pub trajectory: Trajectory,
    /// LQR tracking result from the current ego state.
    pub rollout: Vec<EgoState>,
}

#[derive(Debug, Clone)]
pub struct CandidateSet {
    pub candidates: Vec<Candidate>,
}

/// Sample the candidate set: the raw model trajectory, plus route paths
/// (pure centerline and blended lateral offsets) crossed with trapezoidal
/// speed profiles, each tracked by LQR from the current state.
///
/// Candidates are generated in tie-break rank order: model_raw first, then
/// paths by |offset| (pure centerline ahead of the blended zero offset),
/// negative offset ahead of positive, and higher speed fraction first.
#[allow(clippy::too_many_arguments)]
pub fn build_candidates(
    model_traj: &Trajectory,
    centerline: &Polyline,
    speed_limit: f64,
    start: &EgoState,
    vp: &VehicleParams,
    lqr: &LqrConfig,
    offsets: &[f64],
    fractions: &[f64],
) -> Result<CandidateSet, ControlError> {
    if centerline.points.len() < 2 {
        return Err(ControlError::DegenerateCenterline(centerline.points.len()));
    }
    let horizon = model_traj.len();
    let mut candidates = Vec::with_capacity(1 + (offsets.len() + 1) * fractions.len());
    candidates.push(Candidate {
        provenance: Provenance::ModelRaw,
        trajectory: model_traj.clone(),
        rollout: lqr_track(model_traj, start, vp, lqr)?,
    });

    let (s_proj, _) = centerline.project(start.pose.position());
    // Model lateral profile relative to the centerline, per step.
    let model_offsets: Vec<f64> = model_traj
        .iter()
        .map(|p| centerline.signed_offset(p.pose.position()))
        .collect();

    let mut fractions_sorted = fractions.to_vec();
    fractions_sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut offsets_sorted = offsets.to_vec();
    offsets_sorted.sort_by(|a, b| (a.abs(), *a).partial_cmp(&(b.abs(), *b)).unwrap());

    // None = pure centerline; Some(o) = blended offset path.
    let paths: Vec<Option<f64>> =
        std::iter::once(None).chain(offsets_sorted.iter().map(|&o| Some(o))).collect();
    for path in &paths {
        for &fraction in &fractions_sorted {
            let v_target = fraction * speed_limit;
            let mut v = start.velocity;
            let mut station = s_proj;
            let mut positions = Vec::with_capacity(horizon);
            let mut speeds = Vec::with_capacity(horizon);
            for k in 0..horizon {
                let dv = (v_target - v).clamp(-vp.a_max * SIM_DT, vp.a_max * SIM_DT);
                v += dv;
                station += v * SIM_DT;
                let t = (k + 1) as f64 * SIM_DT;
                let lateral = match path {
                    None => 0.0,
                    Some(o) => {
                        let w = (t / 2.0).min(1.0);
                        (1.0 - w) * model_offsets[k] + w * o
                    }
                };
                let base = centerline.point_at(station);
                let h = centerline.heading_at(station);
                let left = Vec2::new(h.cos(), h.sin()).perp();
                positions.push(base + left.scaled(lateral));
                speeds.push(v);
            }
            let mut traj: Trajectory = Vec::with_capacity(horizon);
            for k in 0..horizon {
                let yaw = if k + 1 < horizon {
                    let d = positions[k + 1] - positions[k];
                    if d.norm() > 1e-6 {
                        d.y.atan2(d.x)
                    } else if k > 0 {
                        traj[k - 1].pose.yaw
                    } else {
                        start.pose.yaw
                    }
                } else if k > 0 {
                    traj[k - 1].pose.yaw
                } else {
                    start.pose.yaw
                };
                traj.push(TrajPoint {
                    pose: Pose2::new(positions[k].x, positions[k].y, yaw),
                    v: speeds[k],
                    t: (k + 1) as f64 * SIM_DT,
                });
            }
            let rollout = lqr_track(&traj, start, vp, lqr)?;
            candidates.push(Candidate {
                provenance: match path {
                    None => Provenance::OffsetPath { offset: 0.0, fraction, blended: false },
                    Some(o) => Provenance::OffsetPath { offset: *o, fraction, blended: true },
                },
                trajectory: traj,
                rollout,
            });
        }
    }
    Ok(CandidateSet { candidates })
}

/// Constant-velocity forecast of one agent used by the candidate scorer.
#[derive(Debug, Clone)]
pub struct PredictedAgent {
    pub kind: AgentKind,
    /// Footprint per future step (same grid as the rollouts).
    pub boxes: Vec<OrientedBox>,
    pub speed: f64,
}

/// Project agents forward at constant speed along their current heading.
pub fn predict_constant_velocity(
    agents: &[(AgentKind, OrientedBox, f64)],
    steps: usize,
    dt: f64,
) -> Vec<PredictedAgent> {
    agents
        .iter()
        .map(|(kind, b0, speed)| {
            let dir = Vec2::new(b0.center.yaw.cos(), b0.center.yaw.sin());
            let boxes = (1..=steps)
                .map(|k| {
                    let d = dir.scaled(speed * k as f64 * dt);
                    OrientedBox::new(
                        Pose2::new(b0.center.x + d.x, b0.center.y + d.y, b0.center.yaw),
                        b0.length,
                        b0.width,
                    )
                })
                .collect();
            PredictedAgent { kind: *kind, boxes, speed: *speed }
        })
        .collect()
}

/// Scorer weights for the averaged terms; collision and drivable compliance
/// act as 0/1 multipliers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScorerWeights {
    pub progress: f64,
    pub ttc: f64,
    pub comfort: f64,
}

impl Default for ScorerWeights {
    fn default() -> Self {
        ScorerWeights { progress: 5.0, ttc: 5.0, comfort: 2.0 }
    }
}

/// TTC threshold, seconds.
pub const TTC_BOUND_S: f64 = 0.95;

/// Comfort bounds shared by the scorer and the closed-loop scorecard.
pub const COMFORT_ACCEL: f64 = 2.4;
pub const COMFORT_JERK: f64 = 4.13;
pub const COMFORT_YAW_RATE: f64 = 0.95;
pub const COMFORT_YAW_ACCEL: f64 = 1.93;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidateScore {
    pub collision_free: bool,
    pub drivable: bool,
    pub progress: f64,
    pub ttc_ok: bool,
    pub comfort_ok: bool,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct Selection {
    pub index: usize,
    pub scores: Vec<CandidateScore>,
}

/// Does the rollout's comfort profile stay within bounds?
pub fn comfort_within_bounds(states: &[EgoState], v0: f64, yaw0: f64) -> bool {
    let mut prev_a: Option<f64> = None;
    let mut prev_yaw_rate: Option<f64> = None;
    let mut prev_v = v0;
    let mut prev_yaw = yaw0;
    for s in states {
        let a = (s.velocity - prev_v) / SIM_DT;
        let yaw_rate = wrap_angle(s.pose.yaw - prev_yaw) / SIM_DT;
        if a.abs() > COMFORT_ACCEL || yaw_rate.abs() > COMFORT_YAW_RATE {
            return false;
        }
        if let Some(pa) = prev_a {
            if ((a - pa) / SIM_DT).abs() > COMFORT_JERK {
                return false;
            }
        }
        if let Some(pr) = prev_yaw_rate {
            if ((yaw_rate - pr) / SIM_DT).abs() > COMFORT_YAW_ACCEL {
                return false;
            }
        }
        prev_a = Some(a);
        prev_yaw_rate = Some(yaw_rate);
        prev_v = s.velocity;
        prev_yaw = s.pose.yaw;
    }
    true
}

pub(crate) fn footprint_inside_drivable(b: &OrientedBox, map: &MapModel) -> bool {
    b.corners().iter().all(|c| map.is_drivable(*c)) && map.is_drivable(b.center.position())
}

/// A collision the candidate scorer holds against the ego: moving ego, or a
/// stopped ego struck in its front half.
fn scorer_at_fault(ego: &EgoState, agent_box: &OrientedBox) -> bool {
    if ego.velocity.abs() > 0.05 {
        return true;
    }
    agent_box.center.into_frame(&ego.pose).x > 0.0
}

/// Score every rollout and pick the winner. Sub-scores: at-fault collision and
/// drivable-area compliance as multipliers; progress (normalized over the
/// set), TTC-within-bound, and comfort averaged under `weights`. Ties keep the
/// earliest candidate, which by construction order implements the
/// model_raw-first tie-break. If every candidate scores zero, model_raw wins.
pub fn score_and_select(
    set: &CandidateSet,
    prediction: &[PredictedAgent],
    map: &MapModel,
    start: &EgoState,
    vp: &VehicleParams,
    weights: &ScorerWeights,
) -> Selection {
    // Raw progress per candidate: route-free arc length of the rollout.
    let raw_progress: Vec<f64> = set
        .candidates
        .iter()
        .map(|c| {
            let mut s = 0.0;
            let mut prev = start.pose.position();
            for st in &c.rollout {
                s += st.pose.position().dist(prev);
                prev = st.pose.position();
            }
            s
        })
        .collect();
    let max_progress = raw_progress.iter().cloned().fold(0.0f64, f64::max);

    let mut scores = Vec::with_capacity(set.candidates.len());
    for (ci, cand) in set.candidates.iter().enumerate() {
        let mut collision_free = true;
        let mut drivable = true;
        let mut ttc_ok = true;
        for (k, st) in cand.rollout.iter().enumerate() {
            let ego_box = OrientedBox::new(st.pose, vp.length, vp.width);
            if !footprint_inside_drivable(&ego_box, map) {
                drivable = false;
            }
            for agent in prediction {
                if let Some(ab) = agent.boxes.get(k) {
                    if ego_box.intersects(ab) && scorer_at_fault(st, ab) {
                        collision_free = false;
                    }
                }
            }
            // TTC: project both parties forward at constant velocity.
            if ttc_ok && collision_free {
                let dir = Vec2::new(st.pose.yaw.cos(), st.pose.yaw.sin());
                'tau: for i in 1..=9 {
                    let tau = i as f64 * 0.1;
                    if tau >= TTC_BOUND_S {
                        break;
                    }
                    let d = dir.scaled(st.velocity * tau);
                    let ego_proj = OrientedBox::new(
                        Pose2::new(st.pose.x + d.x, st.pose.y + d.y, st.pose.yaw),
                        vp.length,
                        vp.width,
                    );
                    for agent in prediction {
                        if let Some(ab) = agent.boxes.get(k) {
                            let adir = Vec2::new(ab.center.yaw.cos(), ab.center.yaw.sin());
                            let ad = adir.scaled(agent.speed * tau);
                            let agent_proj = OrientedBox::new(
                                Pose2::new(ab.center.x + ad.x, ab.center.y + ad.y, ab.center.yaw),
                                ab.length,
                                ab.width,
                            );
                            if ego_proj.intersects(&agent_proj) {
                                ttc_ok = false;
                                break 'tau;
                            }
                        }
                    }
                }
            }
        }
        let comfort_ok = comfort_within_bounds(&cand.rollout, start.velocity, start.pose.yaw);
        let progress = if max_progress > 0.1 { raw_progress[ci] / max_progress } else { 1.0 };
        let mult = if collision_free && drivable { 1.0 } else { 0.0 };
        let wsum = weights.progress + weights.ttc + weights.comfort;
        let avg = (weights.progress * progress
            + weights.ttc * if ttc_ok { 1.0 } else { 0.0 }
            + weights.comfort * if comfort_ok { 1.0 } else { 0.0 })
            / wsum;
        scores.push(CandidateScore { collision_free, drivable, progress, ttc_ok, comfort_ok, total: mult * avg });
    }
    let mut best = 0;
    for i in 1..scores.len() {
        if scores[i].total > scores[best].total {
            best = i;
        }
    }
    Selection { index: best, scores }
}
