//! Scenario data model: ego states, agent tracks, lane-level map, and the
//! 2 s-past / 8 s-future sample window, plus validation, frame transforms,
//! and window slicing from longer driving logs.

pub mod gen;
pub mod io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{OrientedBox, Polygon, Polyline, Pose2, Vec2};

/// Simulation step, seconds (10 Hz everywhere).
pub const SIM_DT: f64 = 0.1;
/// Past ego states per sample: 2 s at 10 Hz, inclusive of t = 0.
pub const HISTORY_LEN: usize = 21;
/// Future ego states per sample: 8 s at 10 Hz.
pub const FUTURE_LEN: usize = 80;
/// Steps in one full sample window (t = -2 s ..= +8 s).
pub const WINDOW_LEN: usize = HISTORY_LEN + FUTURE_LEN;

/// Ego kinematic state at one timestamp.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EgoState {
    pub pose: Pose2,
    /// Signed longitudinal speed, m/s.
    pub velocity: f64,
    pub acceleration: f64,
    pub steering: f64,
    pub timestamp: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Vehicle,
    PedestrianCrowd,
    Cyclist,
    StaticObject,
}

/// One tracked agent over the whole sample window (10 Hz, index 0 = t = -2 s).
#[derive(Debug, Clone, PartialEq)]
pub struct AgentTrack {
    pub id: String,
    pub kind: AgentKind,
    /// Footprint box dims; orientation follows the per-step pose.
    pub length: f64,
    pub width: f64,
    /// (pose, speed) per step.
    pub states: Vec<(Pose2, f64)>,
    pub valid_mask: Vec<bool>,
}

impl AgentTrack {
    /// Footprint box at a step, if the track is valid there.
    pub fn box_at(&self, step: usize) -> Option<OrientedBox> {
        if step < self.states.len() && self.valid_mask.get(step).copied().unwrap_or(false) {
            Some(OrientedBox::new(self.states[step].0, self.length, self.width))
        } else {
            None
        }
    }
}

/// One lane: centerline with boundaries and a speed limit.
#[derive(Debug, Clone)]
pub struct Lane {
    pub id: u32,
    pub centerline: Polyline,
    pub left_boundary: Polyline,
    pub right_boundary: Polyline,
    pub speed_limit: f64,
}

/// Lane-level map with drivable area and the ego route.
#[derive(Debug, Clone)]
pub struct MapModel {
    pub lanes: Vec<Lane>,
    pub drivable_area: Vec<Polygon>,
    pub route_lane_ids: Vec<u32>,
    pub crosswalks: Vec<Polygon>,
    /// Intersection interiors (may be empty); painted into a dedicated raster channel.
    pub intersections: Vec<Polygon>,
}

impl MapModel {
    pub fn lane(&self, id: u32) -> Option<&Lane> {
        self.lanes.iter().find(|l| l.id == id)
    }

    /// Concatenated centerline of the route lanes, in order.
    pub fn route_centerline(&self) -> Polyline {
        let mut pts: Vec<Vec2> = Vec::new();
        for id in &self.route_lane_ids {
            if let Some(lane) = self.lane(*id) {
                for &p in &lane.centerline.points {
                    if pts.last().map(|q| q.dist(p) > 1e-9).unwrap_or(true) {
                        pts.push(p);
                    }
                }
            }
        }
        Polyline::new(pts)
    }

    pub fn is_drivable(&self, p: Vec2) -> bool {
        self.drivable_area.iter().any(|poly| poly.contains(p))
    }

    /// Lane whose centerline is closest to `p`.
    pub fn nearest_lane(&self, p: Vec2) -> Option<&Lane> {
        self.lanes
            .iter()
            .map(|l| (l, l.centerline.project(p).1))
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .map(|(l, _)| l)
    }

    /// Speed limit of the route lane containing arc position `s` along the route.
    pub fn route_speed_limit_at(&self, s: f64) -> f64 {
        let mut acc = 0.0;
        for id in &self.route_lane_ids {
            if let Some(lane) = self.lane(*id) {
                acc += lane.centerline.length();
                if s <= acc {
                    return lane.speed_limit;
                }
            }
        }
        self.route_lane_ids
            .last()
            .and_then(|id| self.lane(*id))
            .map(|l| l.speed_limit)
            .unwrap_or(13.89)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Straight,
    Curve,
    Intersection,
    LeadVehicle,
    LaneBlockage,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 5] = [
        ScenarioKind::Straight,
        ScenarioKind::Curve,
        ScenarioKind::Intersection,
        ScenarioKind::LeadVehicle,
        ScenarioKind::LaneBlockage,
    ];
}

/// One training/evaluation sample: 2 s of history, 8 s of future.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub id: String,
    pub map: MapModel,
    /// 21 states, t = -2.0 ..= 0.0.
    pub ego_history: Vec<EgoState>,
    /// 80 states, t = 0.1 ..= 8.0.
    pub ego_future: Vec<EgoState>,
    pub agents: Vec<AgentTrack>,
    pub kind: ScenarioKind,
    pub seed: u64,
}

impl Scenario {
    /// Ego pose at t = 0.
    pub fn ego_now(&self) -> &EgoState {
        &self.ego_history[HISTORY_LEN - 1]
    }

    /// All 101 ego states, past through future.
    pub fn ego_window(&self) -> impl Iterator<Item = &EgoState> {
        self.ego_history.iter().chain(self.ego_future.iter())
    }

    /// Future poses as a trajectory (80 points).
    pub fn future_poses(&self) -> Vec<Pose2> {
        self.ego_future.iter().map(|s| s.pose).collect()
    }

    /// Agent-track step index for a window time (t = -2 s maps to 0).
    pub fn step_of_time(t: f64) -> usize {
        ((t + 2.0) / SIM_DT).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// A collection of scenarios with the generator settings that produced them.
#[derive(Debug, Clone)]
pub struct ScenarioSet {
    pub scenarios: Vec<Scenario>,
    pub split: Split,
    pub generator: GeneratorConfig,
}

/// Ego vehicle geometry and actuation limits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleParams {
    pub length: f64,
    pub width: f64,
    pub wheelbase: f64,
    pub max_steer: f64,
    pub a_min: f64,
    pub a_max: f64,
    pub steer_rate_max: f64,
    pub v_min: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        VehicleParams {
            length: 4.6,
            width: 1.85,
            wheelbase: 2.9,
            max_steer: 0.6,
            a_min: -4.0,
            a_max: 2.4,
            steer_rate_max: 0.5,
            v_min: -2.0,
        }
    }
}

/// Synthetic-scenario generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub lane_width: f64,
    pub speed_limits: Vec<f64>,
    pub vehicle: VehicleParams,
    /// Minimum ego path length over the window for a sample to count as moving.
    pub static_threshold_m: f64,
    /// Attempts at non-overlapping random agent placement before giving up.
    pub placement_retries: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            lane_width: 3.7,
            speed_limits: vec![8.33, 11.11, 13.89],
            vehicle: VehicleParams::default(),
            static_threshold_m: 0.5,
            placement_retries: 40,
        }
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("ego history has {0} states, expected {expected}", expected = HISTORY_LEN)]
    HistoryLength(usize),
    #[error("ego future has {0} states, expected {expected}", expected = FUTURE_LEN)]
    FutureLength(usize),
    #[error("timestamp off the 10 Hz grid at index {0}: {1}")]
    TimestampGrid(usize, f64),
    #[error("non-finite ego state at index {0}")]
    NonFinite(usize),
    #[error("steering {0} exceeds limit {1}")]
    SteeringLimit(f64, f64),
    #[error("ego is static: path length {0:.3} m over the window")]
    Static(f64),
    #[error("agent {0} track length {1}, expected {expected}", expected = WINDOW_LEN)]
    AgentLength(String, usize),
    #[error("agents {0} and {1} overlap at window start")]
    InitialOverlap(String, String),
    #[error("route lanes {0} and {1} are not connected")]
    RouteBroken(u32, u32),
    #[error("lane {0} centerline leaves the drivable area")]
    LaneOffDrivable(u32),
    #[error("ego future curvature {0:.4} exceeds limit {1:.4} at step {2}")]
    Curvature(f64, f64, usize),
    #[error("ego future acceleration {0:.3} exceeds limit {1:.3} at step {2}")]
    Acceleration(f64, f64, usize),
    #[error("could not place agents without overlap after {0} retries (seed {1})")]
    PlacementExhausted(usize, u64),
}

/// Full structural and dynamic-feasibility validation of one scenario.
pub fn validate_scenario(s: &Scenario, cfg: &GeneratorConfig) -> Result<(), ScenarioError> {
    if s.ego_history.len() != HISTORY_LEN {
        return Err(ScenarioError::HistoryLength(s.ego_history.len()));
    }
    if s.ego_future.len() != FUTURE_LEN {
        return Err(ScenarioError::FutureLength(s.ego_future.len()));
    }
    for (i, st) in s.ego_window().enumerate() {
        let expected = (i as f64 - (HISTORY_LEN - 1) as f64) * SIM_DT;
        if (st.timestamp - expected).abs() > 1e-4 {
            return Err(ScenarioError::TimestampGrid(i, st.timestamp));
        }
        if !st.pose.is_finite() || !st.velocity.is_finite() {
            return Err(ScenarioError::NonFinite(i));
        }
        if st.steering.abs() > cfg.vehicle.max_steer + 1e-6 {
            return Err(ScenarioError::SteeringLimit(st.steering, cfg.vehicle.max_steer));
        }
    }
    let path_len: f64 = {
        let poses: Vec<Pose2> = s.ego_window().map(|e| e.pose).collect();
        poses.windows(2).map(|w| w[0].position().dist(w[1].position())).sum()
    };
    if path_len <= cfg.static_threshold_m {
        return Err(ScenarioError::Static(path_len));
    }
    for a in &s.agents {
        if a.states.len() != WINDOW_LEN || a.valid_mask.len() != WINDOW_LEN {
            return Err(ScenarioError::AgentLength(a.id.clone(), a.states.len()));
        }
    }
    for i in 0..s.agents.len() {
        for j in i + 1..s.agents.len() {
            if let (Some(a), Some(b)) = (s.agents[i].box_at(0), s.agents[j].box_at(0)) {
                if a.intersects(&b) {
                    return Err(ScenarioError::InitialOverlap(
                        s.agents[i].id.clone(),
                        s.agents[j].id.clone(),
                    ));
                }
            }
        }
    }
    for w in s.map.route_lane_ids.windows(2) {
        let (a, b) = (s.map.lane(w[0]), s.map.lane(w[1]));
        match (a, b) {
            (Some(a), Some(b)) => {
                let end = *a.centerline.points.last().unwrap();
                let start = b.centerline.points[0];
                if end.dist(start) > 1e-3 {
                    return Err(ScenarioError::RouteBroken(w[0], w[1]));
                }
            }
            _ => return Err(ScenarioError::RouteBroken(w[0], w[1])),
        }
    }
    for lane in &s.map.lanes {
        let n = 8;
        for k in 0..=n {
            let p = lane.centerline.point_at(lane.centerline.length() * k as f64 / n as f64);
            if !s.map.is_drivable(p) {
                return Err(ScenarioError::LaneOffDrivable(lane.id));
            }
        }
    }
    // Dynamic feasibility of the expert future.
    let kappa_max = cfg.vehicle.max_steer.tan() / cfg.vehicle.wheelbase;
    let states: Vec<&EgoState> = s.ego_window().collect();
    for i in 1..states.len() {
        let ds = states[i].pose.position().dist(states[i - 1].pose.position());
        if ds > 0.05 {
            let dyaw = crate::geom::wrap_angle(states[i].pose.yaw - states[i - 1].pose.yaw);
            let kappa = (dyaw / ds).abs();
            if kappa > kappa_max * (1.0 + 1e-6) + 1e-9 {
                return Err(ScenarioError::Curvature(kappa, kappa_max, i));
            }
        }
        let accel = (states[i].velocity - states[i - 1].velocity) / SIM_DT;
        if accel.abs() > cfg.vehicle.a_max + 1e-6 {
            return Err(ScenarioError::Acceleration(accel, cfg.vehicle.a_max, i));
        }
    }
    Ok(())
}

fn polyline_into_frame(line: &Polyline, reference: &Pose2) -> Polyline {
    Polyline::new(line.points.iter().map(|p| p.into_frame(reference)).collect())
}

fn polygon_into_frame(poly: &Polygon, reference: &Pose2) -> Polygon {
    Polygon::new(poly.points.iter().map(|p| p.into_frame(reference)).collect())
}

/// Rigid-transform every pose and map element into the frame of `reference`.
pub fn to_ego_frame(s: &Scenario, reference: &Pose2) -> Scenario {
    let tf_ego = |e: &EgoState| EgoState {
        pose: e.pose.into_frame(reference),
        ..*e
    };
    Scenario {
        id: s.id.clone(),
        map: MapModel {
            lanes: s
                .map
                .lanes
                .iter()
                .map(|l| Lane {
                    id: l.id,
                    centerline: polyline_into_frame(&l.centerline, reference),
                    left_boundary: polyline_into_frame(&l.left_boundary, reference),
                    right_boundary: polyline_into_frame(&l.right_boundary, reference),
                    speed_limit: l.speed_limit,
                })
                .collect(),
            drivable_area: s.map.drivable_area.iter().map(|p| polygon_into_frame(p, reference)).collect(),
            route_lane_ids: s.map.route_lane_ids.clone(),
            crosswalks: s.map.crosswalks.iter().map(|p| polygon_into_frame(p, reference)).collect(),
            intersections: s.map.intersections.iter().map(|p| polygon_into_frame(p, reference)).collect(),
        },
        ego_history: s.ego_history.iter().map(tf_ego).collect(),
        ego_future: s.ego_future.iter().map(tf_ego).collect(),
        agents: s
            .agents
            .iter()
            .map(|a| AgentTrack {
                id: a.id.clone(),
                kind: a.kind,
                length: a.length,
                width: a.width,
                states: a
                    .states
                    .iter()
                    .map(|(p, v)| (p.into_frame(reference), *v))
                    .collect(),
                valid_mask: a.valid_mask.clone(),
            })
            .collect(),
        kind: s.kind,
        seed: s.seed,
    }
}

/// A driving log longer than one sample window; source for [`slice_samples`].
#[derive(Debug, Clone)]
pub struct DrivingLog {
    pub id: String,
    pub map: MapModel,
    /// 10 Hz ego states from log start.
    pub ego: Vec<EgoState>,
    /// Tracks aligned index-for-index with `ego`.
    pub agents: Vec<AgentTrack>,
    pub kind: ScenarioKind,
    pub seed: u64,
}

/// Cut overlapping 10 s windows from a log at the given stride, dropping
/// windows where the ego stays static.
pub fn slice_samples(log: &DrivingLog, stride_s: f64, cfg: &GeneratorConfig) -> Vec<Scenario> {
    assert!(stride_s > 0.0, "stride must be positive, got {stride_s}");
    let stride = (stride_s / SIM_DT).round().max(1.0) as usize;
    let mut out = Vec::new();
    if log.ego.len() < WINDOW_LEN {
        return out;
    }
    let mut start = 0;
    let mut widx = 0;
    while start + WINDOW_LEN <= log.ego.len() {
        let window = &log.ego[start..start + WINDOW_LEN];
        let path_len: f64 = window
            .windows(2)
            .map(|w| w[0].pose.position().dist(w[1].pose.position()))
            .sum();
        if path_len > cfg.static_threshold_m {
            let rebase = |(k, e): (usize, &EgoState)| EgoState {
                timestamp: (k as f64 - (HISTORY_LEN - 1) as f64) * SIM_DT,
                ..*e
            };
            let ego_history: Vec<EgoState> =
                window[..HISTORY_LEN].iter().enumerate().map(rebase).collect();
            let ego_future: Vec<EgoState> = window[HISTORY_LEN..]
                .iter()
                .enumerate()
                .map(|(k, e)| rebase((k + HISTORY_LEN, e)))
                .collect();
            let agents = log
                .agents
                .iter()
                .map(|a| AgentTrack {
                    id: a.id.clone(),
                    kind: a.kind,
                    length: a.length,
                    width: a.width,
                    states: a.states[start..start + WINDOW_LEN].to_vec(),
                    valid_mask: a.valid_mask[start..start + WINDOW_LEN].to_vec(),
                })
                .collect();
            out.push(Scenario {
                id: format!("{}-w{}", log.id, widx),
                map: log.map.clone(),
                ego_history,
                ego_future,
                agents,
                kind: log.kind,
                seed: log.seed,
            });
        }
        widx += 1;
        start += stride;
    }
    out
}
