//! Scoring: the closed-loop scorecard computed from simulation traces, the
//! open-loop trajectory metrics, and run-level aggregation with CSV/SVG
//! report emission.
//!
//! All scoring functions are pure: a persisted trace re-scores to exactly the
//! same numbers as the live run that produced it.

use std::collections::HashSet;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{comfort_within_bounds, footprint_inside_drivable, TTC_BOUND_S};
use crate::geom::{wrap_angle, OrientedBox, Pose2, Vec2};
use crate::plot::BarChart;
use crate::scenario::{Scenario, VehicleParams, FUTURE_LEN, SIM_DT};
use crate::sim::{AgentMode, SimTrace};

/// Weights of the averaged scorecard terms. The multiplier metrics
/// (collisions, drivable area, driving direction, making progress) are not
/// weighted; they scale the whole aggregate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricWeights {
    pub ttc: f64,
    pub progress: f64,
    pub speed: f64,
    pub comfort: f64,
}

impl Default for MetricWeights {
    fn default() -> Self {
        MetricWeights { ttc: 5.0, progress: 5.0, speed: 4.0, comfort: 2.0 }
    }
}

/// Cumulative against-flow travel beyond which the direction score drops to
/// 0.5, and then to 0.
pub const AGAINST_FLOW_HALF_M: f64 = 2.0;
pub const AGAINST_FLOW_ZERO_M: f64 = 6.0;

/// Route-progress ratio below which the run does not count as making progress.
pub const MAKING_PROGRESS_MIN: f64 = 0.2;

/// Overspeed normalization: the speed score reaches 0 when the ego averages
/// this much above the limit over the whole trace (≈ 5 mph).
pub const OVERSPEED_REF_MPS: f64 = 2.23;

/// An agent slower than this is treated as yielding/stopped when assigning
/// collision fault.
pub const YIELDING_SPEED_MPS: f64 = 0.5;

/// Ego speeds above this count as "moving" for collision fault.
pub const EGO_MOVING_MPS: f64 = 0.1;

/// Open-loop composite references: displacement scores fall linearly to 0 at
/// these errors, and a missed prediction zeroes the composite.
pub const OLS_ADE_REF_M: f64 = 8.0;
pub const OLS_FDE_REF_M: f64 = 8.0;
pub const OLS_HEADING_REF_RAD: f64 = 0.8;

/// Miss thresholds: displacement at {3 s, 5 s, 8 s} beyond {2 m, 4 m, 6 m}.
pub const MISS_HORIZONS: [(usize, f64); 3] = [(29, 2.0), (49, 4.0), (79, 6.0)];

/// One scenario's closed-loop scorecard. The first four fields multiply the
/// aggregate; the next four average under [`MetricWeights`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopScore {
    /// 1 no collision, 0.5 collision the ego is not at fault for, 0 at-fault.
    pub no_at_fault_collisions: f64,
    /// 1 iff the ego footprint stays inside the drivable area at every step.
    pub drivable_area: f64,
    /// 1, or 0.5 / 0 after > 2 m / > 6 m of travel against the lane direction.
    pub driving_direction: f64,
    /// 1 iff progress_along_route exceeds 0.2.
    pub making_progress: f64,
    /// 1 iff the projected time-to-collision stays above the bound throughout.
    pub ttc_within_bound: f64,
    /// 1 minus the normalized overspeed integral, in [0, 1].
    pub speed_limit: f64,
    /// Ego route arc-length over expert route arc-length, clipped to [0, 1].
    pub progress_along_route: f64,
    /// 1 iff accel/jerk/yaw-rate/yaw-accel all stay within the comfort bounds.
    pub comfort: f64,
    /// Product of multipliers times the weighted mean of the averaged terms.
    pub aggregate: f64,
}

impl ClosedLoopScore {
    /// Recompute the aggregate from the sub-scores under `w`.
    pub fn aggregate_under(&self, w: &MetricWeights) -> f64 {
        let mult = self.no_at_fault_collisions
            * self.drivable_area
            * self.driving_direction
            * self.making_progress;
        let wsum = w.ttc + w.progress + w.speed + w.comfort;
        let avg = (w.ttc * self.ttc_within_bound
            + w.progress * self.progress_along_route
            + w.speed * self.speed_limit
            + w.comfort * self.comfort)
            / wsum;
        mult * avg
    }
}

/// Open-loop trajectory metrics over an 8 s (80-point) horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpenLoopScore {
    /// Mean Euclidean displacement over all 80 points, meters.
    pub ade8: f64,
    /// Displacement at the final (8 s) point, meters.
    pub fde8: f64,
    /// 1 if any horizon displacement exceeds its miss threshold, else 0.
    pub miss_rate: f64,
    /// Composite in [0, 100]: mean of the ADE, FDE, and heading sub-scores
    /// (each falling linearly to 0 at its reference error), zeroed on a miss.
    pub ols: f64,
}

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("trace is for scenario {trace_id} (seed {trace_seed}), not {scenario_id} (seed {scenario_seed})")]
    ScenarioMismatch { trace_id: String, trace_seed: u64, scenario_id: String, scenario_seed: u64 },
    #[error("trace has no steps")]
    EmptyTrace,
    #[error("open-loop trajectories must both have {expected} points (predicted {predicted}, truth {truth})")]
    LengthMismatch { expected: usize, predicted: usize, truth: usize },
    #[error("no scores to aggregate")]
    EmptyRun,
    #[error("no scenario named {0} for one of the traces")]
    MissingScenario(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The forward half of the ego footprint, used to decide collision fault.
fn ego_front_zone(pose: &Pose2, vp: &VehicleParams) -> OrientedBox {
    let center = Pose2 {
        x: pose.x + pose.yaw.cos() * vp.length / 4.0,
        y: pose.y + pose.yaw.sin() * vp.length / 4.0,
        yaw: pose.yaw,
    };
    OrientedBox::new(center, vp.length / 2.0, vp.width)
}

/// Score one rollout against its scenario.
///
/// Collision fault is judged at the first contact with each agent: the ego is
/// at fault iff the agent overlaps the ego's front zone or the ego is moving
/// into a yielding (near-stopped) agent. TTC projects both parties at
/// constant velocity on the 0.1 s grid strictly below [`TTC_BOUND_S`], the
/// same rule the candidate scorer applies to planned rollouts.
pub fn score_closed_loop(
    trace: &SimTrace,
    scenario: &Scenario,
    weights: &MetricWeights,
) -> Result<ClosedLoopScore, MetricError> {
    if trace.scenario_id != scenario.id || trace.scenario_seed != scenario.seed {
        return Err(MetricError::ScenarioMismatch {
            trace_id: trace.scenario_id.clone(),
            trace_seed: trace.scenario_seed,
            scenario_id: scenario.id.clone(),
            scenario_seed: scenario.seed,
        });
    }
    if trace.ego.is_empty() {
        return Err(MetricError::EmptyTrace);
    }
    let vp = VehicleParams::default();
    let start = scenario.ego_now();
    let states = trace.ego_states();

    // Collisions, drivable area, and TTC in one pass over the steps.
    let mut fault = 1.0f64;
    let mut contacted: HashSet<&str> = HashSet::new();
    let mut drivable = 1.0f64;
    let mut ttc_ok = true;
    for (i, s) in states.iter().enumerate() {
        let ego_box = OrientedBox::new(s.pose, vp.length, vp.width);
        if drivable > 0.0 && !footprint_inside_drivable(&ego_box, &scenario.map) {
            drivable = 0.0;
        }
        let agents = &trace.agents[i];
        for a in agents {
            if contacted.contains(a.id.as_str()) {
                continue;
            }
            let abox = a.footprint();
            if ego_box.intersects(&abox) {
                contacted.insert(a.id.as_str());
                let at_fault = ego_front_zone(&s.pose, &vp).intersects(&abox)
                    || (s.velocity.abs() > EGO_MOVING_MPS && a.v.abs() < YIELDING_SPEED_MPS);
                fault = fault.min(if at_fault { 0.0 } else { 0.5 });
            }
        }
        if ttc_ok {
            let dir = Vec2::new(s.pose.yaw.cos(), s.pose.yaw.sin());
            'tau: for k in 1..=9 {
                let tau = k as f64 * SIM_DT;
                if tau >= TTC_BOUND_S {
                    break;
                }
                let d = dir.scaled(s.velocity * tau);
                let ego_proj = OrientedBox::new(
                    Pose2 { x: s.pose.x + d.x, y: s.pose.y + d.y, yaw: s.pose.yaw },
                    vp.length,
                    vp.width,
                );
                for a in agents {
                    let ad = Vec2::new(a.yaw.cos(), a.yaw.sin()).scaled(a.v * tau);
                    let aproj = OrientedBox::new(
                        Pose2 { x: a.x + ad.x, y: a.y + ad.y, yaw: a.yaw },
                        a.length,
                        a.width,
                    );
                    if ego_proj.intersects(&aproj) {
                        ttc_ok = false;
                        break 'tau;
                    }
                }
            }
        }
    }

    // Against-flow travel: motion opposing the nearest lane's direction.
    let mut against = 0.0;
    let mut prev = start.pose.position();
    for s in &states {
        let p = s.pose.position();
        let step = Vec2::new(p.x - prev.x, p.y - prev.y);
        let len = step.norm();
        if len > 1e-9 {
            if let Some(lane) = scenario.map.nearest_lane(p) {
                let (arc, _) = lane.centerline.project(p);
                let heading = lane.centerline.heading_at(arc);
                if step.dot(Vec2::new(heading.cos(), heading.sin())) < 0.0 {
                    against += len;
                }
            }
        }
        prev = p;
    }
    let driving_direction = if against > AGAINST_FLOW_ZERO_M {
        0.0
    } else if against > AGAINST_FLOW_HALF_M {
        0.5
    } else {
        1.0
    };

    // Overspeed integral against the nearest lane's limit, normalized so that
    // a constant OVERSPEED_REF_MPS violation over the whole trace scores 0.
    let mut overspeed = 0.0;
    for s in &states {
        let limit = scenario
            .map
            .nearest_lane(s.pose.position())
            .map(|l| l.speed_limit)
            .unwrap_or(13.89);
        overspeed += (s.velocity - limit).max(0.0) * SIM_DT;
    }
    let duration = states.len() as f64 * SIM_DT;
    let speed_limit = (1.0 - overspeed / (OVERSPEED_REF_MPS * duration)).clamp(0.0, 1.0);

    // Route progress relative to the expert, by arc-length stations.
    let route = scenario.map.route_centerline();
    let s0 = route.project(start.pose.position()).0;
    let ego_arc = (route.project(states.last().unwrap().pose.position()).0 - s0).max(0.0);
    let expert_end = scenario.ego_future.last().unwrap_or(start);
    let expert_arc = (route.project(expert_end.pose.position()).0 - s0).max(0.0);
    let progress_along_route =
        if expert_arc < 0.5 { 1.0 } else { (ego_arc / expert_arc).min(1.0) };
    let making_progress = if progress_along_route > MAKING_PROGRESS_MIN { 1.0 } else { 0.0 };

    let comfort =
        if comfort_within_bounds(&states, start.velocity, start.pose.yaw) { 1.0 } else { 0.0 };

    let mut score = ClosedLoopScore {
        no_at_fault_collisions: fault,
        drivable_area: drivable,
        driving_direction,
        making_progress,
        ttc_within_bound: if ttc_ok { 1.0 } else { 0.0 },
        speed_limit,
        progress_along_route,
        comfort,
        aggregate: 0.0,
    };
    score.aggregate = score.aggregate_under(weights);
    Ok(score)
}

/// Score a predicted trajectory against the ground truth (80 points each).
pub fn score_open_loop(predicted: &[Pose2], truth: &[Pose2]) -> Result<OpenLoopScore, MetricError> {
    if predicted.len() != FUTURE_LEN || truth.len() != FUTURE_LEN {
        return Err(MetricError::LengthMismatch {
            expected: FUTURE_LEN,
            predicted: predicted.len(),
            truth: truth.len(),
        });
    }
    let disp: Vec<f64> =
        predicted.iter().zip(truth).map(|(p, t)| p.position().dist(t.position())).collect();
    let ade8 = disp.iter().sum::<f64>() / disp.len() as f64;
    let fde8 = *disp.last().unwrap();
    let miss = MISS_HORIZONS.iter().any(|&(idx, bound)| disp[idx] > bound);
    let heading_err = predicted
        .iter()
        .zip(truth)
        .map(|(p, t)| wrap_angle(p.yaw - t.yaw).abs())
        .sum::<f64>()
        / disp.len() as f64;

    let ade_score = (1.0 - ade8 / OLS_ADE_REF_M).max(0.0);
    let fde_score = (1.0 - fde8 / OLS_FDE_REF_M).max(0.0);
    let heading_score = (1.0 - heading_err / OLS_HEADING_REF_RAD).max(0.0);
    let miss_rate = if miss { 1.0 } else { 0.0 };
    let ols = 100.0 * (ade_score + fde_score + heading_score) / 3.0 * (1.0 - miss_rate);
    Ok(OpenLoopScore { ade8, fde8, miss_rate, ols })
}

/// One row of the per-scenario report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioScoreRow {
    pub scenario_id: String,
    pub agent_mode: AgentMode,
    pub failed: bool,
    pub score: ClosedLoopScore,
}

/// Per-agent-mode summary of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub agent_mode: AgentMode,
    pub scenarios: usize,
    pub failures: usize,
    /// Mean aggregate on the 0–100 scale.
    pub score_x100: f64,
    /// Per-metric means (the `aggregate` field is the mean aggregate in [0,1]).
    pub means: ClosedLoopScore,
}

/// Score a batch of traces against their scenarios, matched by scenario id.
pub fn score_traces(
    traces: &[SimTrace],
    scenarios: &[Scenario],
    weights: &MetricWeights,
) -> Result<Vec<ScenarioScoreRow>, MetricError> {
    traces
        .iter()
        .map(|t| {
            let sc = scenarios
                .iter()
                .find(|s| s.id == t.scenario_id)
                .ok_or_else(|| MetricError::MissingScenario(t.scenario_id.clone()))?;
            let score = score_closed_loop(t, sc, weights)?;
            Ok(ScenarioScoreRow {
                scenario_id: t.scenario_id.clone(),
                agent_mode: t.agent_mode,
                failed: t.failure.is_some(),
                score,
            })
        })
        .collect()
}

/// Summarize per-scenario rows into one [`RunSummary`] per agent mode,
/// non-reactive first, reactive second.
pub fn aggregate_run(rows: &[ScenarioScoreRow]) -> Result<Vec<RunSummary>, MetricError> {
    if rows.is_empty() {
        return Err(MetricError::EmptyRun);
    }
    let mut out = Vec::new();
    for mode in [AgentMode::NonReactive, AgentMode::Reactive] {
        let group: Vec<&ScenarioScoreRow> = rows.iter().filter(|r| r.agent_mode == mode).collect();
        if group.is_empty() {
            continue;
        }
        let n = group.len() as f64;
        let mean = |f: fn(&ClosedLoopScore) -> f64| group.iter().map(|r| f(&r.score)).sum::<f64>() / n;
        let means = ClosedLoopScore {
            no_at_fault_collisions: mean(|s| s.no_at_fault_collisions),
            drivable_area: mean(|s| s.drivable_area),
            driving_direction: mean(|s| s.driving_direction),
            making_progress: mean(|s| s.making_progress),
            ttc_within_bound: mean(|s| s.ttc_within_bound),
            speed_limit: mean(|s| s.speed_limit),
            progress_along_route: mean(|s| s.progress_along_route),
            comfort: mean(|s| s.comfort),
            aggregate: mean(|s| s.aggregate),
        };
        out.push(RunSummary {
            agent_mode: mode,
            scenarios: group.len(),
            failures: group.iter().filter(|r| r.failed).count(),
            score_x100: means.aggregate * 100.0,
            means,
        });
    }
    Ok(out)
}

const METRIC_COLUMNS: [&str; 9] = [
    "no_at_fault_collisions",
    "drivable_area",
    "driving_direction",
    "making_progress",
    "ttc_within_bound",
    "speed_limit",
    "progress_along_route",
    "comfort",
    "aggregate",
];

fn metric_values(s: &ClosedLoopScore) -> [f64; 9] {
    [
        s.no_at_fault_collisions,
        s.drivable_area,
        s.driving_direction,
        s.making_progress,
        s.ttc_within_bound,
        s.speed_limit,
        s.progress_along_route,
        s.comfort,
        s.aggregate,
    ]
}

fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn mode_name(m: AgentMode) -> &'static str {
    match m {
        AgentMode::NonReactive => "non_reactive",
        AgentMode::Reactive => "reactive",
    }
}

/// Write text to `path` atomically (temp file in the same directory + rename).
pub(crate) fn write_atomic(path: &Path, content: &str) -> std::io::Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(content.as_bytes())?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Per-scenario report: one row per trace, one column per metric.
pub fn write_report_csv(path: &Path, rows: &[ScenarioScoreRow]) -> Result<(), MetricError> {
    let mut out = String::from("scenario_id,agent_mode,failed");
    for c in METRIC_COLUMNS {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{}",
            csv_field(&r.scenario_id),
            mode_name(r.agent_mode),
            r.failed
        ));
        for v in metric_values(&r.score) {
            out.push_str(&format!(",{:.6}", v));
        }
        out.push('\n');
    }
    write_atomic(path, &out)?;
    Ok(())
}

/// Run summary: one row per agent mode.
pub fn write_summary_csv(path: &Path, summaries: &[RunSummary]) -> Result<(), MetricError> {
    let mut out = String::from("agent_mode,scenarios,failures,score_x100");
    for c in METRIC_COLUMNS {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for s in summaries {
        out.push_str(&format!(
            "{},{},{},{:.4}",
            mode_name(s.agent_mode),
            s.scenarios,
            s.failures,
            s.score_x100
        ));
        for v in metric_values(&s.means) {
            out.push_str(&format!(",{:.6}", v));
        }
        out.push('\n');
    }
    write_atomic(path, &out)?;
    Ok(())
}

/// One bar chart per metric (mean per agent mode), written as
/// `metric_<name>.svg` under `dir`. Returns the written paths.
pub fn write_metric_plots(dir: &Path, summaries: &[RunSummary]) -> Result<Vec<PathBuf>, MetricError> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (mi, metric) in METRIC_COLUMNS.iter().enumerate() {
        let chart = BarChart {
            title: format!("mean {}", metric),
            y_label: "mean score".into(),
            labels: summaries.iter().map(|s| mode_name(s.agent_mode).to_string()).collect(),
            series: vec![(
                (*metric).to_string(),
                summaries.iter().map(|s| metric_values(&s.means)[mi]).collect(),
            )],
            y_max: Some(1.0),
        };
        let path = dir.join(format!("metric_{}.svg", metric));
        write_atomic(&path, &chart.to_svg())?;
        written.push(path);
    }
    Ok(written)
}
