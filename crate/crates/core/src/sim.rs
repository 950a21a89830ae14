//! Closed-loop simulation: a fixed-rate replanning loop in which the ego
//! tracks its latest plan with LQR while background traffic replays or reacts,
//! observations are rebuilt from the drifted world every replan tick, and the
//! full rollout is persisted as a compressed JSON-lines trace.
//!
//! Within one batch every scenario advances in lockstep so all planner
//! invocations for a tick share a single batched model forward. Every tensor
//! op in that path is row-local, so regrouping scenarios across batches does
//! not change any trace. Distinct batches are independent; `run_batch` hands
//! them to worker threads, each of which recompiles the model from a plain
//! buffer snapshot (tensor graphs are pinned to one thread).

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{
    build_candidates, predict_constant_velocity, score_and_select, trajectory_from_local_poses,
    LqrConfig, LqrTracker, ScorerWeights, TrajPoint, Trajectory, DEFAULT_FRACTIONS,
    DEFAULT_OFFSETS,
};
use crate::geom::{OrientedBox, Polyline, Pose2};
use crate::model::infer::{CompiledModel, ModelSnapshot, SampleMode};
use crate::model::seq::{featurize_context, ContextFeatures};
use crate::raster::RasterConfig;
use crate::scenario::{
    AgentKind, AgentTrack, EgoState, Scenario, VehicleParams, FUTURE_LEN, HISTORY_LEN, SIM_DT,
};
use crate::traffic::{idm_accel, IdmParams, TrafficSim};
use crate::vocab::ProposalVocabulary;

/// How background agents behave during the rollout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentMode {
    /// Agents replay their recorded states regardless of the ego.
    NonReactive,
    /// Recorded vehicles follow IDM along their logged paths and yield to
    /// whatever is ahead of them, including the ego.
    Reactive,
}

/// Which planner drives the ego.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlannerKind {
    /// Track the recorded expert future.
    LogReplay,
    /// Follow the route centerline under IDM against the nearest leader.
    IdmBaseline,
    /// Track the model's generated trajectory directly.
    Str2Raw,
    /// Model trajectory plus the candidate sampler and rule-based scorer.
    Str2,
}

impl PlannerKind {
    pub fn needs_model(self) -> bool {
        matches!(self, PlannerKind::Str2Raw | PlannerKind::Str2)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    /// Rollout length in seconds.
    pub duration_s: f64,
    /// Replanning period in seconds; must be a whole number of 0.1 s ticks.
    pub replan_period_s: f64,
    pub agent_mode: AgentMode,
    pub planner: PlannerKind,
    /// Scenarios simulated in lockstep per worker (and per batched forward).
    pub batch_size: usize,
    pub seed: u64,
}

impl SimConfig {
    pub fn new(planner: PlannerKind, agent_mode: AgentMode) -> Self {
        SimConfig {
            duration_s: 8.0,
            replan_period_s: 0.5,
            agent_mode,
            planner,
            batch_size: 50,
            seed: 0,
        }
    }

    /// Number of 0.1 s propagation steps.
    pub fn steps(&self) -> usize {
        (self.duration_s / SIM_DT).round() as usize
    }

    /// Sim steps between replans.
    pub fn replan_every(&self) -> usize {
        (self.replan_period_s / SIM_DT).round() as usize
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let ticks = self.replan_period_s / SIM_DT;
        if ticks < 1.0 - 1e-9 || (ticks - ticks.round()).abs() > 1e-9 {
            return Err(SimError::Config(format!(
                "replan period {} s is not a whole number of {} s ticks",
                self.replan_period_s, SIM_DT
            )));
        }
        if self.duration_s <= 0.0 || self.steps() > FUTURE_LEN {
            return Err(SimError::Config(format!(
                "duration {} s must be in (0, {}] s",
                self.duration_s,
                FUTURE_LEN as f64 * SIM_DT
            )));
        }
        if self.batch_size == 0 {
            return Err(SimError::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid sim config: {0}")]
    Config(String),
    #[error("no scenarios to simulate")]
    EmptySet,
    #[error("planner {0:?} needs model assets")]
    MissingModel(PlannerKind),
    #[error("trace io: {0}")]
    Io(#[from] std::io::Error),
    #[error("trace json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("trace file {path} is malformed: {why}")]
    Malformed { path: PathBuf, why: String },
}

/// Model, proposal vocabulary, and raster settings for one worker thread.
pub struct ModelBundle<'a> {
    pub model: &'a CompiledModel,
    pub vocab: &'a ProposalVocabulary,
    pub raster: &'a RasterConfig,
}

/// Thread-portable planner assets: workers clone the snapshot and recompile
/// locally, which reproduces the source model bit for bit.
pub struct ModelAssets {
    pub snapshot: ModelSnapshot,
    pub vocab: ProposalVocabulary,
    pub raster: RasterConfig,
}

impl ModelAssets {
    pub fn new(model: &CompiledModel, vocab: ProposalVocabulary, raster: RasterConfig) -> Self {
        ModelAssets { snapshot: model.snapshot(), vocab, raster }
    }
}

/// Ego state at the end of one sim step; timestamps are implied by position
/// in the trace (step `i` is at t = (i + 1) * 0.1 s).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoRec {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub v: f64,
    pub a: f64,
    pub steer: f64,
}

impl EgoRec {
    fn from_state(s: &EgoState) -> Self {
        EgoRec {
            x: s.pose.x,
            y: s.pose.y,
            yaw: s.pose.yaw,
            v: s.velocity,
            a: s.acceleration,
            steer: s.steering,
        }
    }

    pub fn to_state(&self, timestamp: f64) -> EgoState {
        EgoState {
            // Struct literal on purpose: the yaw was wrapped when recorded and
            // must not be re-wrapped on load.
            pose: Pose2 { x: self.x, y: self.y, yaw: self.yaw },
            velocity: self.v,
            acceleration: self.a,
            steering: self.steer,
            timestamp,
        }
    }
}

/// One background agent at the end of one sim step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentObs {
    pub id: String,
    pub kind: AgentKind,
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub v: f64,
    pub length: f64,
    pub width: f64,
}

impl AgentObs {
    pub fn footprint(&self) -> OrientedBox {
        OrientedBox::new(Pose2 { x: self.x, y: self.y, yaw: self.yaw }, self.length, self.width)
    }
}

/// A plan point in world frame; times are implied by index (0.1 s spacing
/// starting one tick after the replan step).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanRec {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub v: f64,
}

/// What the planner chose at one replan tick, with a digest of the scored
/// candidate set (empty totals for single-candidate planners).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplanRecord {
    /// Sim step (0-based) at whose start the plan was made.
    pub at_step: usize,
    pub trajectory: Vec<PlanRec>,
    pub candidate_totals: Vec<f64>,
    pub winner_index: usize,
}

/// Complete record of one scenario rollout; along with the scenario itself
/// this is sufficient to recompute every closed-loop metric offline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTrace {
    pub scenario_id: String,
    pub scenario_seed: u64,
    pub planner: PlannerKind,
    pub agent_mode: AgentMode,
    pub seed: u64,
    /// One entry per sim step, t = 0.1 s .. duration.
    pub ego: Vec<EgoRec>,
    /// Background agents per sim step, same indexing as `ego`.
    pub agents: Vec<Vec<AgentObs>>,
    pub replans: Vec<ReplanRecord>,
    /// Why the planner gave up, if it did; the ego freezes from that step on.
    pub failure: Option<String>,
    /// Wall-clock time of the lockstep batch this scenario ran in, shared by
    /// every trace from that batch. Excluded from outcome comparisons.
    pub wall_ms: f64,
}

impl SimTrace {
    /// Ego states with reconstructed timestamps.
    pub fn ego_states(&self) -> Vec<EgoState> {
        self.ego
            .iter()
            .enumerate()
            .map(|(i, r)| r.to_state((i + 1) as f64 * SIM_DT))
            .collect()
    }

    /// Equality of everything the rollout determines (ignores wall time).
    pub fn same_outcome(&self, other: &SimTrace) -> bool {
        self.scenario_id == other.scenario_id
            && self.scenario_seed == other.scenario_seed
            && self.planner == other.planner
            && self.agent_mode == other.agent_mode
            && self.seed == other.seed
            && self.ego == other.ego
            && self.agents == other.agents
            && self.replans == other.replans
            && self.failure == other.failure
    }
}

/// Live state for one scenario inside a lockstep batch.
struct ScenarioSim<'a> {
    scenario: &'a Scenario,
    vp: VehicleParams,
    lqr_cfg: LqrConfig,
    route: Polyline,
    traffic: TrafficSim,
    ego: EgoState,
    /// Rolling observation window fed to the rasterizer: ego history and
    /// agent tracks always end at the current (drifted) world state.
    obs: Scenario,
    plan: Trajectory,
    plan_anchor: TrajPoint,
    plan_step: usize,
    tracker: LqrTracker,
    ego_rows: Vec<EgoRec>,
    agent_rows: Vec<Vec<AgentObs>>,
    replans: Vec<ReplanRecord>,
    failure: Option<String>,
}

impl<'a> ScenarioSim<'a> {
    fn new(scenario: &'a Scenario, cfg: &SimConfig) -> Self {
        let vp = VehicleParams::default();
        let lqr_cfg = LqrConfig::default();
        let traffic = TrafficSim::new(scenario, cfg.agent_mode == AgentMode::Reactive);
        let ego = *scenario.ego_now();

        // Seed the observation window with the recorded history; index
        // HISTORY_LEN - 1 is overwritten with the traffic sim's own t = 0
        // states (reactive agents snap onto their paths at setup).
        let mut agents: Vec<AgentTrack> = scenario
            .agents
            .iter()
            .map(|t| AgentTrack {
                id: t.id.clone(),
                kind: t.kind,
                length: t.length,
                width: t.width,
                states: t.states[..HISTORY_LEN].to_vec(),
                valid_mask: t.valid_mask[..HISTORY_LEN].to_vec(),
            })
            .collect();
        for (track, live) in agents.iter_mut().zip(&traffic.agents) {
            track.states[HISTORY_LEN - 1] = (live.pose, live.v);
            track.valid_mask[HISTORY_LEN - 1] = true;
        }
        let obs = Scenario {
            id: scenario.id.clone(),
            map: scenario.map.clone(),
            ego_history: scenario.ego_history.clone(),
            ego_future: Vec::new(),
            agents,
            kind: scenario.kind,
            seed: scenario.seed,
        };

        let tracker = LqrTracker::new(&vp, &lqr_cfg).expect("default LQR config converges");
        let plan_anchor = TrajPoint { pose: ego.pose, v: ego.velocity, t: ego.timestamp };
        ScenarioSim {
            scenario,
            vp,
            lqr_cfg,
            route: scenario.map.route_centerline(),
            traffic,
            ego,
            obs,
            plan: Vec::new(),
            plan_anchor,
            plan_step: 0,
            tracker,
            ego_rows: Vec::new(),
            agent_rows: Vec::new(),
            replans: Vec::new(),
            failure: None,
        }
    }

    fn fail(&mut self, cause: String) {
        if self.failure.is_none() {
            self.failure = Some(cause);
        }
    }

    fn adopt_plan(&mut self, step: usize, plan: Trajectory, totals: Vec<f64>, winner: usize) {
        self.replans.push(ReplanRecord {
            at_step: step,
            trajectory: plan
                .iter()
                .map(|p| PlanRec { x: p.pose.x, y: p.pose.y, yaw: p.pose.yaw, v: p.v })
                .collect(),
            candidate_totals: totals,
            winner_index: winner,
        });
        self.plan = plan;
        self.plan_anchor =
            TrajPoint { pose: self.ego.pose, v: self.ego.velocity, t: self.ego.timestamp };
        self.plan_step = step;
    }

    /// Replan for the planners that need no model forward.
    fn replan_rule_based(&mut self, step: usize, planner: PlannerKind) {
        match planner {
            PlannerKind::LogReplay => {
                let plan: Trajectory = self.scenario.ego_future[step..]
                    .iter()
                    .enumerate()
                    .map(|(i, st)| TrajPoint {
                        pose: st.pose,
                        v: st.velocity,
                        t: (i + 1) as f64 * SIM_DT,
                    })
                    .collect();
                if plan.is_empty() {
                    self.fail(format!("log replay has no future beyond step {step}"));
                    return;
                }
                self.adopt_plan(step, plan, Vec::new(), 0);
            }
            PlannerKind::IdmBaseline => {
                let plan = self.idm_plan();
                self.adopt_plan(step, plan, Vec::new(), 0);
            }
            PlannerKind::Str2Raw | PlannerKind::Str2 => unreachable!("model planners are batched"),
        }
    }

    /// Roll IDM along the route centerline against the nearest snapshot
    /// leader (assumed to continue at constant speed).
    fn idm_plan(&self) -> Trajectory {
        let (s0, _) = self.route.project(self.ego.pose.position());
        let mut leader: Option<(f64, f64, f64)> = None; // (station, speed, half length)
        for (_, bx, v) in self.traffic.snapshot() {
            let (s_a, d) = self.route.project(bx.center.position());
            if d > 2.5 || s_a <= s0 {
                continue;
            }
            if leader.map(|(ls, _, _)| s_a < ls).unwrap_or(true) {
                leader = Some((s_a, v, bx.length / 2.0));
            }
        }
        let mut s = s0;
        let mut v = self.ego.velocity;
        let mut plan = Vec::with_capacity(FUTURE_LEN);
        for k in 1..=FUTURE_LEN {
            let limit = self.scenario.map.route_speed_limit_at(s).max(0.1);
            let idm = IdmParams::with_target_speed(limit);
            let gap = leader
                .map(|(ls, lv, hl)| (ls - s - hl - self.vp.length / 2.0, lv));
            let a = idm_accel(&idm, v, gap);
            v = (v + a * SIM_DT).max(0.0);
            s += v * SIM_DT;
            if let Some((ls, lv, _)) = leader.as_mut() {
                *ls += *lv * SIM_DT;
            }
            let p = self.route.point_at(s);
            plan.push(TrajPoint {
                pose: Pose2::new(p.x, p.y, self.route.heading_at(s)),
                v,
                t: k as f64 * SIM_DT,
            });
        }
        plan
    }

    /// Turn a generated plan into the tracked trajectory, optionally through
    /// the candidate sampler and scorer.
    fn adopt_model_plan(
        &mut self,
        step: usize,
        states: &[[f64; 3]],
        planner: PlannerKind,
    ) {
        if states.iter().any(|s| s.iter().any(|v| !v.is_finite())) {
            self.fail("model produced a non-finite state".into());
            return;
        }
        let local: Vec<Pose2> =
            states.iter().map(|s| Pose2::new(s[0], s[1], s[2])).collect();
        let model_traj = trajectory_from_local_poses(&local, &self.ego.pose);
        match planner {
            PlannerKind::Str2Raw => self.adopt_plan(step, model_traj, Vec::new(), 0),
            PlannerKind::Str2 => {
                let (s0, _) = self.route.project(self.ego.pose.position());
                let speed_limit = self.scenario.map.route_speed_limit_at(s0);
                let set = match build_candidates(
                    &model_traj,
                    &self.route,
                    speed_limit,
                    &self.ego,
                    &self.vp,
                    &self.lqr_cfg,
                    &DEFAULT_OFFSETS,
                    &DEFAULT_FRACTIONS,
                ) {
                    Ok(set) => set,
                    Err(e) => {
                        self.fail(format!("candidate sampling: {e}"));
                        return;
                    }
                };
                let prediction =
                    predict_constant_velocity(&self.traffic.snapshot(), FUTURE_LEN, SIM_DT);
                let sel = score_and_select(
                    &set,
                    &prediction,
                    &self.scenario.map,
                    &self.ego,
                    &self.vp,
                    &ScorerWeights::default(),
                );
                let totals = sel.scores.iter().map(|s| s.total).collect();
                let plan = set.candidates[sel.index].trajectory.clone();
                self.adopt_plan(step, plan, totals, sel.index);
            }
            _ => unreachable!("rule-based planners never reach the model path"),
        }
    }

    /// Advance one 0.1 s tick: agents first (reacting to the ego's tick-start
    /// pose), then the ego along its current plan.
    fn advance(&mut self, step: usize) {
        let ego_box = OrientedBox::new(self.ego.pose, self.vp.length, self.vp.width);
        self.traffic.step(step + 1, Some((&ego_box, self.ego.velocity)));

        if self.failure.is_none() {
            let k = step - self.plan_step;
            let last = self.plan.len() - 1;
            let ref_now =
                if k == 0 { self.plan_anchor } else { self.plan[(k - 1).min(last)] };
            let ref_next = self.plan[k.min(last)];
            match self.tracker.step(&self.ego, &ref_now, &ref_next) {
                Ok(next) => self.ego = next,
                Err(e) => self.fail(format!("tracking: {e}")),
            }
        }
        if self.failure.is_some() {
            // Failed scenarios freeze in place; the trace keeps full length so
            // downstream scoring sees a stationary ego, not missing data.
            self.ego.velocity = 0.0;
            self.ego.acceleration = 0.0;
            self.ego.timestamp += SIM_DT;
        }

        self.ego_rows.push(EgoRec::from_state(&self.ego));
        self.agent_rows.push(
            self.traffic
                .agents
                .iter()
                .map(|a| AgentObs {
                    id: a.id.clone(),
                    kind: a.kind,
                    x: a.pose.x,
                    y: a.pose.y,
                    yaw: a.pose.yaw,
                    v: a.v,
                    length: a.length,
                    width: a.width,
                })
                .collect(),
        );

        // Slide the observation window onto the new world state.
        self.obs.ego_history.remove(0);
        self.obs.ego_history.push(self.ego);
        for (track, live) in self.obs.agents.iter_mut().zip(&self.traffic.agents) {
            track.states.remove(0);
            track.states.push((live.pose, live.v));
            track.valid_mask.remove(0);
            track.valid_mask.push(true);
        }
    }

    fn into_trace(self, cfg: &SimConfig) -> SimTrace {
        SimTrace {
            scenario_id: self.scenario.id.clone(),
            scenario_seed: self.scenario.seed,
            planner: cfg.planner,
            agent_mode: cfg.agent_mode,
            seed: cfg.seed,
            ego: self.ego_rows,
            agents: self.agent_rows,
            replans: self.replans,
            failure: self.failure,
            wall_ms: 0.0,
        }
    }
}

/// Simulate one batch of scenarios in lockstep. Model planner invocations
/// for each replan tick are fused into a single batched forward.
fn run_lockstep(
    scenarios: &[&Scenario],
    cfg: &SimConfig,
    bundle: Option<&ModelBundle>,
) -> Vec<SimTrace> {
    let started = Instant::now();
    let mut sims: Vec<ScenarioSim> = scenarios.iter().map(|s| ScenarioSim::new(s, cfg)).collect();
    let steps = cfg.steps();
    let every = cfg.replan_every();

    for step in 0..steps {
        if step % every == 0 {
            if cfg.planner.needs_model() {
                let bundle = bundle.expect("checked by run entry points");
                let mut idxs = Vec::new();
                let mut ctxs: Vec<ContextFeatures> = Vec::new();
                for (i, sim) in sims.iter_mut().enumerate() {
                    if sim.failure.is_some() {
                        continue;
                    }
                    match featurize_context(&sim.obs, bundle.raster, &bundle.model.cfg) {
                        Ok(ctx) => {
                            idxs.push(i);
                            ctxs.push(ctx);
                        }
                        Err(e) => sim.fail(format!("featurize: {e}")),
                    }
                }
                if !ctxs.is_empty() {
                    let modes = vec![SampleMode::Argmax; ctxs.len()];
                    match bundle.model.generate_batch(&ctxs, bundle.vocab, &modes) {
                        Ok(plans) => {
                            for (&i, plan) in idxs.iter().zip(&plans) {
                                sims[i].adopt_model_plan(step, &plan.states, cfg.planner);
                            }
                        }
                        Err(e) => {
                            for &i in &idxs {
                                sims[i].fail(format!("generation: {e}"));
                            }
                        }
                    }
                }
            } else {
                for sim in sims.iter_mut() {
                    if sim.failure.is_none() {
                        sim.replan_rule_based(step, cfg.planner);
                    }
                }
            }
        }
        for sim in sims.iter_mut() {
            sim.advance(step);
        }
    }

    let wall_ms = started.elapsed().as_secs_f64() * 1e3;
    sims.into_iter()
        .map(|s| {
            let mut t = s.into_trace(cfg);
            t.wall_ms = wall_ms;
            t
        })
        .collect()
}

/// Simulate a single scenario.
pub fn run_scenario(
    scenario: &Scenario,
    cfg: &SimConfig,
    bundle: Option<&ModelBundle>,
) -> Result<SimTrace, SimError> {
    cfg.validate()?;
    if cfg.planner.needs_model() && bundle.is_none() {
        return Err(SimError::MissingModel(cfg.planner));
    }
    Ok(run_lockstep(&[scenario], cfg, bundle).pop().expect("one trace per scenario"))
}

/// Simulate a scenario set: scenarios are grouped into lockstep batches of
/// `cfg.batch_size` in order, and batches are distributed over `workers`
/// threads. Results are ordered like the input and do not depend on the
/// worker count or on how scenarios fall into batches.
pub fn run_batch(
    scenarios: &[Scenario],
    cfg: &SimConfig,
    assets: Option<&ModelAssets>,
    workers: usize,
) -> Result<Vec<SimTrace>, SimError> {
    cfg.validate()?;
    if scenarios.is_empty() {
        return Err(SimError::EmptySet);
    }
    if cfg.planner.needs_model() && assets.is_none() {
        return Err(SimError::MissingModel(cfg.planner));
    }
    let chunks: Vec<&[Scenario]> = scenarios.chunks(cfg.batch_size).collect();
    let workers = workers.max(1).min(chunks.len());
    let results: Mutex<Vec<Option<Vec<SimTrace>>>> = Mutex::new(vec![None; chunks.len()]);
    let next = AtomicUsize::new(0);

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| {
                let compiled = assets.map(|a| a.snapshot.compile());
                let bundle = assets.map(|a| ModelBundle {
                    model: compiled.as_ref().expect("compiled alongside assets"),
                    vocab: &a.vocab,
                    raster: &a.raster,
                });
                loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= chunks.len() {
                        break;
                    }
                    let refs: Vec<&Scenario> = chunks[i].iter().collect();
                    let traces = run_lockstep(&refs, cfg, bundle.as_ref());
                    results.lock().expect("no panics while holding the lock")[i] = Some(traces);
                }
            });
        }
    });

    Ok(results
        .into_inner()
        .expect("all workers joined")
        .into_iter()
        .flat_map(|c| c.expect("every chunk was claimed"))
        .collect())
}

#[derive(Serialize, Deserialize)]
struct TraceHeader {
    scenario_id: String,
    scenario_seed: u64,
    planner: PlannerKind,
    agent_mode: AgentMode,
    seed: u64,
    failure: Option<String>,
    wall_ms: f64,
}

#[derive(Serialize, Deserialize)]
struct StepRec {
    step: usize,
    ego: EgoRec,
    agents: Vec<AgentObs>,
}

/// One line of the persisted trace file.
#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum TraceLine {
    Header(TraceHeader),
    Step(StepRec),
    Replan(ReplanRecord),
}

/// Write one scenario trace as gzipped JSON lines under `dir`, atomically
/// (temp file + rename). Returns the final path.
pub fn save_trace(dir: &Path, trace: &SimTrace) -> Result<PathBuf, SimError> {
    fs::create_dir_all(dir)?;
    let path = dir.join(format!("{}.jsonl.gz", trace.scenario_id));
    let tmp = dir.join(format!("{}.jsonl.gz.tmp", trace.scenario_id));
    {
        let file = BufWriter::new(File::create(&tmp)?);
        let mut gz = GzEncoder::new(file, Compression::default());
        let mut write_line = |line: &TraceLine| -> Result<(), SimError> {
            serde_json::to_writer(&mut gz, line)?;
            gz.write_all(b"\n")?;
            Ok(())
        };
        write_line(&TraceLine::Header(TraceHeader {
            scenario_id: trace.scenario_id.clone(),
            scenario_seed: trace.scenario_seed,
            planner: trace.planner,
            agent_mode: trace.agent_mode,
            seed: trace.seed,
            failure: trace.failure.clone(),
            wall_ms: trace.wall_ms,
        }))?;
        for (step, (ego, agents)) in trace.ego.iter().zip(&trace.agents).enumerate() {
            write_line(&TraceLine::Step(StepRec { step, ego: *ego, agents: agents.clone() }))?;
        }
        for replan in &trace.replans {
            write_line(&TraceLine::Replan(replan.clone()))?;
        }
        gz.finish()?.into_inner().map_err(|e| e.into_error())?;
    }
    fs::rename(&tmp, &path)?;
    Ok(path)
}

/// Read one trace file back.
pub fn load_trace(path: &Path) -> Result<SimTrace, SimError> {
    let malformed = |why: &str| SimError::Malformed { path: path.to_path_buf(), why: why.into() };
    let reader = BufReader::new(GzDecoder::new(File::open(path)?));
    let mut header: Option<TraceHeader> = None;
    let mut ego = Vec::new();
    let mut agents = Vec::new();
    let mut replans = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        match serde_json::from_str::<TraceLine>(&line)? {
            TraceLine::Header(h) => {
                if header.is_some() {
                    return Err(malformed("duplicate header"));
                }
                header = Some(h);
            }
            TraceLine::Step(s) => {
                if s.step != ego.len() {
                    return Err(malformed(&format!(
                        "step {} out of order (expected {})",
                        s.step,
                        ego.len()
                    )));
                }
                ego.push(s.ego);
                agents.push(s.agents);
            }
            TraceLine::Replan(r) => replans.push(r),
        }
    }
    let header = header.ok_or_else(|| malformed("missing header"))?;
    Ok(SimTrace {
        scenario_id: header.scenario_id,
        scenario_seed: header.scenario_seed,
        planner: header.planner,
        agent_mode: header.agent_mode,
        seed: header.seed,
        ego,
        agents,
        replans,
        failure: header.failure,
        wall_ms: header.wall_ms,
    })
}

/// Load every `.jsonl.gz` trace in a directory, ordered by file name.
pub fn load_traces(dir: &Path) -> Result<Vec<SimTrace>, SimError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(".jsonl.gz"))
        .collect();
    paths.sort();
    paths.iter().map(|p| load_trace(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::seq::tests::micro_config;
    use crate::model::Str2Model;
    use crate::scenario::gen::generate_scenario;
    use crate::scenario::GeneratorConfig;
    use crate::scenario::ScenarioKind;
    use crate::vocab::{DistanceWeights, KmeansMeta, NormalizedTrajectory};

    fn log_replay_cfg() -> SimConfig {
        SimConfig::new(PlannerKind::LogReplay, AgentMode::NonReactive)
    }

    fn micro_vocab(k: usize) -> ProposalVocabulary {
        let centroids = (0..k)
            .map(|i| {
                let v = 0.5 + 1.5 * i as f64;
                NormalizedTrajectory::new(
                    (0..FUTURE_LEN).map(|t| [v * t as f64 * SIM_DT, 0.0, 0.0]).collect(),
                )
                .unwrap()
            })
            .collect();
        ProposalVocabulary {
            weights: DistanceWeights::default(),
            centroids,
            meta: KmeansMeta { iterations: 0, inertia: 0.0, inertia_history: vec![] },
        }
    }

    fn micro_assets() -> ModelAssets {
        let cfg = micro_config();
        let model: Str2Model<f32> = Str2Model::new(cfg.clone()).unwrap();
        let k = cfg.vocab_k;
        ModelAssets::new(&model.compile(), micro_vocab(k), RasterConfig::with_resolution(8))
    }

    #[test]
    fn config_validation_rejects_bad_periods_and_sizes() {
        let mut cfg = log_replay_cfg();
        assert!(cfg.validate().is_ok());
        assert_eq!(cfg.steps(), 80);
        assert_eq!(cfg.replan_every(), 5);
        cfg.replan_period_s = 0.25;
        assert!(cfg.validate().is_err());
        cfg.replan_period_s = 0.5;
        cfg.duration_s = 0.0;
        assert!(cfg.validate().is_err());
        cfg.duration_s = 9.0;
        assert!(cfg.validate().is_err(), "cannot outrun the recorded window");
        cfg.duration_s = 8.0;
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn log_replay_tracks_the_expert_closely() {
        let gen_cfg = GeneratorConfig::default();
        for (seed, kind) in
            [(11, ScenarioKind::Straight), (12, ScenarioKind::LeadVehicle), (13, ScenarioKind::Curve)]
        {
            let sc = generate_scenario(seed, kind, &gen_cfg).unwrap();
            let trace = run_scenario(&sc, &log_replay_cfg(), None).unwrap();
            assert_eq!(trace.ego.len(), 80);
            assert_eq!(trace.agents.len(), 80);
            assert!(trace.failure.is_none());
            let ade: f64 = trace
                .ego
                .iter()
                .zip(&sc.ego_future)
                .map(|(r, e)| ((r.x - e.pose.x).powi(2) + (r.y - e.pose.y).powi(2)).sqrt())
                .sum::<f64>()
                / 80.0;
            assert!(ade < 0.3, "{kind:?} log replay ADE {ade} too loose");
        }
    }

    #[test]
    fn non_reactive_agents_follow_their_recorded_states() {
        let sc = generate_scenario(21, ScenarioKind::LeadVehicle, &GeneratorConfig::default()).unwrap();
        let trace = run_scenario(&sc, &log_replay_cfg(), None).unwrap();
        for (i, rows) in trace.agents.iter().enumerate() {
            let step = HISTORY_LEN + i;
            for (obs, track) in rows.iter().zip(&sc.agents) {
                if let Some((pose, v)) = track.states.get(step) {
                    if track.valid_mask[step] {
                        assert_eq!(obs.x, pose.x);
                        assert_eq!(obs.y, pose.y);
                        assert_eq!(obs.v, *v);
                    }
                }
            }
        }
    }

    #[test]
    fn idm_baseline_advances_along_the_route() {
        let sc = generate_scenario(31, ScenarioKind::LeadVehicle, &GeneratorConfig::default()).unwrap();
        let cfg = SimConfig::new(PlannerKind::IdmBaseline, AgentMode::NonReactive);
        let trace = run_scenario(&sc, &cfg, None).unwrap();
        assert!(trace.failure.is_none());
        let route = sc.map.route_centerline();
        let (s_start, _) = route.project(sc.ego_now().pose.position());
        let last = trace.ego.last().unwrap();
        let (s_end, lateral) = route.project(crate::geom::Vec2::new(last.x, last.y));
        assert!(s_end > s_start + 1.0, "no progress: {s_start} -> {s_end}");
        assert!(lateral < 1.0, "strayed {lateral} m off the route");
        // IDM never exceeds the free-flow speed it was configured with.
        let v_max = trace.ego.iter().map(|r| r.v).fold(0.0, f64::max);
        let limit = sc.map.route_speed_limit_at(s_start);
        assert!(v_max <= limit + 0.5, "v {v_max} above limit {limit}");
    }

    #[test]
    fn trace_round_trips_through_the_store_exactly() {
        let sc = generate_scenario(41, ScenarioKind::Curve, &GeneratorConfig::default()).unwrap();
        let cfg = SimConfig::new(PlannerKind::IdmBaseline, AgentMode::Reactive);
        let trace = run_scenario(&sc, &cfg, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = save_trace(dir.path(), &trace).unwrap();
        assert!(path.to_string_lossy().ends_with(".jsonl.gz"));
        let back = load_trace(&path).unwrap();
        assert_eq!(trace, back);
        let all = load_traces(dir.path()).unwrap();
        assert_eq!(all.len(), 1);
        assert_eq!(all[0], trace);
    }

    #[test]
    fn model_planner_traces_do_not_depend_on_batch_grouping() {
        let gen_cfg = GeneratorConfig::default();
        let scenarios: Vec<Scenario> = [(51, ScenarioKind::Straight), (52, ScenarioKind::LeadVehicle), (53, ScenarioKind::Curve)]
            .into_iter()
            .map(|(seed, kind)| generate_scenario(seed, kind, &gen_cfg).unwrap())
            .collect();
        let assets = micro_assets();
        let mut cfg = SimConfig::new(PlannerKind::Str2Raw, AgentMode::NonReactive);
        cfg.batch_size = 50;
        let joint = run_batch(&scenarios, &cfg, Some(&assets), 1).unwrap();
        cfg.batch_size = 1;
        let solo = run_batch(&scenarios, &cfg, Some(&assets), 1).unwrap();
        assert_eq!(joint.len(), 3);
        for (a, b) in joint.iter().zip(&solo) {
            assert!(a.failure.is_none(), "{:?}", a.failure);
            assert!(a.same_outcome(b), "batch grouping changed {}", a.scenario_id);
        }
    }

    #[test]
    fn worker_count_does_not_change_any_trace() {
        let gen_cfg = GeneratorConfig::default();
        let scenarios: Vec<Scenario> = (61..66)
            .map(|seed| generate_scenario(seed, ScenarioKind::LeadVehicle, &gen_cfg).unwrap())
            .collect();
        let mut cfg = SimConfig::new(PlannerKind::IdmBaseline, AgentMode::Reactive);
        cfg.batch_size = 2;
        let one = run_batch(&scenarios, &cfg, None, 1).unwrap();
        let two = run_batch(&scenarios, &cfg, None, 2).unwrap();
        let four = run_batch(&scenarios, &cfg, None, 4).unwrap();
        for ((a, b), c) in one.iter().zip(&two).zip(&four) {
            assert!(a.same_outcome(b));
            assert!(a.same_outcome(c));
        }
    }

    #[test]
    fn planner_failure_freezes_the_scenario_but_not_the_batch() {
        let gen_cfg = GeneratorConfig::default();
        let scenarios: Vec<Scenario> = [(71, ScenarioKind::Straight), (72, ScenarioKind::LeadVehicle)]
            .into_iter()
            .map(|(seed, kind)| generate_scenario(seed, kind, &gen_cfg).unwrap())
            .collect();
        // Vocabulary size clashes with the model head: every generation call
        // fails, each scenario records the cause, the run itself succeeds.
        let cfg = micro_config();
        let model: Str2Model<f32> = Str2Model::new(cfg).unwrap();
        let assets =
            ModelAssets::new(&model.compile(), micro_vocab(64), RasterConfig::with_resolution(8));
        let sim_cfg = SimConfig::new(PlannerKind::Str2Raw, AgentMode::NonReactive);
        let traces = run_batch(&scenarios, &sim_cfg, Some(&assets), 1).unwrap();
        assert_eq!(traces.len(), 2);
        for trace in &traces {
            let cause = trace.failure.as_ref().expect("vocab mismatch must fail the planner");
            assert!(cause.contains("generation"), "unexpected cause: {cause}");
            assert_eq!(trace.ego.len(), 80, "failed scenarios keep full-length traces");
            let first = &trace.ego[0];
            let last = trace.ego.last().unwrap();
            assert_eq!((first.x, first.y), (last.x, last.y), "failed ego must freeze");
            assert_eq!(last.v, 0.0);
        }
    }

    #[test]
    fn empty_set_and_missing_model_are_rejected() {
        let cfg = log_replay_cfg();
        assert!(matches!(run_batch(&[], &cfg, None, 1), Err(SimError::EmptySet)));
        let sc = generate_scenario(81, ScenarioKind::Straight, &GeneratorConfig::default()).unwrap();
        let cfg = SimConfig::new(PlannerKind::Str2, AgentMode::NonReactive);
        assert!(matches!(
            run_scenario(&sc, &cfg, None),
            Err(SimError::MissingModel(PlannerKind::Str2))
        ));
    }

    #[test]
    fn scored_planner_records_the_candidate_digest() {
        let sc = generate_scenario(91, ScenarioKind::Straight, &GeneratorConfig::default()).unwrap();
        let assets = micro_assets();
        let cfg = SimConfig::new(PlannerKind::Str2, AgentMode::NonReactive);
        let trace = run_batch(std::slice::from_ref(&sc), &cfg, Some(&assets), 1)
            .unwrap()
            .pop()
            .unwrap();
        assert!(trace.failure.is_none(), "{:?}", trace.failure);
        assert_eq!(trace.replans.len(), 16);
        for replan in &trace.replans {
            assert_eq!(trace.replans[0].candidate_totals.len(), 21);
            assert!(replan.winner_index < replan.candidate_totals.len());
            assert!(!replan.trajectory.is_empty());
        }
    }
}
