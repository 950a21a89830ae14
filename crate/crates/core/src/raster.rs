//! Two-range boolean occupancy rasters and ViT patch slicing.
//!
//! A scenario is drawn twice around the ego vehicle — once at close range for
//! low-speed precision, once at long range for fast motion — with every road
//! element and agent kind in its own boolean channel.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{Pose2, Vec2};
use crate::scenario::{AgentKind, Lane, Scenario};

/// Steps between agent history snapshots (1 s at 10 Hz).
pub const SNAPSHOT_STRIDE: usize = 10;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("raster height {height} is not divisible by patch grid {grid}")]
    GridMismatch { height: usize, grid: usize },
    #[error("patch sequence does not match the target raster shape")]
    PatchShapeMismatch,
}

/// What gets painted into one channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ChannelContent {
    /// Every lane surface (the band between its boundaries).
    LaneSurface,
    /// Surfaces of the lanes on the ego route.
    RouteSurface,
    /// Left lane boundaries as thin lines.
    LeftBoundary,
    /// Right lane boundaries as thin lines.
    RightBoundary,
    DrivableArea,
    Crosswalk,
    Intersection,
    /// Lane surfaces whose speed limit falls in `[lo, hi)` m/s.
    SpeedBucket { lo: f64, hi: f64 },
    /// Filled boxes of one agent kind, `age_steps` ticks before the raster
    /// step (0 = current).
    AgentSnapshot { kind: AgentKind, age_steps: usize },
    /// Ego positions strictly before the raster step.
    EgoHistory,
    /// Kept empty.
    Reserved,
}

/// One named channel slot; its position in the map is the channel index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub name: String,
    pub content: ChannelContent,
}

fn spec(name: &str, content: ChannelContent) -> ChannelSpec {
    ChannelSpec { name: name.into(), content }
}

fn kind_tag(kind: AgentKind) -> &'static str {
    match kind {
        AgentKind::Vehicle => "vehicle",
        AgentKind::PedestrianCrowd => "pedestrian",
        AgentKind::Cyclist => "cyclist",
        AgentKind::StaticObject => "static",
    }
}

/// The frozen 34-channel assignment: 20 map channels (10 named + 10 reserved)
/// followed by 14 agent channels (4 kinds x {now, 1 s ago, 2 s ago}, the ego
/// history trail, 1 reserved).
pub fn default_channel_map() -> Vec<ChannelSpec> {
    let mut map = vec![
        spec("lane_surface", ChannelContent::LaneSurface),
        spec("route_surface", ChannelContent::RouteSurface),
        spec("left_boundary", ChannelContent::LeftBoundary),
        spec("right_boundary", ChannelContent::RightBoundary),
        spec("drivable_area", ChannelContent::DrivableArea),
        spec("crosswalk", ChannelContent::Crosswalk),
        spec("intersection", ChannelContent::Intersection),
        spec("speed_low", ChannelContent::SpeedBucket { lo: 0.0, hi: 9.0 }),
        spec("speed_mid", ChannelContent::SpeedBucket { lo: 9.0, hi: 12.0 }),
        spec("speed_high", ChannelContent::SpeedBucket { lo: 12.0, hi: f64::INFINITY }),
    ];
    for i in 0..10 {
        map.push(spec(&format!("map_reserved_{i}"), ChannelContent::Reserved));
    }
    for kind in [
        AgentKind::Vehicle,
        AgentKind::PedestrianCrowd,
        AgentKind::Cyclist,
        AgentKind::StaticObject,
    ] {
        for age in [0, SNAPSHOT_STRIDE, 2 * SNAPSHOT_STRIDE] {
            map.push(spec(
                &format!("{}_t{}", kind_tag(kind), age / SNAPSHOT_STRIDE),
                ChannelContent::AgentSnapshot { kind, age_steps: age },
            ));
        }
    }
    map.push(spec("ego_history", ChannelContent::EgoHistory));
    map.push(spec("agent_reserved_0", ChannelContent::Reserved));
    map
}

/// Raster geometry and channel assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RasterConfig {
    pub height: usize,
    pub width: usize,
    /// Half-width in meters covered by the close-range image.
    pub range_small: f64,
    /// Half-width in meters covered by the long-range image.
    pub range_large: f64,
    pub channel_map: Vec<ChannelSpec>,
}

impl RasterConfig {
    /// Square raster at the given resolution with the default channel map.
    pub fn with_resolution(px: usize) -> Self {
        RasterConfig {
            height: px,
            width: px,
            range_small: 40.0,
            range_large: 120.0,
            channel_map: default_channel_map(),
        }
    }

    pub fn channels(&self) -> usize {
        self.channel_map.len()
    }

    /// Index of the first channel whose content matches, if any.
    pub fn channel_index(&self, content: &ChannelContent) -> Option<usize> {
        self.channel_map.iter().position(|c| c.content == *content)
    }
}

impl Default for RasterConfig {
    fn default() -> Self {
        RasterConfig::with_resolution(64)
    }
}

/// One C x H x W boolean image, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    data: Vec<bool>,
}

impl RasterImage {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        RasterImage { channels, height, width, data: vec![false; channels * height * width] }
    }

    #[inline]
    fn idx(&self, c: usize, row: usize, col: usize) -> usize {
        (c * self.height + row) * self.width + col
    }

    #[inline]
    pub fn get(&self, c: usize, row: usize, col: usize) -> bool {
        self.data[self.idx(c, row, col)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, row: usize, col: usize) {
        let i = self.idx(c, row, col);
        self.data[i] = true;
    }

    /// Set pixels in one channel.
    pub fn count_in_channel(&self, c: usize) -> usize {
        let base = c * self.height * self.width;
        self.data[base..base + self.height * self.width].iter().filter(|&&b| b).count()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    /// Fraction of pixels on which the two images agree.
    pub fn agreement(&self, other: &RasterImage) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        let same = self.data.iter().zip(&other.data).filter(|(a, b)| a == b).count();
        same as f64 / self.data.len() as f64
    }
}

/// The pair of occupancy images around one ego pose.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterStack {
    pub small: RasterImage,
    pub large: RasterImage,
    /// Pixel (row, col) of the ego origin; identical in both images.
    pub ego_anchor: (usize, usize),
}

/// Painter for one image: world -> ego frame -> pixel coordinates.
/// Rows grow backward (ego faces row 0), columns grow to the ego's right.
struct Painter<'a> {
    img: &'a mut RasterImage,
    anchor: Pose2,
    px_per_m: f64,
}

impl Painter<'_> {
    fn to_px(&self, p: Vec2) -> (f64, f64) {
        let q = p.into_frame(&self.anchor);
        let row = self.img.height as f64 / 2.0 - q.x * self.px_per_m;
        let col = self.img.width as f64 / 2.0 - q.y * self.px_per_m;
        (row, col)
    }

    fn set_px(&mut self, c: usize, row: i64, col: i64) {
        if row >= 0 && col >= 0 && (row as usize) < self.img.height && (col as usize) < self.img.width {
            self.img.set(c, row as usize, col as usize);
        }
    }

    /// Fill a world-space polygon: pixel centers inside by even-odd rule.
    fn fill_polygon(&mut self, c: usize, pts: &[Vec2]) {
        if pts.len() < 3 {
            return;
        }
        let px: Vec<(f64, f64)> = pts.iter().map(|p| self.to_px(*p)).collect();
        let (mut r0, mut r1, mut c0, mut c1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for &(r, cc) in &px {
            r0 = r0.min(r);
            r1 = r1.max(r);
            c0 = c0.min(cc);
            c1 = c1.max(cc);
        }
        let row_lo = r0.floor().max(0.0) as usize;
        let row_hi = (r1.ceil() as i64).min(self.img.height as i64 - 1);
        let col_lo = c0.floor().max(0.0) as usize;
        let col_hi = (c1.ceil() as i64).min(self.img.width as i64 - 1);
        let mut any = false;
        if row_hi >= row_lo as i64 && col_hi >= col_lo as i64 {
            for row in row_lo..=row_hi as usize {
                let rc = row as f64 + 0.5;
                for col in col_lo..=col_hi as usize {
                    if point_in_polygon(&px, rc, col as f64 + 0.5) {
                        self.img.set(c, row, col);
                        any = true;
                    }
                }
            }
        }
        // A shape narrower than a pixel can straddle every center it touches;
        // keep it visible through its vertex centroid.
        if !any {
            let n = px.len() as f64;
            let (rs, cs) = px.iter().fold((0.0, 0.0), |(ar, ac), (r, c)| (ar + r, ac + c));
            self.set_px(c, (rs / n).floor() as i64, (cs / n).floor() as i64);
        }
    }

    /// Trace a world-space polyline, marking every pixel the curve passes
    /// through (sampled at sub-pixel spacing).
    fn draw_polyline(&mut self, c: usize, pts: &[Vec2]) {
        for w in pts.windows(2) {
            let (r0, c0) = self.to_px(w[0]);
            let (r1, c1) = self.to_px(w[1]);
            let steps = ((r1 - r0).abs().max((c1 - c0).abs()) / 0.4).ceil().max(1.0) as usize;
            for k in 0..=steps {
                let t = k as f64 / steps as f64;
                let r = r0 + t * (r1 - r0);
                let cc = c0 + t * (c1 - c0);
                self.set_px(c, r.floor() as i64, cc.floor() as i64);
            }
        }
    }

    fn mark_point(&mut self, c: usize, p: Vec2) {
        let (r, cc) = self.to_px(p);
        self.set_px(c, r.floor() as i64, cc.floor() as i64);
    }
}

/// Even-odd point-in-polygon test in pixel space.
fn point_in_polygon(pts: &[(f64, f64)], row: f64, col: f64) -> bool {
    let mut inside = false;
    let mut j = pts.len() - 1;
    for i in 0..pts.len() {
        let (ri, ci) = pts[i];
        let (rj, cj) = pts[j];
        if (ci > col) != (cj > col) {
            let t = (col - ci) / (cj - ci);
            if ri + t * (rj - ri) > row {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

/// The surface of a lane as a closed polygon (left boundary out, right back).
fn lane_band(lane: &Lane) -> Vec<Vec2> {
    let mut pts = lane.left_boundary.points.clone();
    pts.extend(lane.right_boundary.points.iter().rev().copied());
    pts
}

fn paint_channel(p: &mut Painter, c: usize, content: &ChannelContent, scenario: &Scenario, at_step: usize) {
    match content {
        ChannelContent::LaneSurface => {
            for lane in &scenario.map.lanes {
                p.fill_polygon(c, &lane_band(lane));
            }
        }
        ChannelContent::RouteSurface => {
            for id in &scenario.map.route_lane_ids {
                if let Some(lane) = scenario.map.lane(*id) {
                    p.fill_polygon(c, &lane_band(lane));
                }
            }
        }
        ChannelContent::LeftBoundary => {
            for lane in &scenario.map.lanes {
                p.draw_polyline(c, &lane.left_boundary.points);
            }
        }
        ChannelContent::RightBoundary => {
            for lane in &scenario.map.lanes {
                p.draw_polyline(c, &lane.right_boundary.points);
            }
        }
        ChannelContent::DrivableArea => {
            for poly in &scenario.map.drivable_area {
                p.fill_polygon(c, &poly.points);
            }
        }
        ChannelContent::Crosswalk => {
            for poly in &scenario.map.crosswalks {
                p.fill_polygon(c, &poly.points);
            }
        }
        ChannelContent::Intersection => {
            for poly in &scenario.map.intersections {
                p.fill_polygon(c, &poly.points);
            }
        }
        ChannelContent::SpeedBucket { lo, hi } => {
            for lane in &scenario.map.lanes {
                if lane.speed_limit >= *lo && lane.speed_limit < *hi {
                    p.fill_polygon(c, &lane_band(lane));
                }
            }
        }
        ChannelContent::AgentSnapshot { kind, age_steps } => {
            if let Some(step) = at_step.checked_sub(*age_steps) {
                for agent in &scenario.agents {
                    if agent.kind != *kind {
                        continue;
                    }
                    if let Some(b) = agent.box_at(step) {
                        p.fill_polygon(c, &b.corners());
                    }
                }
            }
        }
        ChannelContent::EgoHistory => {
            for state in &scenario.ego_history[..at_step] {
                p.mark_point(c, state.pose.position());
            }
        }
        ChannelContent::Reserved => {}
    }
}

/// Draw the scenario at a history step into the two-range channel stacks,
/// centered on the ego position and aligned with its heading. Elements
/// outside a range are clipped silently.
pub fn rasterize(scenario: &Scenario, at_step: usize, cfg: &RasterConfig) -> RasterStack {
    assert!(
        at_step < scenario.ego_history.len(),
        "raster step {at_step} outside ego history (len {})",
        scenario.ego_history.len()
    );
    let anchor = scenario.ego_history[at_step].pose;
    let mut small = RasterImage::zeros(cfg.channels(), cfg.height, cfg.width);
    let mut large = RasterImage::zeros(cfg.channels(), cfg.height, cfg.width);
    for (img, range) in [(&mut small, cfg.range_small), (&mut large, cfg.range_large)] {
        let mut p = Painter { px_per_m: img.height as f64 / (2.0 * range), img, anchor };
        for (c, ch) in cfg.channel_map.iter().enumerate() {
            paint_channel(&mut p, c, &ch.content, scenario, at_step);
        }
    }
    RasterStack { small, large, ego_anchor: (cfg.height / 2, cfg.width / 2) }
}

/// Slice both images into `patch_grid` x `patch_grid` patches each, small
/// image first, row-major, every patch flattened channel-major.
pub fn patchify(stack: &RasterStack, patch_grid: usize) -> Result<Vec<Vec<bool>>, RasterError> {
    let h = stack.small.height;
    if patch_grid == 0 || h % patch_grid != 0 {
        return Err(RasterError::GridMismatch { height: h, grid: patch_grid });
    }
    let ph = h / patch_grid;
    let pw = stack.small.width / patch_grid;
    let mut patches = Vec::with_capacity(2 * patch_grid * patch_grid);
    for img in [&stack.small, &stack.large] {
        for gr in 0..patch_grid {
            for gc in 0..patch_grid {
                let mut v = Vec::with_capacity(img.channels * ph * pw);
                for c in 0..img.channels {
                    for r in 0..ph {
                        for col in 0..pw {
                            v.push(img.get(c, gr * ph + r, gc * pw + col));
                        }
                    }
                }
                patches.push(v);
            }
        }
    }
    Ok(patches)
}

/// Rebuild a stack from its patch sequence (inverse of [`patchify`]).
pub fn unpatchify(
    patches: &[Vec<bool>],
    cfg: &RasterConfig,
    patch_grid: usize,
    ego_anchor: (usize, usize),
) -> Result<RasterStack, RasterError> {
    if patch_grid == 0 || cfg.height % patch_grid != 0 {
        return Err(RasterError::GridMismatch { height: cfg.height, grid: patch_grid });
    }
    let ph = cfg.height / patch_grid;
    let pw = cfg.width / patch_grid;
    let per_image = patch_grid * patch_grid;
    if patches.len() != 2 * per_image
        || patches.iter().any(|p| p.len() != cfg.channels() * ph * pw)
    {
        return Err(RasterError::PatchShapeMismatch);
    }
    let mut images = Vec::with_capacity(2);
    for half in 0..2 {
        let mut img = RasterImage::zeros(cfg.channels(), cfg.height, cfg.width);
        for (pi, patch) in patches[half * per_image..(half + 1) * per_image].iter().enumerate() {
            let (gr, gc) = (pi / patch_grid, pi % patch_grid);
            let mut k = 0;
            for c in 0..img.channels {
                for r in 0..ph {
                    for col in 0..pw {
                        if patch[k] {
                            img.set(c, gr * ph + r, gc * pw + col);
                        }
                        k += 1;
                    }
                }
            }
        }
        images.push(img);
    }
    let large = images.pop().expect("two images");
    let small = images.pop().expect("two images");
    Ok(RasterStack { small, large, ego_anchor })
}

/// Write every channel of both images as a PNG (`{scenario}_{range}_{channel}.png`)
/// for visual inspection. Returns the written paths.
pub fn dump_png(
    stack: &RasterStack,
    cfg: &RasterConfig,
    scenario_id: &str,
    dir: &Path,
) -> image::ImageResult<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (img, range) in [(&stack.small, "small"), (&stack.large, "large")] {
        for (c, ch) in cfg.channel_map.iter().enumerate() {
            let mut png = image::GrayImage::new(img.width as u32, img.height as u32);
            for row in 0..img.height {
                for col in 0..img.width {
                    let v = if img.get(c, row, col) { 255u8 } else { 0u8 };
                    png.put_pixel(col as u32, row as u32, image::Luma([v]));
                }
            }
            let path = dir.join(format!("{scenario_id}_{range}_{}.png", ch.name));
            png.save(&path)?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{Polygon, Polyline};
    use crate::scenario::{
        fixtures::straight_map, AgentTrack, EgoState, MapModel, Scenario, ScenarioKind, HISTORY_LEN,
        SIM_DT,
    };
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ego_state(x: f64, y: f64, yaw: f64, t: f64) -> EgoState {
        EgoState {
            pose: Pose2::new(x, y, yaw),
            velocity: 0.0,
            acceleration: 0.0,
            steering: 0.0,
            timestamp: t,
        }
    }

    fn empty_map() -> MapModel {
        MapModel {
            lanes: vec![],
            drivable_area: vec![],
            route_lane_ids: vec![],
            crosswalks: vec![],
            intersections: vec![],
        }
    }

    fn static_agent(kind: AgentKind, x: f64, y: f64, steps: usize) -> AgentTrack {
        AgentTrack {
            id: "a".into(),
            kind,
            length: 4.6,
            width: 1.85,
            states: (0..steps).map(|_| (Pose2::new(x, y, 0.0), 0.0)).collect(),
            valid_mask: vec![true; steps],
        }
    }

    fn bare_scenario(map: MapModel, agents: Vec<AgentTrack>, history: Vec<EgoState>) -> Scenario {
        Scenario {
            id: "raster-test".into(),
            map,
            ego_history: history,
            ego_future: vec![],
            agents,
            kind: ScenarioKind::Straight,
            seed: 0,
        }
    }

    #[test]
    fn default_config_shapes_match() {
        let cfg = RasterConfig::default();
        assert_eq!(cfg.channels(), 34);
        assert_eq!(cfg.channel_map.len(), 34);
        let sc = bare_scenario(empty_map(), vec![], vec![ego_state(0.0, 0.0, 0.0, 0.0)]);
        let stack = rasterize(&sc, 0, &cfg);
        for img in [&stack.small, &stack.large] {
            assert_eq!((img.channels, img.height, img.width), (34, 64, 64));
        }
        assert!(cfg.range_small < cfg.range_large);
    }

    #[test]
    fn single_vehicle_at_ego_sets_only_current_vehicle_channel() {
        let cfg = RasterConfig::default();
        let sc = bare_scenario(
            empty_map(),
            vec![static_agent(AgentKind::Vehicle, 0.0, 0.0, 1)],
            vec![ego_state(0.0, 0.0, 0.0, 0.0)],
        );
        let stack = rasterize(&sc, 0, &cfg);
        let vehicle_now = cfg
            .channel_index(&ChannelContent::AgentSnapshot { kind: AgentKind::Vehicle, age_steps: 0 })
            .unwrap();
        for img in [&stack.small, &stack.large] {
            for c in 0..cfg.channels() {
                let n = img.count_in_channel(c);
                if c == vehicle_now {
                    assert!(n > 0, "vehicle channel empty");
                } else {
                    assert_eq!(n, 0, "channel {c} unexpectedly set");
                }
            }
        }
        // The box straddles the anchor: its set-pixel centroid sits within a
        // pixel of ego_anchor.
        let img = &stack.small;
        let (mut sr, mut sc_, mut n) = (0.0, 0.0, 0.0);
        for row in 0..img.height {
            for col in 0..img.width {
                if img.get(vehicle_now, row, col) {
                    sr += row as f64 + 0.5;
                    sc_ += col as f64 + 0.5;
                    n += 1.0;
                }
            }
        }
        let (ar, ac) = stack.ego_anchor;
        assert!((sr / n - ar as f64).abs() < 1.0);
        assert!((sc_ / n - ac as f64).abs() < 1.0);
    }

    #[test]
    fn range_containment_follows_geometry() {
        let cfg = RasterConfig::default();
        let vehicle_now = cfg
            .channel_index(&ChannelContent::AgentSnapshot { kind: AgentKind::Vehicle, age_steps: 0 })
            .unwrap();
        // 0.6 * range_small ahead: inside both images.
        let near = bare_scenario(
            empty_map(),
            vec![static_agent(AgentKind::Vehicle, 0.6 * cfg.range_small, 0.0, 1)],
            vec![ego_state(0.0, 0.0, 0.0, 0.0)],
        );
        let stack = rasterize(&near, 0, &cfg);
        assert!(stack.small.count_in_channel(vehicle_now) > 0);
        assert!(stack.large.count_in_channel(vehicle_now) > 0);
        // 1.5 * range_small ahead: clipped from the small image only.
        let far = bare_scenario(
            empty_map(),
            vec![static_agent(AgentKind::Vehicle, 1.5 * cfg.range_small, 0.0, 1)],
            vec![ego_state(0.0, 0.0, 0.0, 0.0)],
        );
        let stack = rasterize(&far, 0, &cfg);
        assert_eq!(stack.small.count_in_channel(vehicle_now), 0);
        assert!(stack.large.count_in_channel(vehicle_now) > 0);
    }

    #[test]
    fn kinds_never_cross_channels() {
        let cfg = RasterConfig::default();
        let sc = bare_scenario(
            empty_map(),
            vec![static_agent(AgentKind::PedestrianCrowd, 5.0, 0.0, 1)],
            vec![ego_state(0.0, 0.0, 0.0, 0.0)],
        );
        let stack = rasterize(&sc, 0, &cfg);
        for (c, ch) in cfg.channel_map.iter().enumerate() {
            let expect = matches!(
                ch.content,
                ChannelContent::AgentSnapshot { kind: AgentKind::PedestrianCrowd, age_steps: 0 }
            );
            assert_eq!(stack.small.count_in_channel(c) > 0, expect, "channel {}", ch.name);
        }
    }

    #[test]
    fn snapshots_pick_up_past_agent_poses() {
        let cfg = RasterConfig::default();
        // Agent far left at step 0, at the ego at step 20.
        let states: Vec<(Pose2, f64)> = (0..HISTORY_LEN)
            .map(|k| (Pose2::new(0.0, 30.0 - 1.5 * k as f64, 0.0), 15.0))
            .collect();
        let agent = AgentTrack {
            id: "m".into(),
            kind: AgentKind::Vehicle,
            length: 4.6,
            width: 1.85,
            valid_mask: vec![true; states.len()],
            states,
        };
        let history: Vec<EgoState> =
            (0..HISTORY_LEN).map(|k| ego_state(0.0, 0.0, 0.0, k as f64 * SIM_DT)).collect();
        let sc = bare_scenario(empty_map(), vec![agent], history);
        let stack = rasterize(&sc, HISTORY_LEN - 1, &cfg);
        // All three snapshot ages must be painted at distinct lateral offsets.
        for age in [0, 10, 20] {
            let c = cfg
                .channel_index(&ChannelContent::AgentSnapshot { kind: AgentKind::Vehicle, age_steps: age })
                .unwrap();
            assert!(stack.small.count_in_channel(c) > 0, "age {age} empty");
        }
    }

    #[test]
    fn ego_history_trails_behind() {
        let cfg = RasterConfig::default();
        let trail = cfg.channel_index(&ChannelContent::EgoHistory).unwrap();
        let history: Vec<EgoState> =
            (0..HISTORY_LEN).map(|k| ego_state(k as f64, 0.0, 0.0, k as f64 * SIM_DT)).collect();
        let sc = bare_scenario(empty_map(), vec![], history);
        let at_end = rasterize(&sc, HISTORY_LEN - 1, &cfg);
        assert!(at_end.small.count_in_channel(trail) > 0);
        let at_start = rasterize(&sc, 0, &cfg);
        assert_eq!(at_start.small.count_in_channel(trail), 0);
    }

    #[test]
    fn map_channels_land_where_expected() {
        let cfg = RasterConfig::default();
        let map = straight_map(400.0, 3.7);
        let history: Vec<EgoState> =
            (0..HISTORY_LEN).map(|k| ego_state(200.0 + k as f64, 0.0, 0.0, k as f64 * SIM_DT)).collect();
        let sc = bare_scenario(map, vec![], history);
        let stack = rasterize(&sc, HISTORY_LEN - 1, &cfg);
        for name in ["lane_surface", "route_surface", "drivable_area", "left_boundary", "right_boundary"] {
            let c = cfg.channel_map.iter().position(|ch| ch.name == name).unwrap();
            assert!(stack.small.count_in_channel(c) > 0, "{name} empty");
        }
        // The fixture's lane speed limit (11.11) falls in the middle bucket.
        let mid = cfg.channel_index(&ChannelContent::SpeedBucket { lo: 9.0, hi: 12.0 }).unwrap();
        let low = cfg.channel_index(&ChannelContent::SpeedBucket { lo: 0.0, hi: 9.0 }).unwrap();
        assert!(stack.small.count_in_channel(mid) > 0);
        assert_eq!(stack.small.count_in_channel(low), 0);
        // Reserved channels stay empty.
        for (c, ch) in cfg.channel_map.iter().enumerate() {
            if ch.content == ChannelContent::Reserved {
                assert_eq!(stack.small.count_in_channel(c), 0);
            }
        }
    }

    #[test]
    fn identical_inputs_identical_rasters() {
        let cfg = RasterConfig::default();
        let sc = crate::scenario::gen::generate_scenario(
            11,
            ScenarioKind::Straight,
            &crate::scenario::GeneratorConfig::default(),
        )
        .unwrap();
        let a = rasterize(&sc, HISTORY_LEN - 1, &cfg);
        let b = rasterize(&sc, HISTORY_LEN - 1, &cfg);
        assert_eq!(a, b);
    }

    /// Rotate every world element of a scenario about the origin.
    fn rotate_scenario(sc: &Scenario, angle: f64) -> Scenario {
        let rot_pose = |p: &Pose2| {
            let q = p.position().rotated(angle);
            Pose2::new(q.x, q.y, p.yaw + angle)
        };
        let rot_line = |l: &Polyline| Polyline::new(l.points.iter().map(|p| p.rotated(angle)).collect());
        let rot_poly = |p: &Polygon| Polygon::new(p.points.iter().map(|q| q.rotated(angle)).collect());
        let mut out = sc.clone();
        for lane in &mut out.map.lanes {
            lane.centerline = rot_line(&lane.centerline);
            lane.left_boundary = rot_line(&lane.left_boundary);
            lane.right_boundary = rot_line(&lane.right_boundary);
        }
        out.map.drivable_area = sc.map.drivable_area.iter().map(rot_poly).collect();
        out.map.crosswalks = sc.map.crosswalks.iter().map(rot_poly).collect();
        out.map.intersections = sc.map.intersections.iter().map(rot_poly).collect();
        for s in out.ego_history.iter_mut().chain(out.ego_future.iter_mut()) {
            s.pose = rot_pose(&s.pose);
        }
        for a in &mut out.agents {
            for (p, _) in &mut a.states {
                *p = rot_pose(p);
            }
        }
        out
    }

    #[test]
    fn rotating_the_whole_world_leaves_rasters_nearly_unchanged() {
        let cfg = RasterConfig::default();
        let gen_cfg = crate::scenario::GeneratorConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for (seed, kind) in [
            (3, ScenarioKind::Straight),
            (5, ScenarioKind::Curve),
            (9, ScenarioKind::LeadVehicle),
        ] {
            let sc = crate::scenario::gen::generate_scenario(seed, kind, &gen_cfg).unwrap();
            let angle = rng.gen_range(0.3..std::f64::consts::TAU);
            let rotated = rotate_scenario(&sc, angle);
            let a = rasterize(&sc, HISTORY_LEN - 1, &cfg);
            let b = rasterize(&rotated, HISTORY_LEN - 1, &cfg);
            let small = a.small.agreement(&b.small);
            let large = a.large.agreement(&b.large);
            assert!(small >= 0.99, "small agreement {small} (seed {seed})");
            assert!(large >= 0.99, "large agreement {large} (seed {seed})");
        }
    }

    #[test]
    fn patchify_shapes_and_roundtrip() {
        let cfg = RasterConfig::default();
        // Random occupancy exercises every patch position.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut small = RasterImage::zeros(34, 64, 64);
        let mut large = RasterImage::zeros(34, 64, 64);
        for img in [&mut small, &mut large] {
            for c in 0..34 {
                for r in 0..64 {
                    for col in 0..64 {
                        if rng.gen_bool(0.2) {
                            img.set(c, r, col);
                        }
                    }
                }
            }
        }
        let stack = RasterStack { small, large, ego_anchor: (32, 32) };
        let patches = patchify(&stack, 4).unwrap();
        assert_eq!(patches.len(), 32); // 16 per image
        assert!(patches.iter().all(|p| p.len() == 34 * 16 * 16));
        let back = unpatchify(&patches, &cfg, 4, (32, 32)).unwrap();
        assert_eq!(back, stack);
    }

    #[test]
    fn empty_stack_gives_all_zero_patches() {
        let stack = RasterStack {
            small: RasterImage::zeros(34, 64, 64),
            large: RasterImage::zeros(34, 64, 64),
            ego_anchor: (32, 32),
        };
        let patches = patchify(&stack, 4).unwrap();
        assert!(patches.iter().all(|p| p.iter().all(|&b| !b)));
    }

    #[test]
    fn indivisible_patch_grid_is_rejected() {
        let stack = RasterStack {
            small: RasterImage::zeros(34, 64, 64),
            large: RasterImage::zeros(34, 64, 64),
            ego_anchor: (32, 32),
        };
        assert!(matches!(
            patchify(&stack, 5),
            Err(RasterError::GridMismatch { height: 64, grid: 5 })
        ));
    }

    #[test]
    fn png_dump_writes_one_file_per_channel_and_range() {
        let cfg = RasterConfig::default();
        let sc = bare_scenario(
            straight_map(100.0, 3.7),
            vec![static_agent(AgentKind::Vehicle, 60.0, 0.0, 1)],
            vec![ego_state(50.0, 0.0, 0.0, 0.0)],
        );
        let stack = rasterize(&sc, 0, &cfg);
        let dir = tempfile::tempdir().unwrap();
        let files = dump_png(&stack, &cfg, "demo", dir.path()).unwrap();
        assert_eq!(files.len(), 68);
        assert!(files.iter().all(|f| f.exists()));
    }
}
