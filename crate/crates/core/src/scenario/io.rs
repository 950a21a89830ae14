//! Versioned JSON-lines persistence for scenario sets, plain or gzipped,
//! with all floats narrowed to 32-bit for storage.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    AgentKind, AgentTrack, EgoState, GeneratorConfig, Lane, MapModel, Scenario, ScenarioKind,
    ScenarioSet, Split,
};
use crate::geom::{Polygon, Polyline, Pose2, Vec2};

/// Current file schema version.
pub const SCHEMA_VERSION: &str = "1";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error("line {line}: schema version {found:?}, expected {SCHEMA_VERSION:?}")]
    Version { line: usize, found: String },
    #[error("line {0}: unexpected end of file")]
    Truncated(usize),
    #[error("missing header line")]
    MissingHeader,
}

#[derive(Serialize, Deserialize)]
struct HeaderDto {
    version: String,
    split: Split,
    generator: GeneratorConfig,
}

#[derive(Serialize, Deserialize)]
struct ScenarioDto {
    version: String,
    id: String,
    map: MapDto,
    ego: EgoDto,
    agents: Vec<AgentDto>,
    meta: MetaDto,
}

#[derive(Serialize, Deserialize)]
struct MetaDto {
    kind: ScenarioKind,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct MapDto {
    lanes: Vec<LaneDto>,
    drivable_area: Vec<Vec<[f32; 2]>>,
    route_lane_ids: Vec<u32>,
    crosswalks: Vec<Vec<[f32; 2]>>,
    intersections: Vec<Vec<[f32; 2]>>,
}

#[derive(Serialize, Deserialize)]
struct LaneDto {
    id: u32,
    centerline: Vec<[f32; 2]>,
    left_boundary: Vec<[f32; 2]>,
    right_boundary: Vec<[f32; 2]>,
    speed_limit: f32,
}

#[derive(Serialize, Deserialize)]
struct EgoDto {
    history: Vec<[f32; 7]>,
    future: Vec<[f32; 7]>,
}

#[derive(Serialize, Deserialize)]
struct AgentDto {
    id: String,
    kind: AgentKind,
    length: f32,
    width: f32,
    /// (x, y, yaw, speed) per step.
    states: Vec<[f32; 4]>,
    valid: Vec<bool>,
}

fn line_out(line: &Polyline) -> Vec<[f32; 2]> {
    line.points.iter().map(|p| [p.x as f32, p.y as f32]).collect()
}

fn line_in(v: &[[f32; 2]]) -> Polyline {
    Polyline::new(v.iter().map(|p| Vec2::new(p[0] as f64, p[1] as f64)).collect())
}

fn poly_out(p: &Polygon) -> Vec<[f32; 2]> {
    p.points.iter().map(|q| [q.x as f32, q.y as f32]).collect()
}

fn poly_in(v: &[[f32; 2]]) -> Polygon {
    Polygon::new(v.iter().map(|p| Vec2::new(p[0] as f64, p[1] as f64)).collect())
}

fn ego_out(e: &EgoState) -> [f32; 7] {
    [
        e.pose.x as f32,
        e.pose.y as f32,
        e.pose.yaw as f32,
        e.velocity as f32,
        e.acceleration as f32,
        e.steering as f32,
        e.timestamp as f32,
    ]
}

/// Rebuild a pose without re-wrapping the yaw: a wrapped f64 yaw can narrow
/// to an f32 one ulp past pi, and wrapping that again would flip its sign and
/// break save/load/save byte identity.
fn pose_in(x: f32, y: f32, yaw: f32) -> Pose2 {
    Pose2 { x: x as f64, y: y as f64, yaw: yaw as f64 }
}

fn ego_in(v: &[f32; 7]) -> EgoState {
    EgoState {
        pose: pose_in(v[0], v[1], v[2]),
        velocity: v[3] as f64,
        acceleration: v[4] as f64,
        steering: v[5] as f64,
        timestamp: v[6] as f64,
    }
}

fn scenario_out(s: &Scenario) -> ScenarioDto {
    ScenarioDto {
        version: SCHEMA_VERSION.into(),
        id: s.id.clone(),
        map: MapDto {
            lanes: s
                .map
                .lanes
                .iter()
                .map(|l| LaneDto {
                    id: l.id,
                    centerline: line_out(&l.centerline),
                    left_boundary: line_out(&l.left_boundary),
                    right_boundary: line_out(&l.right_boundary),
                    speed_limit: l.speed_limit as f32,
                })
                .collect(),
            drivable_area: s.map.drivable_area.iter().map(poly_out).collect(),
            route_lane_ids: s.map.route_lane_ids.clone(),
            crosswalks: s.map.crosswalks.iter().map(poly_out).collect(),
            intersections: s.map.intersections.iter().map(poly_out).collect(),
        },
        ego: EgoDto {
            history: s.ego_history.iter().map(ego_out).collect(),
            future: s.ego_future.iter().map(ego_out).collect(),
        },
        agents: s
            .agents
            .iter()
            .map(|a| AgentDto {
                id: a.id.clone(),
                kind: a.kind,
                length: a.length as f32,
                width: a.width as f32,
                states: a
                    .states
                    .iter()
                    .map(|(p, v)| [p.x as f32, p.y as f32, p.yaw as f32, *v as f32])
                    .collect(),
                valid: a.valid_mask.clone(),
            })
            .collect(),
        meta: MetaDto { kind: s.kind, seed: s.seed },
    }
}

fn scenario_in(d: ScenarioDto) -> Scenario {
    Scenario {
        id: d.id,
        map: MapModel {
            lanes: d
                .map
                .lanes
                .into_iter()
                .map(|l| Lane {
                    id: l.id,
                    centerline: line_in(&l.centerline),
                    left_boundary: line_in(&l.left_boundary),
                    right_boundary: line_in(&l.right_boundary),
                    speed_limit: l.speed_limit as f64,
                })
                .collect(),
            drivable_area: d.map.drivable_area.iter().map(|p| poly_in(p)).collect(),
            route_lane_ids: d.map.route_lane_ids,
            crosswalks: d.map.crosswalks.iter().map(|p| poly_in(p)).collect(),
            intersections: d.map.intersections.iter().map(|p| poly_in(p)).collect(),
        },
        ego_history: d.ego.history.iter().map(ego_in).collect(),
        ego_future: d.ego.future.iter().map(ego_in).collect(),
        agents: d
            .agents
            .into_iter()
            .map(|a| AgentTrack {
                id: a.id,
                kind: a.kind,
                length: a.length as f64,
                width: a.width as f64,
                states: a
                    .states
                    .iter()
                    .map(|s| (pose_in(s[0], s[1], s[2]), s[3] as f64))
                    .collect(),
                valid_mask: a.valid,
            })
            .collect(),
        kind: d.meta.kind,
        seed: d.meta.seed,
    }
}

fn is_gz(path: &Path) -> bool {
    path.extension().map(|e| e == "gz").unwrap_or(false)
}

fn write_all<W: Write>(set: &ScenarioSet, mut w: W) -> Result<(), IoError> {
    let header = HeaderDto {
        version: SCHEMA_VERSION.into(),
        split: set.split,
        generator: set.generator.clone(),
    };
    serde_json::to_writer(&mut w, &header).map_err(|e| IoError::Parse { line: 1, source: e })?;
    w.write_all(b"\n")?;
    for (i, s) in set.scenarios.iter().enumerate() {
        serde_json::to_writer(&mut w, &scenario_out(s))
            .map_err(|e| IoError::Parse { line: i + 2, source: e })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Write a scenario set atomically (tmp file + rename). Gzip is selected by a
/// ".gz" suffix.
pub fn save_set(set: &ScenarioSet, path: impl AsRef<Path>) -> Result<(), IoError> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let tmp = PathBuf::from(format!("{}.tmp{}", path.display(), std::process::id()));
    {
        let file = BufWriter::new(File::create(&tmp)?);
        if is_gz(path) {
            write_all(set, GzEncoder::new(file, Compression::default()))?;
        } else {
            write_all(set, file)?;
        }
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Load a scenario set saved by [`save_set`].
pub fn load_set(path: impl AsRef<Path>) -> Result<ScenarioSet, IoError> {
    let path = path.as_ref();
    let file = File::open(path)?;
    let reader: Box<dyn BufRead> = if is_gz(path) {
        Box::new(BufReader::new(GzDecoder::new(file)))
    } else {
        Box::new(BufReader::new(file))
    };
    let mut lines = reader.lines().enumerate();

    let (_, header_line) = lines.next().ok_or(IoError::MissingHeader)?;
    let header_line = header_line.map_err(|_| IoError::Truncated(1))?;
    let header: HeaderDto = serde_json::from_str(&header_line)
        .map_err(|e| IoError::Parse { line: 1, source: e })?;
    if header.version != SCHEMA_VERSION {
        return Err(IoError::Version { line: 1, found: header.version });
    }

    let mut scenarios = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line.map_err(|_| IoError::Truncated(line_no))?;
        if line.trim().is_empty() {
            continue;
        }
        let dto: ScenarioDto = serde_json::from_str(&line)
            .map_err(|e| IoError::Parse { line: line_no, source: e })?;
        if dto.version != SCHEMA_VERSION {
            return Err(IoError::Version { line: line_no, found: dto.version });
        }
        scenarios.push(scenario_in(dto));
    }
    Ok(ScenarioSet { scenarios, split: header.split, generator: header.generator })
}
