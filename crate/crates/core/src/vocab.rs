//! Trajectory proposal vocabulary: mini-batch K-means over normalized expert
//! futures, plus ground-truth proposal assignment.
//!
//! Clustering runs on 80-point (x, y, yaw) futures under a weighted
//! spatial-temporal distance. Centroids are projected back to dynamic
//! feasibility, since coordinate averaging can exceed curvature and
//! acceleration limits.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::wrap_angle;
use crate::scenario::{Scenario, VehicleParams, FUTURE_LEN, SIM_DT};

/// Schema version for vocabulary files.
pub const VOCAB_VERSION: &str = "1";

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("trajectory has {got} points, expected {FUTURE_LEN}")]
    WrongLength { got: usize },
    #[error("trajectory start ({x:.2}, {y:.2}) is not at the origin")]
    NotNormalized { x: f64, y: f64 },
    #[error("{n} trajectories cannot seed {k} clusters")]
    TooFewInputs { n: usize, k: usize },
    #[error("vocabulary has duplicate or too few centroids")]
    Degenerate,
    #[error("vocabulary file version {found:?}, expected {VOCAB_VERSION:?}")]
    Version { found: String },
    #[error("vocabulary file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// An 80-point future in the frame of its own first state: positions are
/// ego-heading-aligned and offset so the first point is the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedTrajectory {
    points: Vec<[f64; 3]>,
}

impl NormalizedTrajectory {
    /// Validates point count and the at-origin start.
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self, VocabError> {
        if points.len() != FUTURE_LEN {
            return Err(VocabError::WrongLength { got: points.len() });
        }
        let [x, y, _] = points[0];
        if x.abs() >= 0.5 || y.abs() >= 0.5 {
            return Err(VocabError::NotNormalized { x, y });
        }
        Ok(NormalizedTrajectory { points })
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }
}

/// Extract the normalized future of a scenario: future poses are taken into
/// the current ego frame, then shifted so the first future point is the
/// origin (its heading stays relative to the current ego heading).
pub fn normalize_future(scenario: &Scenario) -> Result<NormalizedTrajectory, VocabError> {
    let anchor = scenario.ego_now().pose;
    let local: Vec<_> = scenario.ego_future.iter().map(|s| s.pose.into_frame(&anchor)).collect();
    if local.is_empty() {
        return Err(VocabError::WrongLength { got: 0 });
    }
    let (x0, y0) = (local[0].x, local[0].y);
    NormalizedTrajectory::new(local.iter().map(|p| [p.x - x0, p.y - y0, p.yaw]).collect())
}

/// Weights of the spatial-temporal distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceWeights {
    pub w_xy: f64,
    /// In m^2 per rad^2.
    pub w_yaw: f64,
}

impl Default for DistanceWeights {
    fn default() -> Self {
        DistanceWeights { w_xy: 1.0, w_yaw: 1.0 }
    }
}

/// Mean squared pointwise offset under the weights (the squared distance).
fn dist2(a: &[[f64; 3]], b: &[[f64; 3]], w: &DistanceWeights) -> f64 {
    assert_eq!(a.len(), b.len(), "spatial-temporal distance over mismatched lengths");
    let mut acc = 0.0;
    for (pa, pb) in a.iter().zip(b) {
        let dx = pa[0] - pb[0];
        let dy = pa[1] - pb[1];
        let dyaw = wrap_angle(pa[2] - pb[2]);
        acc += w.w_xy * (dx * dx + dy * dy) + w.w_yaw * dyaw * dyaw;
    }
    acc / a.len() as f64
}

/// Spatial-temporal distance: RMS over time of weighted position and wrapped
/// yaw offsets. Symmetric, zero iff the trajectories coincide (mod yaw wrap).
pub fn st_distance(a: &NormalizedTrajectory, b: &NormalizedTrajectory, w: &DistanceWeights) -> f64 {
    dist2(&a.points, &b.points, w).sqrt()
}

/// Is every step within curvature and acceleration limits (with slack)?
pub fn is_feasible(points: &[[f64; 3]], vp: &VehicleParams, tol: f64) -> bool {
    let kappa_max = vp.max_steer.tan() / vp.wheelbase;
    let a_bound = vp.a_max.max(-vp.a_min);
    let mut prev_v: Option<f64> = None;
    for k in 0..points.len() - 1 {
        let dx = points[k + 1][0] - points[k][0];
        let dy = points[k + 1][1] - points[k][1];
        let ds = (dx * dx + dy * dy).sqrt();
        let v = ds / SIM_DT;
        if let Some(pv) = prev_v {
            if ((v - pv) / SIM_DT).abs() > a_bound * (1.0 + tol) + 1e-9 {
                return false;
            }
        }
        prev_v = Some(v);
        if ds > 0.05 {
            let dh = wrap_angle(points[k + 1][2] - points[k][2]);
            if (dh / ds).abs() > kappa_max * (1.0 + tol) + 1e-9 {
                return false;
            }
        }
    }
    true
}

/// Project a trajectory onto the dynamically feasible set: clip per-step
/// speed changes and heading rates to the vehicle limits, rebuild positions
/// from the clipped chain, then recompute yaw from the rebuilt positions.
pub fn project_feasible(points: &[[f64; 3]], vp: &VehicleParams) -> Vec<[f64; 3]> {
    let n = points.len();
    if n < 2 {
        return points.to_vec();
    }
    let kappa_max = vp.max_steer.tan() / vp.wheelbase;
    // Clipped speeds per segment.
    let seg_v: Vec<f64> = (0..n - 1)
        .map(|k| {
            let dx = points[k + 1][0] - points[k][0];
            let dy = points[k + 1][1] - points[k][1];
            (dx * dx + dy * dy).sqrt() / SIM_DT
        })
        .collect();
    let mut v = vec![0.0; n - 1];
    v[0] = seg_v[0];
    for k in 1..n - 1 {
        v[k] = seg_v[k]
            .min(v[k - 1] + vp.a_max * SIM_DT)
            .max(v[k - 1] + vp.a_min * SIM_DT)
            .max(0.0);
    }
    // Clipped headings per segment, then rebuilt positions.
    let mut out = vec![[0.0; 3]; n];
    out[0] = points[0];
    let mut heading = f64::atan2(points[1][1] - points[0][1], points[1][0] - points[0][0]);
    let mut pos = (points[0][0], points[0][1]);
    for k in 0..n - 1 {
        if k > 0 {
            let want = f64::atan2(points[k + 1][1] - points[k][1], points[k + 1][0] - points[k][0]);
            // The turn between segment headings is rated against the length
            // of the segment it pivots on (the previous one).
            let max_turn = kappa_max * v[k - 1] * SIM_DT;
            heading += wrap_angle(want - heading).clamp(-max_turn, max_turn);
        }
        pos.0 += v[k] * SIM_DT * heading.cos();
        pos.1 += v[k] * SIM_DT * heading.sin();
        out[k + 1] = [pos.0, pos.1, 0.0];
    }
    // Yaw re-smoothed from the rebuilt positions.
    for k in 0..n {
        let (a, b) = if k + 1 < n { (k, k + 1) } else { (k - 1, k) };
        let dx = out[b][0] - out[a][0];
        let dy = out[b][1] - out[a][1];
        out[k][2] = if dx.abs() + dy.abs() > 1e-9 { f64::atan2(dy, dx) } else { out[k.saturating_sub(1)][2] };
    }
    out
}

/// Convergence record of a vocabulary build.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmeansMeta {
    pub iterations: usize,
    pub inertia: f64,
    /// Full-data mean squared distance, evaluated every 10 iterations.
    pub inertia_history: Vec<f64>,
}

/// The proposal vocabulary: K feasible centroid trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalVocabulary {
    pub weights: DistanceWeights,
    pub centroids: Vec<NormalizedTrajectory>,
    pub meta: KmeansMeta,
}

impl ProposalVocabulary {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    /// FNV-1a hash of the centroid bytes; stable reference for configs.
    pub fn content_hash(&self) -> String {
        let mut h: u64 = 0xcbf29ce484222325;
        for c in &self.centroids {
            for p in &c.points {
                for v in p {
                    for byte in v.to_le_bytes() {
                        h ^= byte as u64;
                        h = h.wrapping_mul(0x100000001b3);
                    }
                }
            }
        }
        format!("{h:016x}")
    }
}

/// Build parameters; defaults are the desk-scale setup.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KmeansConfig {
    pub k: usize,
    pub batch: usize,
    pub max_iters: usize,
    pub seed: u64,
    pub weights: DistanceWeights,
}

impl Default for KmeansConfig {
    fn default() -> Self {
        KmeansConfig {
            k: 64,
            batch: 1000,
            max_iters: 100,
            seed: 7,
            weights: DistanceWeights::default(),
        }
    }
}

fn nearest(centers: &[Vec<[f64; 3]>], p: &[[f64; 3]], w: &DistanceWeights) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centers.iter().enumerate() {
        let d = dist2(c, p, w);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    (best, best_d)
}

fn kmeans_plus_plus(
    data: &[&[[f64; 3]]],
    k: usize,
    w: &DistanceWeights,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<[f64; 3]>> {
    let mut centers: Vec<Vec<[f64; 3]>> = vec![data[rng.gen_range(0..data.len())].to_vec()];
    let mut d2: Vec<f64> = data.iter().map(|p| dist2(&centers[0], p, w)).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut target = rng.gen_range(0.0..total);
            let mut pick = data.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            // All remaining points coincide with a center; any index works.
            rng.gen_range(0..data.len())
        };
        centers.push(data[idx].to_vec());
        for (i, p) in data.iter().enumerate() {
            d2[i] = d2[i].min(dist2(centers.last().unwrap(), p, w));
        }
    }
    centers
}

fn mean_inertia(data: &[&[[f64; 3]]], centers: &[Vec<[f64; 3]>], w: &DistanceWeights) -> f64 {
    data.iter().map(|p| nearest(centers, p, w).1).sum::<f64>() / data.len() as f64
}

/// Mini-batch K-means over normalized futures. Deterministic for a given
/// seed. Centroids are feasibility-projected after convergence.
pub fn build_vocabulary(
    trajectories: &[NormalizedTrajectory],
    cfg: &KmeansConfig,
    vp: &VehicleParams,
) -> Result<ProposalVocabulary, VocabError> {
    let data: Vec<&[[f64; 3]]> = trajectories.iter().map(|t| t.points.as_slice()).collect();
    if data.len() < cfg.k || cfg.k < 2 {
        return Err(VocabError::TooFewInputs { n: data.len(), k: cfg.k });
    }
    let w = cfg.weights;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut centers = kmeans_plus_plus(&data, cfg.k, &w, &mut rng);
    let mut counts = vec![0u64; cfg.k];
    let mut history = Vec::new();
    let mut iterations = 0;
    for it in 0..cfg.max_iters {
        iterations = it + 1;
        // Assign a sampled batch and move each center toward its points with
        // a per-center decaying rate (running mean).
        let batch: Vec<usize> = (0..cfg.batch).map(|_| rng.gen_range(0..data.len())).collect();
        let mut batch_hits = vec![0u64; cfg.k];
        for &bi in &batch {
            let (c, _) = nearest(&centers, data[bi], &w);
            counts[c] += 1;
            batch_hits[c] += 1;
            let eta = 1.0 / counts[c] as f64;
            for (cp, dp) in centers[c].iter_mut().zip(data[bi]) {
                cp[0] += eta * (dp[0] - cp[0]);
                cp[1] += eta * (dp[1] - cp[1]);
                cp[2] += eta * (dp[2] - cp[2]);
            }
        }
        // A center no batch ever claimed restarts at the worst-covered point.
        for c in 0..cfg.k {
            if counts[c] == 0 && batch_hits[c] == 0 {
                let far = batch
                    .iter()
                    .copied()
                    .max_by(|&a, &b| {
                        let da = nearest(&centers, data[a], &w).1;
                        let db = nearest(&centers, data[b], &w).1;
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                centers[c] = data[far].to_vec();
                counts[c] = 1;
            }
        }
        if (it + 1) % 10 == 0 {
            let inertia = mean_inertia(&data, &centers, &w);
            let converged = history
                .last()
                .is_some_and(|&prev: &f64| (prev - inertia).abs() <= 1e-5 * prev.max(1e-12));
            history.push(inertia);
            if converged {
                break;
            }
        }
    }
    // Averaging can break kinematic limits; snap centroids back.
    for c in &mut centers {
        if !is_feasible(c, vp, 1e-6) {
            *c = project_feasible(c, vp);
        }
    }
    let inertia = mean_inertia(&data, &centers, &w);
    let centroids: Vec<NormalizedTrajectory> =
        centers.into_iter().map(|c| NormalizedTrajectory { points: c }).collect();
    for i in 0..centroids.len() {
        for j in i + 1..centroids.len() {
            if st_distance(&centroids[i], &centroids[j], &w) < 1e-9 {
                return Err(VocabError::Degenerate);
            }
        }
    }
    Ok(ProposalVocabulary {
        weights: w,
        centroids,
        meta: KmeansMeta { iterations, inertia, inertia_history: history },
    })
}

/// Index of the nearest centroid; ties keep the lowest index.
pub fn assign_proposal(future: &NormalizedTrajectory, vocab: &ProposalVocabulary) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in vocab.centroids.iter().enumerate() {
        let d = dist2(&c.points, &future.points, &vocab.weights);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

#[derive(Serialize, Deserialize)]
struct VocabDto {
    version: String,
    k: usize,
    points_per_trajectory: usize,
    weights: DistanceWeights,
    meta: KmeansMeta,
    /// Each centroid as a flat [x0, y0, yaw0, x1, ...] array.
    centroids: Vec<Vec<f64>>,
}

/// Write the vocabulary as versioned JSON (atomic rename).
pub fn save_vocabulary(vocab: &ProposalVocabulary, path: &Path) -> Result<(), VocabError> {
    let dto = VocabDto {
        version: VOCAB_VERSION.into(),
        k: vocab.k(),
        points_per_trajectory: FUTURE_LEN,
        weights: vocab.weights,
        meta: vocab.meta.clone(),
        centroids: vocab
            .centroids
            .iter()
            .map(|c| c.points.iter().flat_map(|p| p.iter().copied()).collect())
            .collect(),
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    fs::write(&tmp, serde_json::to_vec_pretty(&dto)?)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Load and validate a vocabulary file.
pub fn load_vocabulary(path: &Path) -> Result<ProposalVocabulary, VocabError> {
    let dto: VocabDto = serde_json::from_slice(&fs::read(path)?)?;
    if dto.version != VOCAB_VERSION {
        return Err(VocabError::Version { found: dto.version });
    }
    let mut centroids = Vec::with_capacity(dto.centroids.len());
    for flat in &dto.centroids {
        if flat.len() != 3 * dto.points_per_trajectory {
            return Err(VocabError::WrongLength { got: flat.len() / 3 });
        }
        centroids.push(NormalizedTrajectory {
            points: flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        });
    }
    if centroids.len() != dto.k || dto.k < 2 {
        return Err(VocabError::Degenerate);
    }
    Ok(ProposalVocabulary { weights: dto.weights, centroids, meta: dto.meta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn vp() -> VehicleParams {
        VehicleParams::default()
    }

    /// Constant-speed, constant-curvature arc from the origin.
    fn arc(v: f64, kappa: f64) -> NormalizedTrajectory {
        let mut pts = Vec::with_capacity(FUTURE_LEN);
        let (mut x, mut y, mut yaw) = (0.0f64, 0.0f64, 0.0f64);
        for _ in 0..FUTURE_LEN {
            pts.push([x, y, yaw]);
            x += v * SIM_DT * yaw.cos();
            y += v * SIM_DT * yaw.sin();
            yaw += kappa * v * SIM_DT;
        }
        NormalizedTrajectory::new(pts).unwrap()
    }

    /// A corpus of feasible arcs spanning speeds and curvatures.
    fn arc_corpus(n: usize, seed: u64) -> Vec<NormalizedTrajectory> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| arc(rng.gen_range(2.0..14.0), rng.gen_range(-0.06..0.06)))
            .collect()
    }

    #[test]
    fn distance_of_identical_trajectories_is_zero() {
        let a = arc(10.0, 0.01);
        assert_eq!(st_distance(&a, &a, &DistanceWeights::default()), 0.0);
    }

    #[test]
    fn constant_offset_distance_is_exact() {
        let a = arc(10.0, 0.0);
        let shifted = NormalizedTrajectory {
            points: a.points.iter().map(|p| [p[0] + 1.0, p[1], p[2]]).collect(),
        };
        let w = DistanceWeights { w_xy: 1.0, w_yaw: 0.0 };
        // Every step offsets by exactly 1 m, so the RMS is 1.
        assert!((st_distance(&a, &shifted, &w) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn full_turn_yaw_offset_is_free() {
        let a = arc(10.0, 0.0);
        let spun = NormalizedTrajectory {
            points: a.points.iter().map(|p| [p[0], p[1], p[2] + std::f64::consts::TAU]).collect(),
        };
        assert!(st_distance(&a, &spun, &DistanceWeights::default()) < 1e-7);
    }

    #[test]
    fn distance_is_symmetric_and_triangular() {
        let w = DistanceWeights::default();
        let corpus = arc_corpus(60, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let a = &corpus[rng.gen_range(0..corpus.len())];
            let b = &corpus[rng.gen_range(0..corpus.len())];
            let c = &corpus[rng.gen_range(0..corpus.len())];
            let ab = st_distance(a, b, &w);
            let ba = st_distance(b, a, &w);
            let bc = st_distance(b, c, &w);
            let ac = st_distance(a, c, &w);
            assert!((ab - ba).abs() < 1e-12);
            assert!(ac <= ab + bc + 1e-9, "triangle violated: {ac} > {ab} + {bc}");
        }
    }

    #[test]
    fn singleton_clusters_recover_the_inputs() {
        let inputs = arc_corpus(8, 5);
        let cfg = KmeansConfig { k: 8, batch: 100, max_iters: 30, ..KmeansConfig::default() };
        let vocab = build_vocabulary(&inputs, &cfg, &vp()).unwrap();
        assert!(vocab.meta.inertia < 1e-18, "inertia {}", vocab.meta.inertia);
        // Every input has a coinciding centroid.
        for t in &inputs {
            let i = assign_proposal(t, &vocab);
            assert!(st_distance(t, &vocab.centroids[i], &vocab.weights) < 1e-9);
        }
    }

    /// Full-batch Lloyd iteration: the oracle for the two-mode build.
    fn lloyd(data: &[NormalizedTrajectory], init: [usize; 2], w: &DistanceWeights) -> Vec<Vec<[f64; 3]>> {
        let mut centers: Vec<Vec<[f64; 3]>> =
            init.iter().map(|&i| data[i].points.clone()).collect();
        for _ in 0..100 {
            let mut sums = vec![vec![[0.0f64; 3]; FUTURE_LEN]; 2];
            let mut counts = [0usize; 2];
            for t in data {
                let mut best = 0;
                if dist2(&centers[1], &t.points, w) < dist2(&centers[0], &t.points, w) {
                    best = 1;
                }
                counts[best] += 1;
                for (s, p) in sums[best].iter_mut().zip(&t.points) {
                    s[0] += p[0];
                    s[1] += p[1];
                    s[2] += p[2];
                }
            }
            let mut moved = 0.0f64;
            for c in 0..2 {
                if counts[c] == 0 {
                    continue;
                }
                for (k, s) in sums[c].iter().enumerate() {
                    let newp = [s[0] / counts[c] as f64, s[1] / counts[c] as f64, s[2] / counts[c] as f64];
                    moved = moved.max((newp[0] - centers[c][k][0]).abs());
                    centers[c][k] = newp;
                }
            }
            if moved < 1e-12 {
                break;
            }
        }
        centers
    }

    #[test]
    fn two_separated_modes_match_the_full_batch_oracle() {
        // Left-turn and right-turn families with speed jitter.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut data = Vec::new();
        for _ in 0..400 {
            data.push(arc(rng.gen_range(7.0..9.0), 0.03));
            data.push(arc(rng.gen_range(7.0..9.0), -0.03));
        }
        let w = DistanceWeights::default();
        let cfg = KmeansConfig { k: 2, batch: 200, max_iters: 100, seed: 1, weights: w };
        let vocab = build_vocabulary(&data, &cfg, &vp()).unwrap();
        // Oracle: Lloyd from one point of each mode.
        let oracle = lloyd(&data, [0, 1], &w);
        let mode_means = [arc(8.0, 0.03), arc(8.0, -0.03)];
        for target in oracle.iter().map(|c| c.as_slice()).chain(mode_means.iter().map(|m| m.points())) {
            let closest = vocab
                .centroids
                .iter()
                .map(|c| dist2(&c.points, target, &w).sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!(closest < 1.0, "no centroid within 1 m of a mode ({closest})");
        }
        // And the two centroids split the modes.
        assert_ne!(
            assign_proposal(&mode_means[0], &vocab),
            assign_proposal(&mode_means[1], &vocab)
        );
    }

    #[test]
    fn desk_default_vocabulary_build() {
        let data = arc_corpus(50_000, 21);
        let cfg = KmeansConfig::default();
        assert_eq!((cfg.k, cfg.batch), (64, 1000));
        let vocab = build_vocabulary(&data, &cfg, &vp()).unwrap();
        assert_eq!(vocab.k(), 64);
        // Full-data inertia never increases between 10-iteration checkpoints.
        for pair in vocab.meta.inertia_history.windows(2) {
            assert!(
                pair[1] <= pair[0] * (1.0 + 1e-6),
                "inertia rose: {} -> {}",
                pair[0],
                pair[1]
            );
        }
        // Centroids stay feasible and pairwise distinct.
        for c in &vocab.centroids {
            assert!(is_feasible(c.points(), &vp(), 1e-3));
        }
        for i in 0..vocab.k() {
            for j in i + 1..vocab.k() {
                assert!(st_distance(&vocab.centroids[i], &vocab.centroids[j], &vocab.weights) > 1e-9);
            }
        }
    }

    #[test]
    fn build_is_deterministic() {
        let data = arc_corpus(500, 9);
        let cfg = KmeansConfig { k: 8, batch: 100, max_iters: 40, ..KmeansConfig::default() };
        let a = build_vocabulary(&data, &cfg, &vp()).unwrap();
        let b = build_vocabulary(&data, &cfg, &vp()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.content_hash(), b.content_hash());
    }

    #[test]
    fn too_few_inputs_is_an_error() {
        let data = arc_corpus(5, 2);
        let cfg = KmeansConfig { k: 8, ..KmeansConfig::default() };
        assert!(matches!(
            build_vocabulary(&data, &cfg, &vp()),
            Err(VocabError::TooFewInputs { n: 5, k: 8 })
        ));
    }

    #[test]
    fn assignment_matches_brute_force() {
        let data = arc_corpus(2000, 13);
        let cfg = KmeansConfig { k: 16, batch: 500, max_iters: 40, ..KmeansConfig::default() };
        let vocab = build_vocabulary(&data, &cfg, &vp()).unwrap();
        let queries = arc_corpus(1000, 14);
        for q in &queries {
            // Independent scan, written long-hand.
            let mut want = usize::MAX;
            let mut want_d = f64::INFINITY;
            for i in 0..vocab.k() {
                let d = st_distance(q, &vocab.centroids[i], &vocab.weights);
                if d < want_d {
                    want_d = d;
                    want = i;
                }
            }
            assert_eq!(assign_proposal(q, &vocab), want);
        }
    }

    #[test]
    fn assignment_ties_keep_the_lowest_index() {
        let data = arc_corpus(200, 17);
        let cfg = KmeansConfig { k: 4, batch: 100, max_iters: 30, ..KmeansConfig::default() };
        let vocab = build_vocabulary(&data, &cfg, &vp()).unwrap();
        let q = vocab.centroids[2].clone();
        assert_eq!(assign_proposal(&q, &vocab), 2);
        // Appending duplicates of every centroid must not change assignments.
        let mut padded = vocab.clone();
        padded.centroids.extend(vocab.centroids.iter().cloned());
        assert_eq!(assign_proposal(&q, &padded), 2);
    }

    #[test]
    fn projection_restores_feasibility() {
        // A jagged zig-zag violates both curvature and acceleration limits.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<[f64; 3]> = (0..FUTURE_LEN)
            .map(|k| {
                let x = k as f64 * 0.9;
                let y = if k % 2 == 0 { 0.0 } else { rng.gen_range(0.5..1.5) };
                [x, y, 0.0]
            })
            .collect();
        assert!(!is_feasible(&pts, &vp(), 1e-6));
        let fixed = project_feasible(&pts, &vp());
        assert!(is_feasible(&fixed, &vp(), 1e-6));
        assert_eq!(fixed.len(), pts.len());
        assert_eq!(&fixed[0][..2], &pts[0][..2]);
        // A feasible arc passes through the projection unchanged.
        let smooth = arc(8.0, 0.02);
        assert!(is_feasible(smooth.points(), &vp(), 1e-6));
    }

    #[test]
    fn normalized_future_starts_at_origin() {
        let sc = crate::scenario::gen::generate_scenario(
            5,
            crate::scenario::ScenarioKind::Curve,
            &crate::scenario::GeneratorConfig::default(),
        )
        .unwrap();
        let t = normalize_future(&sc).unwrap();
        assert_eq!(t.points().len(), FUTURE_LEN);
        assert_eq!(t.points()[0][0], 0.0);
        assert_eq!(t.points()[0][1], 0.0);
    }

    #[test]
    fn vocabulary_file_round_trips_exactly() {
        let data = arc_corpus(300, 31);
        let cfg = KmeansConfig { k: 8, batch: 100, max_iters: 30, ..KmeansConfig::default() };
        let vocab = build_vocabulary(&data, &cfg, &vp()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.json");
        save_vocabulary(&vocab, &path).unwrap();
        let loaded = load_vocabulary(&path).unwrap();
        assert_eq!(loaded, vocab);
        assert_eq!(loaded.content_hash(), vocab.content_hash());
    }

    #[test]
    fn version_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.json");
        fs::write(
            &path,
            r#"{"version":"99","k":2,"points_per_trajectory":80,"weights":{"w_xy":1.0,"w_yaw":1.0},"meta":{"iterations":0,"inertia":0.0,"inertia_history":[]},"centroids":[]}"#,
        )
        .unwrap();
        assert!(matches!(load_vocabulary(&path), Err(VocabError::Version { .. })));
    }
}
