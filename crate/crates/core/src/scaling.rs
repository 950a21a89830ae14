//! Scaling-law laboratory: train a grid of model sizes N against a grid of
//! token budgets D, record the converged held-out loss L for each point, and
//! fit power laws L(x) = (C/x)^alpha on either axis.
//!
//! N counts transformer-block parameters only (input embeddings, position
//! tables, and decoder heads excluded); D counts sequence positions consumed
//! by the optimizer; L is the mean squared displacement (m²) of the
//! teacher-forced trajectory head on a fixed held-out set.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::write_atomic;
use crate::model::seq::{featurize, Features};
use crate::model::train::training_loss;
use crate::model::{ModelConfig, ModelError, Str2Model, POSE_FEAT};
use crate::plot::{LineChart, Series};
use crate::raster::RasterConfig;
use crate::scenario::gen::generate_set;
use crate::scenario::{GeneratorConfig, Scenario, ScenarioError, Split, VehicleParams};
use crate::tensor::optim::{AdamW, AdamWConfig, CosineRestartSchedule};
use crate::vocab::{normalize_future, build_vocabulary, KmeansConfig, ProposalVocabulary, VocabError};

/// One trained grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalePoint {
    /// Transformer-block parameter count (embeddings and heads excluded).
    pub n_params: usize,
    /// Sequence positions consumed by training (steps × batch × seq_len).
    pub tokens: usize,
    /// Final held-out mean squared displacement, m².
    pub loss: f64,
    /// Whether the held-out loss had plateaued by the end of the budget.
    pub converged: bool,
    /// Model width the point was trained at.
    pub dim: usize,
    /// Optimizer steps taken.
    pub steps: usize,
    /// Held-out loss at each evaluation, last entry == `loss`.
    pub eval_losses: Vec<f64>,
}

/// Which axis of the (N, D) grid a fit runs over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleAxis {
    N,
    D,
}

impl ScaleAxis {
    fn name(self) -> &'static str {
        match self {
            ScaleAxis::N => "N",
            ScaleAxis::D => "D",
        }
    }

    fn value(self, p: &ScalePoint) -> f64 {
        match self {
            ScaleAxis::N => p.n_params as f64,
            ScaleAxis::D => p.tokens as f64,
        }
    }
}

/// Least-squares fit of log L = alpha · (log C − log x).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    /// The scale constant C (N_c or D_c): the x at which the fitted L is 1.
    pub scale_const: f64,
    pub alpha: f64,
    /// RMS residual in log-loss space.
    pub residual: f64,
    pub points_used: usize,
}

impl PowerLawFit {
    /// The fitted loss at `x`.
    pub fn predict(&self, x: f64) -> f64 {
        (self.scale_const / x).powf(self.alpha)
    }
}

#[derive(Debug, Error)]
pub enum ScalingError {
    #[error("scaling sweep needs non-empty model and token grids")]
    EmptyGrid,
    #[error("need at least 3 converged points with distinct {axis} values, have {distinct}")]
    TooFewPoints { axis: &'static str, distinct: usize },
    #[error("cannot fit a power law through loss {loss} at {axis} = {x}")]
    NonPositiveLoss { axis: &'static str, x: f64, loss: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Sweep settings: the shared data pools, the optimizer, and the convergence
/// criterion (held-out plateau across `plateau_window` evaluations with
/// relative change below `plateau_rel`).
#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub seed: u64,
    pub train_scenarios: usize,
    pub val_scenarios: usize,
    pub batch_size: usize,
    /// Target number of held-out evaluations per point (≥ plateau_window).
    pub evals_per_run: usize,
    pub plateau_rel: f64,
    pub plateau_window: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub raster: RasterConfig,
    pub generator: GeneratorConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            seed: 0,
            train_scenarios: 96,
            val_scenarios: 24,
            batch_size: 8,
            evals_per_run: 6,
            plateau_rel: 1e-3,
            plateau_window: 3,
            base_lr: 3e-4,
            min_lr: 1e-5,
            raster: RasterConfig::with_resolution(32),
            generator: GeneratorConfig::default(),
        }
    }
}

/// The desk-scale model grid: widths 8–64 with depth and expert shape fixed
/// (3 backbone layers, 1 ViT layer, hidden = 6·dim, 4 experts top-2), which
/// lands the core parameter counts near 10k / 40k / 160k / 640k.
pub fn default_model_grid() -> Vec<ModelConfig> {
    [8usize, 16, 32, 64]
        .into_iter()
        .map(|dim| {
            let n_heads = if dim >= 16 { 4 } else { 2 };
            ModelConfig {
                dim,
                n_layers: 3,
                hidden_dim: 6 * dim,
                n_heads,
                n_kv_heads: n_heads / 2,
                num_experts: 4,
                top_k_experts: 2,
                vit_layers: 1,
                vit_patches: 16,
                patch_dim: 2176,
                vocab_k: 16,
                key_point_times: vec![8.0, 4.0, 2.0, 1.0],
                horizon_t: 80,
                seed: 100 + dim as u64,
            }
        })
        .collect()
}

/// The desk-scale token grid.
pub fn default_token_grid() -> Vec<usize> {
    vec![100_000, 400_000, 1_600_000]
}

/// Shared per-sweep data: featurized pools are built once per model config
/// signature and reused by every token budget.
struct PointJob {
    cfg: ModelConfig,
    token_budget: usize,
    shuffle_seed: u64,
}

/// Mean squared displacement (x, y only) of the teacher-forced trajectory
/// head over a held-out set, evaluated in batches.
fn held_out_l2(model: &Str2Model<f32>, val: &[Features], batch_size: usize) -> f64 {
    let mut se = 0.0f64;
    let mut n = 0usize;
    for chunk in val.chunks(batch_size) {
        let out = model.forward(chunk, None);
        let states = out.states.to_vec();
        let horizon = out.states.shape()[1];
        for (bi, f) in chunk.iter().enumerate() {
            for t in 0..horizon {
                let base = (bi * horizon + t) * POSE_FEAT;
                let dx = states[base] as f64 - f.future[t * POSE_FEAT];
                let dy = states[base + 1] as f64 - f.future[t * POSE_FEAT + 1];
                se += dx * dx + dy * dy;
                n += 1;
            }
        }
    }
    se / n as f64
}

/// Relative change across the last `window` evaluations stays below `rel`.
fn plateaued(evals: &[f64], window: usize, rel: f64) -> bool {
    if evals.len() < window {
        return false;
    }
    let tail = &evals[evals.len() - window..];
    tail.windows(2).all(|w| ((w[0] - w[1]).abs() / w[0].max(1e-12)) < rel)
}

/// Train one grid point for its token budget, evaluating on the cadence the
/// config asks for. Returns the point with its convergence flag.
fn train_point(
    job: &PointJob,
    train: &[Features],
    val: &[Features],
    sweep: &SweepConfig,
) -> Result<ScalePoint, ScalingError> {
    let model = Str2Model::<f32>::new(job.cfg.clone())?;
    let seq = job.cfg.seq_len();
    let tokens_per_step = sweep.batch_size * seq;
    let steps = job.token_budget.div_ceil(tokens_per_step).max(1);
    let eval_stride = steps.div_ceil(sweep.evals_per_run).max(1);

    let schedule =
        CosineRestartSchedule { base_lr: sweep.base_lr, min_lr: sweep.min_lr, steps_per_epoch: steps };
    let mut opt = AdamW::new(model.parameters(), AdamWConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(job.shuffle_seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;

    let mut eval_losses = Vec::new();
    for step in 0..steps {
        let mut batch = Vec::with_capacity(sweep.batch_size);
        for _ in 0..sweep.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(train[order[cursor]].clone());
            cursor += 1;
        }
        let out = model.forward(&batch, None);
        let (loss, parts) = training_loss(&out, &batch);
        if !parts.total.is_finite() {
            return Err(ScalingError::Model(ModelError::NonFinite("total".into(), step)));
        }
        opt.zero_grad();
        loss.backward();
        opt.step(schedule.lr_at(step));

        if (step + 1) % eval_stride == 0 || step + 1 == steps {
            eval_losses.push(held_out_l2(&model, val, sweep.batch_size));
        }
    }

    let loss = *eval_losses.last().expect("at least one evaluation");
    Ok(ScalePoint {
        n_params: model.param_count_core(),
        tokens: steps * tokens_per_step,
        loss,
        converged: plateaued(&eval_losses, sweep.plateau_window, sweep.plateau_rel),
        dim: job.cfg.dim,
        steps,
        eval_losses,
    })
}

/// Train every (model, token budget) grid point and return one [`ScalePoint`]
/// per combination, model-major. Points are independent, so `workers` only
/// changes scheduling, never results.
pub fn run_sweep(
    models: &[ModelConfig],
    token_grid: &[usize],
    sweep: &SweepConfig,
    workers: usize,
) -> Result<Vec<ScalePoint>, ScalingError> {
    if models.is_empty() || token_grid.is_empty() {
        return Err(ScalingError::EmptyGrid);
    }
    // Shared scenario pools; train and val drawn from disjoint seed ranges.
    let train_set =
        generate_set(sweep.train_scenarios, sweep.seed.wrapping_mul(1000) + 1, Split::Train, &sweep.generator)?;
    let val_set = generate_set(
        sweep.val_scenarios,
        sweep.seed.wrapping_mul(1000) + 500_000,
        Split::Val,
        &sweep.generator,
    )?;

    // One featurized pool per model config (the grid shares raster/vocab
    // shapes, but featurize per config keeps mixed grids correct).
    let vp = VehicleParams::default();
    let mut pools: Vec<(Vec<Features>, Vec<Features>)> = Vec::with_capacity(models.len());
    let mut vocab_cache: Vec<(usize, ProposalVocabulary)> = Vec::new();
    for cfg in models {
        let vocab = match vocab_cache.iter().find(|(k, _)| *k == cfg.vocab_k) {
            Some((_, v)) => v.clone(),
            None => {
                let futures: Result<Vec<_>, _> =
                    train_set.scenarios.iter().map(normalize_future).collect();
                let kcfg = KmeansConfig { k: cfg.vocab_k, seed: sweep.seed ^ 0x5ca1e, ..KmeansConfig::default() };
                let v = build_vocabulary(&futures?, &kcfg, &vp)?;
                vocab_cache.push((cfg.vocab_k, v));
                vocab_cache.last().unwrap().1.clone()
            }
        };
        let feats = |scs: &[Scenario]| -> Result<Vec<Features>, ScalingError> {
            scs.iter().map(|s| Ok(featurize(s, &sweep.raster, cfg, &vocab)?)).collect()
        };
        pools.push((feats(&train_set.scenarios)?, feats(&val_set.scenarios)?));
    }

    let jobs: Vec<(usize, PointJob)> = models
        .iter()
        .enumerate()
        .flat_map(|(mi, cfg)| {
            token_grid.iter().enumerate().map(move |(di, &d)| {
                let idx = mi * token_grid.len() + di;
                (
                    idx,
                    PointJob {
                        cfg: cfg.clone(),
                        token_budget: d,
                        shuffle_seed: sweep.seed ^ ((idx as u64 + 1) << 32),
                    },
                )
            })
        })
        .collect();

    let results: Mutex<Vec<Option<Result<ScalePoint, ScalingError>>>> =
        Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let n_workers = workers.max(1).min(jobs.len());
    std::thread::scope(|scope| {
        for _ in 0..n_workers {
            scope.spawn(|| loop {
                let j = next.fetch_add(1, Ordering::SeqCst);
                if j >= jobs.len() {
                    break;
                }
                let (idx, job) = &jobs[j];
                let mi = idx / token_grid.len();
                let (train, val) = &pools[mi];
                let point = train_point(job, train, val, sweep);
                results.lock().unwrap()[*idx] = Some(point);
            });
        }
    });
    results.into_inner().unwrap().into_iter().map(|r| r.expect("every job ran")).collect()
}

/// Fit log L = alpha · (log C − log x) by least squares over the converged
/// points. Non-converged points are excluded.
pub fn fit_power_law(points: &[ScalePoint], axis: ScaleAxis) -> Result<PowerLawFit, ScalingError> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for p in points.iter().filter(|p| p.converged) {
        let x = axis.value(p);
        if !(p.loss > 0.0) || !p.loss.is_finite() {
            return Err(ScalingError::NonPositiveLoss { axis: axis.name(), x, loss: p.loss });
        }
        xs.push(x.ln());
        ys.push(p.loss.ln());
    }
    let mut distinct = xs.clone();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(ScalingError::TooFewPoints { axis: axis.name(), distinct: distinct.len() });
    }

    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;

    let alpha = -slope;
    // ln C = intercept / alpha; a flat fit (alpha == 0) leaves C unidentified.
    let scale_const = if alpha.abs() < 1e-15 { 1.0 } else { (intercept / alpha).exp() };
    let residual = (xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            let e = y - (slope * x + intercept);
            e * e
        })
        .sum::<f64>()
        / n)
        .sqrt();
    Ok(PowerLawFit { scale_const, alpha, residual, points_used: xs.len() })
}

/// Spearman rank correlation (average ranks on ties).
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len(), "paired samples");
    let rx = ranks(xs);
    let ry = ranks(ys);
    let n = rx.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx.sqrt() * syy.sqrt()).max(1e-300)
}

fn ranks(vs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..vs.len()).collect();
    idx.sort_by(|&a, &b| vs[a].partial_cmp(&vs[b]).unwrap());
    let mut out = vec![0.0; vs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && vs[idx[j + 1]] == vs[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// `scaling.csv`: one row per point with the fit inputs and the flag.
pub fn write_scaling_csv(path: &Path, points: &[ScalePoint]) -> Result<(), ScalingError> {
    let mut out = String::from("n_params,tokens,loss,converged,dim,steps\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            p.n_params, p.tokens, p.loss, p.converged, p.dim, p.steps
        ));
    }
    write_atomic(path, &out)?;
    Ok(())
}

fn short_num(v: f64) -> String {
    if v >= 1e4 {
        format!("{:e}", v)
    } else {
        format!("{}", v)
    }
}

/// Log-log loss plots: `scaling_N.svg` (one series per token budget, fitted
/// line over the converged points) and `scaling_D.svg` (one series per model
/// size). Returns the written paths.
pub fn write_scaling_plots(
    dir: &Path,
    points: &[ScalePoint],
    fit_n: Option<&PowerLawFit>,
    fit_d: Option<&PowerLawFit>,
) -> Result<Vec<PathBuf>, ScalingError> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();

    let mut by_tokens: Vec<usize> = points.iter().map(|p| p.tokens).collect();
    by_tokens.sort_unstable();
    by_tokens.dedup();
    let mut series: Vec<Series> = by_tokens
        .iter()
        .map(|&d| {
            let mut pts: Vec<(f64, f64)> =
                points.iter().filter(|p| p.tokens == d).map(|p| (p.n_params as f64, p.loss)).collect();
            pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            Series::new(&format!("D={}", short_num(d as f64)), pts)
        })
        .collect();
    if let Some(fit) = fit_n {
        let (lo, hi) = axis_range(points, ScaleAxis::N);
        series.push(Series::dashed(
            &format!("fit α={:.3}", fit.alpha),
            vec![(lo, fit.predict(lo)), (hi, fit.predict(hi))],
        ));
    }
    let chart_n = LineChart {
        title: "held-out loss vs model size".into(),
        x_label: "N (core parameters)".into(),
        y_label: "L (m², held-out)".into(),
        log_x: true,
        log_y: true,
        series,
    };
    let path_n = dir.join("scaling_N.svg");
    write_atomic(&path_n, &chart_n.to_svg())?;
    written.push(path_n);

    let mut by_dim: Vec<usize> = points.iter().map(|p| p.dim).collect();
    by_dim.sort_unstable();
    by_dim.dedup();
    let mut series: Vec<Series> = by_dim
        .iter()
        .map(|&dim| {
            let mut pts: Vec<(f64, f64)> =
                points.iter().filter(|p| p.dim == dim).map(|p| (p.tokens as f64, p.loss)).collect();
            pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            let n = points.iter().find(|p| p.dim == dim).map(|p| p.n_params).unwrap_or(0);
            Series::new(&format!("N={}", short_num(n as f64)), pts)
        })
        .collect();
    if let Some(fit) = fit_d {
        let (lo, hi) = axis_range(points, ScaleAxis::D);
        series.push(Series::dashed(
            &format!("fit α={:.3}", fit.alpha),
            vec![(lo, fit.predict(lo)), (hi, fit.predict(hi))],
        ));
    }
    let chart_d = LineChart {
        title: "held-out loss vs training tokens".into(),
        x_label: "D (tokens consumed)".into(),
        y_label: "L (m², held-out)".into(),
        log_x: true,
        log_y: true,
        series,
    };
    let path_d = dir.join("scaling_D.svg");
    write_atomic(&path_d, &chart_d.to_svg())?;
    written.push(path_d);
    Ok(written)
}

fn axis_range(points: &[ScalePoint], axis: ScaleAxis) -> (f64, f64) {
    let lo = points.iter().map(|p| axis.value(p)).fold(f64::INFINITY, f64::min);
    let hi = points.iter().map(|p| axis.value(p)).fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn synthetic_points(ns: &[f64], nc: f64, alpha: f64) -> Vec<ScalePoint> {
        ns.iter()
            .map(|&n| ScalePoint {
                n_params: n as usize,
                tokens: 100_000,
                loss: (nc / n).powf(alpha),
                converged: true,
                dim: 8,
                steps: 1,
                eval_losses: vec![],
            })
            .collect()
    }

    #[test]
    fn default_grids_span_twelve_points() {
        let models = default_model_grid();
        let tokens = default_token_grid();
        assert_eq!(models.len() * tokens.len(), 12);
        // Each width doubling roughly quadruples the core parameter count.
        let counts: Vec<usize> = models
            .iter()
            .map(|cfg| Str2Model::<f32>::new(cfg.clone()).unwrap().param_count_core())
            .collect();
        for w in counts.windows(2) {
            let ratio = w[1] as f64 / w[0] as f64;
            assert!((3.0..5.0).contains(&ratio), "count ratio {ratio}");
        }
        assert!(counts[0] >= 5_000 && counts[0] <= 20_000, "smallest {}", counts[0]);
        assert!(counts[3] >= 400_000 && counts[3] <= 1_000_000, "largest {}", counts[3]);
    }

    #[test]
    fn core_parameter_count_matches_the_closed_form_sum() {
        let cfg = ModelConfig::tiny();
        let model = Str2Model::<f32>::new(cfg.clone()).unwrap();
        let d = cfg.dim;
        let h = cfg.hidden_dim;
        let hd = d / cfg.n_heads;
        let kv = cfg.n_kv_heads * hd;
        let ln = 2 * d;
        let dense_ff = d * h + h + h * d + d;
        // ViT attention is full multi-head: all four projections are d×d.
        let vit_block = ln + 4 * d * d + ln + dense_ff;
        // Backbone attention groups the KV heads: k and v project d×kv.
        let bb_attn = d * d + d * kv + d * kv + d * d;
        let moe = cfg.num_experts * dense_ff + d * cfg.num_experts;
        let backbone_block = ln + bb_attn + ln + moe;
        // Both stacks end in a LayerNorm that belongs to the core count.
        let expected =
            cfg.vit_layers * vit_block + ln + cfg.n_layers * backbone_block + ln;
        assert_eq!(model.param_count_core(), expected);
    }

    fn micro_grid() -> Vec<ModelConfig> {
        [8usize, 16]
            .into_iter()
            .map(|dim| ModelConfig {
                dim,
                n_layers: 1,
                hidden_dim: 2 * dim,
                n_heads: 2,
                n_kv_heads: 1,
                num_experts: 2,
                top_k_experts: 1,
                vit_layers: 1,
                vit_patches: 4,
                patch_dim: 544,
                vocab_k: 4,
                key_point_times: vec![8.0, 4.0, 2.0, 1.0],
                horizon_t: 80,
                seed: 3 + dim as u64,
            })
            .collect()
    }

    fn micro_sweep_cfg() -> SweepConfig {
        SweepConfig {
            train_scenarios: 12,
            val_scenarios: 4,
            batch_size: 4,
            evals_per_run: 3,
            raster: RasterConfig::with_resolution(8),
            ..SweepConfig::default()
        }
    }

    #[test]
    fn sweep_yields_one_point_per_grid_cell_and_is_deterministic() {
        let models = micro_grid();
        let tokens = vec![2_000usize, 4_000];
        let cfg = micro_sweep_cfg();
        let points = run_sweep(&models, &tokens, &cfg, 2).unwrap();
        assert_eq!(points.len(), 4, "2 models × 2 budgets");
        for (i, p) in points.iter().enumerate() {
            let budget = tokens[i % 2];
            assert!(p.tokens >= budget, "consumed at least the budget");
            assert!(p.loss.is_finite() && p.loss > 0.0);
            assert_eq!(p.dim, models[i / 2].dim);
        }
        let again = run_sweep(&models, &tokens, &cfg, 1).unwrap();
        assert_eq!(points, again, "same seed and grid must reproduce every loss");
    }

    #[test]
    fn exact_power_law_is_recovered() {
        let points = synthetic_points(&[1e4, 4e4, 1.6e5, 6.4e5], 1e6, 0.5);
        let fit = fit_power_law(&points, ScaleAxis::N).unwrap();
        assert!((fit.alpha - 0.5).abs() < 1e-9, "alpha {}", fit.alpha);
        assert!((fit.scale_const / 1e6 - 1.0).abs() < 1e-9, "N_c {}", fit.scale_const);
        assert!(fit.residual < 1e-12);
        assert_eq!(fit.points_used, 4);
    }

    #[test]
    fn one_percent_noise_keeps_alpha_within_five_percent() {
        let ns = [1e4, 2e4, 4e4, 8e4, 1.6e5, 3.2e5, 6.4e5];
        let mut points = synthetic_points(&ns, 1e6, 0.42);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for p in &mut points {
            p.loss *= 1.0 + 0.01 * (rng.gen::<f64>() * 2.0 - 1.0);
        }
        let fit = fit_power_law(&points, ScaleAxis::N).unwrap();
        assert!(
            (fit.alpha - 0.42).abs() / 0.42 < 0.05,
            "alpha {} strayed more than 5% from 0.42",
            fit.alpha
        );
    }

    #[test]
    fn fit_is_scale_equivariant() {
        let base = synthetic_points(&[1e4, 1e5, 1e6], 2e6, 0.37);
        let fit = fit_power_law(&base, ScaleAxis::N).unwrap();
        let c = 7.5;
        let scaled: Vec<ScalePoint> = base
            .iter()
            .map(|p| ScalePoint { n_params: (p.n_params as f64 * c) as usize, ..p.clone() })
            .collect();
        // Rebuild with exact multiplication to avoid usize truncation noise.
        let scaled: Vec<ScalePoint> = scaled
            .into_iter()
            .zip(&base)
            .map(|(mut s, b)| {
                s.n_params = b.n_params * 15 / 2;
                s
            })
            .collect();
        let fit2 = fit_power_law(&scaled, ScaleAxis::N).unwrap();
        assert!((fit2.alpha - fit.alpha).abs() < 1e-9);
        assert!((fit2.scale_const / (fit.scale_const * c) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn degenerate_fits_are_rejected() {
        let two = synthetic_points(&[1e4, 1e5], 1e6, 0.5);
        assert!(matches!(
            fit_power_law(&two, ScaleAxis::N),
            Err(ScalingError::TooFewPoints { distinct: 2, .. })
        ));

        // Non-converged points do not count toward distinctness.
        let mut four = synthetic_points(&[1e4, 4e4, 1.6e5, 6.4e5], 1e6, 0.5);
        four[0].converged = false;
        four[1].converged = false;
        assert!(fit_power_law(&four, ScaleAxis::N).is_err());

        let mut bad = synthetic_points(&[1e4, 4e4, 1.6e5], 1e6, 0.5);
        bad[1].loss = 0.0;
        assert!(matches!(
            fit_power_law(&bad, ScaleAxis::N),
            Err(ScalingError::NonPositiveLoss { .. })
        ));
    }

    #[test]
    fn non_converged_points_are_excluded_from_the_fit() {
        let mut points = synthetic_points(&[1e4, 4e4, 1.6e5, 6.4e5], 1e6, 0.5);
        points.push(ScalePoint {
            n_params: 2_000_000,
            tokens: 100_000,
            loss: 500.0, // wildly off the law; must not touch the fit
            converged: false,
            dim: 128,
            steps: 1,
            eval_losses: vec![],
        });
        let fit = fit_power_law(&points, ScaleAxis::N).unwrap();
        assert_eq!(fit.points_used, 4);
        assert!((fit.alpha - 0.5).abs() < 1e-9);
    }

    #[test]
    fn spearman_matches_known_cases() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&xs, &[10.0, 8.0, 5.0, 1.0]) + 1.0).abs() < 1e-12);
        assert!((spearman(&xs, &[1.0, 3.0, 5.0, 9.0]) - 1.0).abs() < 1e-12);
        // Ties get averaged ranks.
        let r = spearman(&[1.0, 2.0, 2.0, 3.0], &[4.0, 3.0, 2.0, 1.0]);
        assert!(r < -0.9 && r >= -1.0);
    }

    #[test]
    fn csv_and_plots_cover_every_point() {
        let points = synthetic_points(&[1e4, 4e4, 1.6e5], 1e6, 0.5);
        let fit = fit_power_law(&points, ScaleAxis::N).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("scaling.csv");
        write_scaling_csv(&csv, &points).unwrap();
        let text = std::fs::read_to_string(&csv).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("n_params,tokens,loss,converged,dim,steps"));

        let written = write_scaling_plots(dir.path(), &points, Some(&fit), None).unwrap();
        assert_eq!(written.len(), 2);
        for p in &written {
            let svg = std::fs::read_to_string(p).unwrap();
            assert!(svg.starts_with("<svg") && !svg.contains("NaN"));
        }
        assert!(std::fs::read_to_string(&written[0]).unwrap().contains("fit"));
    }
}
