//! Scenario featurization and the teacher-forced forward pass.
//!
//! Token order per example: raster patches for both images, the past ego
//! states, the assigned proposal, the key points coarse-to-fine, then all
//! future states. Every prediction is read from the hidden state one position
//! before the token it predicts.

use super::layers::causal_mask;
use super::{ModelConfig, ModelError, Str2Model, EGO_FEAT, POSE_FEAT};
use crate::raster::{patchify, rasterize, RasterConfig};
use crate::scenario::{Scenario, HISTORY_LEN};
use crate::tensor::{Real, Tensor};
use crate::vocab::{assign_proposal, normalize_future, ProposalVocabulary};

/// Model inputs that exist before any plan is made: the rasters and the past.
#[derive(Debug, Clone)]
pub struct ContextFeatures {
    /// Both images' patches, flattened booleans as 0/1.
    pub patches: Vec<f64>,
    /// `HISTORY_LEN` rows of (x, y, yaw, v, a, steer) in the ego-now frame.
    pub ego: Vec<f64>,
}

/// A full teacher-forcing example: context plus the ground-truth plan tokens.
#[derive(Debug, Clone)]
pub struct Features {
    pub ctx: ContextFeatures,
    pub proposal_id: usize,
    /// The assigned centroid, flattened (horizon * 3), normalized frame.
    pub centroid: Vec<f64>,
    /// Future states as raw (x, y, yaw) triples in the ego-now frame.
    pub future: Vec<f64>,
    /// The future triples at the key-point times, coarse to fine.
    pub key_points: Vec<f64>,
}

/// Rasterize and embed-ready-pack the pre-decision inputs.
pub fn featurize_context(
    scenario: &Scenario,
    raster_cfg: &RasterConfig,
    cfg: &ModelConfig,
) -> Result<ContextFeatures, ModelError> {
    let grid = (cfg.vit_patches as f64).sqrt().round() as usize;
    if grid * grid != cfg.vit_patches {
        return Err(ModelError::Config(format!("vit_patches {} is not square", cfg.vit_patches)));
    }
    let stack = rasterize(scenario, HISTORY_LEN - 1, raster_cfg);
    let patch_vecs = patchify(&stack, grid)?;
    if patch_vecs.len() != 2 * cfg.vit_patches || patch_vecs[0].len() != cfg.patch_dim {
        return Err(ModelError::Config(format!(
            "raster yields {} patches of {}, model expects {} of {}",
            patch_vecs.len(),
            patch_vecs[0].len(),
            2 * cfg.vit_patches,
            cfg.patch_dim
        )));
    }
    let patches: Vec<f64> = patch_vecs
        .iter()
        .flat_map(|p| p.iter().map(|&b| if b { 1.0 } else { 0.0 }))
        .collect();

    let now = *scenario.ego_now();
    let mut ego = Vec::with_capacity(HISTORY_LEN * EGO_FEAT);
    for st in &scenario.ego_history {
        let rel = st.pose.into_frame(&now.pose);
        ego.extend_from_slice(&[rel.x, rel.y, rel.yaw, st.velocity, st.acceleration, st.steering]);
    }
    Ok(ContextFeatures { patches, ego })
}

/// Future states as raw ego-now-frame triples (no origin shift — unlike the
/// proposal normalization, regression targets keep the 0.1 s lead-in offset).
pub fn future_triples(scenario: &Scenario) -> Vec<f64> {
    let now = scenario.ego_now().pose;
    scenario
        .ego_future
        .iter()
        .flat_map(|st| {
            let rel = st.pose.into_frame(&now);
            [rel.x, rel.y, rel.yaw]
        })
        .collect()
}

/// Build a full training example from a scenario.
pub fn featurize(
    scenario: &Scenario,
    raster_cfg: &RasterConfig,
    cfg: &ModelConfig,
    vocab: &ProposalVocabulary,
) -> Result<Features, ModelError> {
    if vocab.k() != cfg.vocab_k {
        return Err(ModelError::VocabMismatch { expected: cfg.vocab_k, got: vocab.k() });
    }
    let ctx = featurize_context(scenario, raster_cfg, cfg)?;
    let norm = normalize_future(scenario)?;
    let proposal_id = assign_proposal(&norm, vocab);
    let centroid: Vec<f64> =
        vocab.centroids[proposal_id].points().iter().flatten().copied().collect();
    let future = future_triples(scenario);
    let key_points: Vec<f64> = cfg
        .key_point_indices()
        .iter()
        .flat_map(|&i| future[i * POSE_FEAT..(i + 1) * POSE_FEAT].to_vec())
        .collect();
    Ok(Features { ctx, proposal_id, centroid, future, key_points })
}

/// Everything one teacher-forced forward produces.
pub struct ModelOutput<T: Real> {
    /// (B, K) proposal logits read before the proposal token.
    pub proposal_logits: Tensor<T>,
    /// (B, n_key_points, 3) predictions.
    pub key_points: Tensor<T>,
    /// (B, horizon, 3) predictions.
    pub states: Tensor<T>,
    /// Load-balance term, mean over backbone layers; 1.0 under uniform load.
    pub aux: Tensor<T>,
    /// Per-layer tokens routed to each expert.
    pub expert_counts: Vec<Vec<usize>>,
    /// Per-layer routing (top_k expert ids per token row), reusable as
    /// `frozen_routing` in a later forward.
    pub routing: Vec<Vec<usize>>,
}

impl<T: Real> Str2Model<T> {
    /// Encode a batch of raster images: (NI, P, patch_dim) -> (NI, P, dim).
    fn encode_patches(&self, patches: &Tensor<T>) -> Tensor<T> {
        let p = patches.shape()[1];
        let mask = causal_mask::<T>(p);
        let mut x = patches.matmul(&self.patch_proj_w).add(&self.patch_proj_b).add(&self.vit_pos);
        for blk in &self.vit_blocks {
            x = x.add(&blk.attn.forward(&blk.ln1.forward(&x), Some(&mask)));
            x = x.add(&blk.ff.forward(&blk.ln2.forward(&x)));
        }
        self.vit_ln_f.forward(&x)
    }

    /// Token type per sequence position: raster, past ego, proposal, pose.
    fn type_ids(&self) -> Vec<usize> {
        let cfg = &self.cfg;
        let mut ids = vec![0usize; cfg.seq_len()];
        for (pos, id) in ids.iter_mut().enumerate() {
            *id = if pos < 2 * cfg.vit_patches {
                0
            } else if pos < cfg.context_len() {
                1
            } else if pos == cfg.proposal_pos() {
                2
            } else {
                3
            };
        }
        ids
    }

    /// Teacher-forced forward over full token sequences.
    ///
    /// `frozen_routing`, when given, fixes each backbone layer's expert
    /// assignment (finite-difference checks differentiate at a fixed routing).
    pub fn forward(&self, batch: &[Features], frozen_routing: Option<&[Vec<usize>]>) -> ModelOutput<T> {
        let cfg = &self.cfg;
        let b = batch.len();
        assert!(b > 0, "empty batch");
        let (d, s) = (cfg.dim, cfg.seq_len());
        let n_kp = cfg.n_key_points();
        let to_t = |vals: &mut Vec<T>, src: &[f64]| vals.extend(src.iter().map(|&v| T::from_f64(v)));

        // Pack the batch into flat buffers.
        let mut patch_v = Vec::with_capacity(b * 2 * cfg.vit_patches * cfg.patch_dim);
        let mut ego_v = Vec::with_capacity(b * HISTORY_LEN * EGO_FEAT);
        let mut centroid_v = Vec::with_capacity(b * cfg.horizon_t * POSE_FEAT);
        let mut kp_v = Vec::with_capacity(b * n_kp * POSE_FEAT);
        let mut state_v = Vec::with_capacity(b * cfg.horizon_t * POSE_FEAT);
        for f in batch {
            to_t(&mut patch_v, &f.ctx.patches);
            to_t(&mut ego_v, &f.ctx.ego);
            to_t(&mut centroid_v, &f.centroid);
            to_t(&mut kp_v, &f.key_points);
            to_t(&mut state_v, &f.future);
        }

        // Embed each modality.
        let raster = self
            .encode_patches(&Tensor::from_vec(
                &[b * 2, cfg.vit_patches, cfg.patch_dim],
                patch_v,
            ))
            .reshape(&[b, 2 * cfg.vit_patches, d]);
        let ego = Tensor::from_vec(&[b * HISTORY_LEN, EGO_FEAT], ego_v)
            .matmul(&self.ego_embed_w)
            .add(&self.ego_embed_b)
            .reshape(&[b, HISTORY_LEN, d]);
        let proposal = Tensor::from_vec(&[b, cfg.horizon_t * POSE_FEAT], centroid_v)
            .matmul(&self.proposal_embed_w)
            .add(&self.proposal_embed_b)
            .reshape(&[b, 1, d]);
        let kp = Tensor::from_vec(&[b * n_kp, POSE_FEAT], kp_v)
            .matmul(&self.pose_embed_w)
            .add(&self.pose_embed_b)
            .reshape(&[b, n_kp, d]);
        let states = Tensor::from_vec(&[b * cfg.horizon_t, POSE_FEAT], state_v)
            .matmul(&self.pose_embed_w)
            .add(&self.pose_embed_b)
            .reshape(&[b, cfg.horizon_t, d]);

        let mut x = crate::tensor::ops::concat(&[&raster, &ego, &proposal, &kp, &states], 1)
            .add(&self.pos_embed)
            .add(&self.type_embed.gather_rows(&self.type_ids()));

        // Backbone.
        let mask = causal_mask::<T>(s);
        let mut aux_sum: Option<Tensor<T>> = None;
        let mut expert_counts = Vec::with_capacity(cfg.n_layers);
        let mut routing = Vec::with_capacity(cfg.n_layers);
        for (li, blk) in self.blocks.iter().enumerate() {
            x = x.add(&blk.attn.forward(&blk.ln1.forward(&x), Some(&mask)));
            let flat = blk.ln2.forward(&x).reshape(&[b * s, d]);
            let frozen = frozen_routing.map(|f| f[li].as_slice());
            let (moe_out, stats) = blk.moe.forward(&flat, frozen);
            x = x.add(&moe_out.reshape(&[b, s, d]));
            aux_sum = Some(match aux_sum {
                Some(a) => a.add(&stats.aux),
                None => stats.aux,
            });
            expert_counts.push(stats.counts);
            routing.push(stats.routing);
        }
        let h = self.ln_f.forward(&x);

        // Heads, each reading the hidden state before its token.
        let pp = cfg.proposal_pos();
        let proposal_logits = h
            .slice_axis(1, pp - 1, pp)
            .reshape(&[b, d])
            .matmul(&self.proposal_head_w)
            .add(&self.proposal_head_b);
        let key_points = self.kp_head.forward(&h.slice_axis(1, pp, pp + n_kp));
        let first_state = cfg.first_state_pos();
        let states =
            self.state_head.forward(&h.slice_axis(1, first_state - 1, first_state - 1 + cfg.horizon_t));
        let aux = aux_sum.expect("at least one layer").mul_scalar(1.0 / cfg.n_layers as f64);

        ModelOutput { proposal_logits, key_points, states, aux, expert_counts, routing }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Synthetic features with plausible magnitudes; no scenario needed.
    pub(crate) fn synthetic_features(cfg: &ModelConfig, seed: u64) -> Features {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let patches: Vec<f64> =
            (0..2 * cfg.vit_patches * cfg.patch_dim).map(|_| f64::from(rng.gen_bool(0.05) as u8)).collect();
        let ego: Vec<f64> = (0..HISTORY_LEN * EGO_FEAT).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let centroid: Vec<f64> =
            (0..cfg.horizon_t * POSE_FEAT).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let future: Vec<f64> =
            (0..cfg.horizon_t * POSE_FEAT).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let key_points: Vec<f64> = cfg
            .key_point_indices()
            .iter()
            .flat_map(|&i| future[i * POSE_FEAT..(i + 1) * POSE_FEAT].to_vec())
            .collect();
        Features {
            ctx: ContextFeatures { patches, ego },
            proposal_id: rng.gen_range(0..cfg.vocab_k),
            centroid,
            future,
            key_points,
        }
    }

    /// A config one notch smaller than tiny, for fast structural tests.
    pub(crate) fn micro_config() -> ModelConfig {
        ModelConfig {
            dim: 16,
            n_layers: 2,
            hidden_dim: 32,
            n_heads: 4,
            n_kv_heads: 2,
            num_experts: 4,
            top_k_experts: 2,
            vit_layers: 1,
            vit_patches: 4,
            patch_dim: 34 * 4 * 4,
            vocab_k: 8,
            key_point_times: vec![8.0, 4.0, 2.0, 1.0],
            horizon_t: 80,
            seed: 0,
        }
    }

    #[test]
    fn forward_output_shapes_and_routing_budget() {
        let cfg = micro_config();
        let model: Str2Model<f32> = Str2Model::new(cfg.clone()).unwrap();
        let batch = vec![synthetic_features(&cfg, 1), synthetic_features(&cfg, 2)];
        let out = model.forward(&batch, None);
        assert_eq!(out.proposal_logits.shape(), &[2, cfg.vocab_k]);
        assert_eq!(out.key_points.shape(), &[2, 4, 3]);
        assert_eq!(out.states.shape(), &[2, 80, 3]);
        assert_eq!(out.expert_counts.len(), cfg.n_layers);
        let budget = 2 * cfg.seq_len() * cfg.top_k_experts;
        for counts in &out.expert_counts {
            assert_eq!(counts.iter().sum::<usize>(), budget);
        }
        assert!(out.aux.item().is_finite());
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = micro_config();
        let model: Str2Model<f32> = Str2Model::new(cfg.clone()).unwrap();
        let batch = vec![synthetic_features(&cfg, 3)];
        let a = model.forward(&batch, None);
        let b = model.forward(&batch, None);
        assert_eq!(a.proposal_logits.to_vec(), b.proposal_logits.to_vec());
        assert_eq!(a.states.to_vec(), b.states.to_vec());
        assert_eq!(a.routing, b.routing);
    }

    #[test]
    fn future_tokens_cannot_reach_earlier_predictions() {
        let cfg = micro_config();
        let model: Str2Model<f32> = Str2Model::new(cfg.clone()).unwrap();
        let base = synthetic_features(&cfg, 4);

        // Rewriting the last future state changes no prediction at all: its
        // token sits at the final position, after every read point.
        let mut tail = base.clone();
        for v in &mut tail.future[79 * 3..] {
            *v += 10.0;
        }
        let a = model.forward(&[base.clone()], None);
        let b = model.forward(&[tail], None);
        assert_eq!(a.proposal_logits.to_vec(), b.proposal_logits.to_vec());
        assert_eq!(a.key_points.to_vec(), b.key_points.to_vec());
        assert_eq!(a.states.to_vec(), b.states.to_vec());

        // Rewriting the proposal token leaves the proposal logits (read one
        // position earlier) bit-identical but changes downstream predictions.
        let mut prop = base.clone();
        for v in &mut prop.centroid {
            *v += 10.0;
        }
        let c = model.forward(&[prop], None);
        assert_eq!(a.proposal_logits.to_vec(), c.proposal_logits.to_vec());
        assert!(a.states.to_vec() != c.states.to_vec());

        // Rewriting future state 10 changes only state predictions 11+.
        let mut mid = base.clone();
        for v in &mut mid.future[10 * 3..11 * 3] {
            *v += 10.0;
        }
        let e = model.forward(&[mid], None);
        assert_eq!(a.proposal_logits.to_vec(), e.proposal_logits.to_vec());
        assert_eq!(a.key_points.to_vec(), e.key_points.to_vec());
        let (av, ev) = (a.states.to_vec(), e.states.to_vec());
        assert_eq!(&av[..11 * 3], &ev[..11 * 3], "states 0..=10 must be untouched");
        assert!(av[11 * 3..] != ev[11 * 3..]);
    }

    #[test]
    fn featurize_packs_expected_values() {
        use crate::scenario::{gen::generate_scenario, GeneratorConfig, ScenarioKind};
        use crate::vocab::{DistanceWeights, KmeansMeta, NormalizedTrajectory, ProposalVocabulary};
        let cfg = ModelConfig::tiny();
        let raster_cfg = crate::raster::RasterConfig::default();
        let sc = generate_scenario(21, ScenarioKind::Straight, &GeneratorConfig::default()).unwrap();
        // Straight-line constant-speed centroids at 64 different speeds.
        let centroids: Vec<NormalizedTrajectory> = (0..cfg.vocab_k)
            .map(|i| {
                let v = 0.3 * i as f64;
                NormalizedTrajectory::new(
                    (0..cfg.horizon_t).map(|t| [v * t as f64 * 0.1, 0.0, 0.0]).collect(),
                )
                .unwrap()
            })
            .collect();
        let vocab = ProposalVocabulary {
            weights: DistanceWeights::default(),
            centroids,
            meta: KmeansMeta { iterations: 0, inertia: 0.0, inertia_history: vec![] },
        };

        let f = featurize(&sc, &raster_cfg, &cfg, &vocab).unwrap();
        assert_eq!(f.ctx.patches.len(), 2 * cfg.vit_patches * cfg.patch_dim);
        assert!(f.ctx.patches.iter().any(|&v| v == 1.0));
        assert_eq!(f.ctx.ego.len(), HISTORY_LEN * EGO_FEAT);
        assert_eq!(f.future.len(), cfg.horizon_t * POSE_FEAT);
        assert_eq!(f.key_points.len(), 4 * POSE_FEAT);

        // The ego-now row is the frame origin with the raw dynamic state.
        let now = sc.ego_now();
        let last = &f.ctx.ego[(HISTORY_LEN - 1) * EGO_FEAT..];
        assert_eq!(&last[..3], &[0.0, 0.0, 0.0]);
        assert_eq!(last[3], now.velocity);
        assert_eq!(last[4], now.acceleration);
        assert_eq!(last[5], now.steering);

        // Future triples are into-frame poses, offset kept.
        let rel0 = sc.ego_future[0].pose.into_frame(&now.pose);
        assert_eq!(&f.future[..3], &[rel0.x, rel0.y, rel0.yaw]);
        for (kp_slot, &fut_idx) in cfg.key_point_indices().iter().enumerate() {
            assert_eq!(
                &f.key_points[kp_slot * 3..kp_slot * 3 + 3],
                &f.future[fut_idx * 3..fut_idx * 3 + 3]
            );
        }

        // The centroid buffer is the assigned centroid, flattened.
        let expected: Vec<f64> =
            vocab.centroids[f.proposal_id].points().iter().flatten().copied().collect();
        assert_eq!(f.centroid, expected);

        // A vocabulary of the wrong size is rejected.
        let small = ProposalVocabulary {
            weights: DistanceWeights::default(),
            centroids: vocab.centroids[..8].to_vec(),
            meta: KmeansMeta { iterations: 0, inertia: 0.0, inertia_history: vec![] },
        };
        assert!(matches!(
            featurize(&sc, &raster_cfg, &cfg, &small),
            Err(ModelError::VocabMismatch { expected: 64, got: 8 })
        ));
    }

    #[test]
    fn batch_rows_do_not_interact() {
        let cfg = micro_config();
        let model: Str2Model<f32> = Str2Model::new(cfg.clone()).unwrap();
        let (fa, fb) = (synthetic_features(&cfg, 5), synthetic_features(&cfg, 6));
        let joint = model.forward(&[fa.clone(), fb.clone()], None);
        let solo = model.forward(&[fa], None);
        let (jv, sv) = (joint.proposal_logits.to_vec(), solo.proposal_logits.to_vec());
        assert_eq!(&jv[..cfg.vocab_k], &sv[..]);
        let (js, ss) = (joint.states.to_vec(), solo.states.to_vec());
        assert_eq!(&js[..80 * 3], &ss[..]);
    }
}
