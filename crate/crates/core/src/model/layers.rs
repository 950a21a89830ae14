//! Transformer building blocks: layer norm, feed-forward, grouped-query
//! attention, and the top-k mixture-of-experts layer.

use super::ParamInit;
use crate::tensor::ops::topk_desc;
use crate::tensor::{Real, Tensor};

/// Additive mask value for disallowed attention edges. Large enough that
/// `exp(x - rowmax)` underflows to exactly 0.0 for masked entries, which is
/// what makes future tokens *bit-exactly* invisible, not just attenuated.
pub const MASK_NEG: f64 = -1e30;

pub const LN_EPS: f64 = 1e-5;

/// Lower-triangular additive mask: 0 where key <= query, `MASK_NEG` above.
pub fn causal_mask<T: Real>(s: usize) -> Tensor<T> {
    let mut vals = vec![T::zero(); s * s];
    for i in 0..s {
        for j in i + 1..s {
            vals[i * s + j] = T::from_f64(MASK_NEG);
        }
    }
    Tensor::from_vec(&[s, s], vals)
}

/// Learned layer normalization over the channel axis.
pub struct LayerNorm<T: Real> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Real> LayerNorm<T> {
    pub(crate) fn new(p: &mut ParamInit<T>, name: &str, dim: usize) -> Self {
        LayerNorm { gamma: p.ones(&format!("{name}.g"), &[dim]), beta: p.zeros(&format!("{name}.b"), &[dim]) }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        x.layer_norm(&self.gamma, &self.beta, LN_EPS)
    }
}

/// Two-layer feed-forward block with GeLU.
pub struct Ff<T: Real> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

impl<T: Real> Ff<T> {
    pub(crate) fn new(p: &mut ParamInit<T>, name: &str, d_in: usize, hidden: usize, d_out: usize) -> Self {
        Ff {
            w1: p.linear(&format!("{name}.w1"), d_in, hidden),
            b1: p.zeros(&format!("{name}.b1"), &[hidden]),
            w2: p.linear(&format!("{name}.w2"), hidden, d_out),
            b2: p.zeros(&format!("{name}.b2"), &[d_out]),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        x.matmul(&self.w1).add(&self.b1).gelu().matmul(&self.w2).add(&self.b2)
    }
}

/// Multi-head attention with grouped key/value heads. `n_kv_heads == n_heads`
/// is ordinary multi-head attention; fewer KV heads share each KV projection
/// across `n_heads / n_kv_heads` consecutive query heads.
pub struct Attention<T: Real> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
}

impl<T: Real> Attention<T> {
    /// `x` is (B, S, dim); `mask` is an additive (S, S) bias or `None`.
    pub fn forward(&self, x: &Tensor<T>, mask: Option<&Tensor<T>>) -> Tensor<T> {
        let (b, s, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (h, kvh, hd) = (self.n_heads, self.n_kv_heads, self.head_dim);
        let groups = h / kvh;

        // (B, S, D) -> (B*H, S, hd) with heads as the batch axis.
        let q = x
            .matmul(&self.wq)
            .reshape(&[b, s, h, hd])
            .swap_axes12()
            .reshape(&[b * h, s, hd]);
        let k = x
            .matmul(&self.wk)
            .reshape(&[b, s, kvh, hd])
            .swap_axes12()
            .repeat_axis1(groups)
            .reshape(&[b * h, s, hd]);
        let v = x
            .matmul(&self.wv)
            .reshape(&[b, s, kvh, hd])
            .swap_axes12()
            .repeat_axis1(groups)
            .reshape(&[b * h, s, hd]);

        let mut scores = q.matmul(&k.transpose_last2()).mul_scalar(1.0 / (hd as f64).sqrt());
        if let Some(m) = mask {
            scores = scores.add(m); // (S, S) broadcasts over the B*H axis
        }
        let attn = scores.softmax_last();
        attn.matmul(&v)
            .reshape(&[b, h, s, hd])
            .swap_axes12()
            .reshape(&[b, s, d])
            .matmul(&self.wo)
    }
}

/// What one MoE forward reports besides its output.
pub struct MoeStats<T: Real> {
    /// Load-balance auxiliary term for this layer; 1.0 under uniform load.
    pub aux: Tensor<T>,
    /// Tokens routed to each expert; sums to `tokens * top_k`.
    pub counts: Vec<usize>,
    /// Chosen expert ids, `top_k` per token row.
    pub routing: Vec<usize>,
}

/// Top-k mixture of experts with a linear router.
///
/// Gate weights are the softmax over the *selected* top-k router logits,
/// which equals the full-softmax probabilities renormalized over the
/// selection. The auxiliary load-balance term is
/// `E * sum_e f_e * P_e` where `f_e` is the fraction of routed slots that
/// went to expert `e` (a constant) and `P_e` the mean full-softmax
/// probability of `e` (differentiable).
pub struct MoeLayer<T: Real> {
    pub router: Tensor<T>,
    pub experts: Vec<Ff<T>>,
    pub top_k: usize,
}

impl<T: Real> MoeLayer<T> {
    pub(crate) fn new(
        p: &mut ParamInit<T>,
        name: &str,
        dim: usize,
        hidden: usize,
        n_experts: usize,
        top_k: usize,
    ) -> Self {
        MoeLayer {
            router: p.linear(&format!("{name}.router"), dim, n_experts),
            experts: (0..n_experts)
                .map(|j| Ff::new(p, &format!("{name}.e{j}"), dim, hidden, dim))
                .collect(),
            top_k,
        }
    }

    /// `x` is (N, dim) token rows. `frozen_routing`, when given, bypasses the
    /// top-k selection with a fixed assignment (gradient checks differentiate
    /// the smooth function at a fixed routing point; the discrete argmax-set
    /// choice itself has no gradient).
    pub fn forward(&self, x: &Tensor<T>, frozen_routing: Option<&[usize]>) -> (Tensor<T>, MoeStats<T>) {
        let n = x.shape()[0];
        let e = self.experts.len();
        let k = self.top_k;

        let logits = x.matmul(&self.router); // (N, E)
        let probs = logits.softmax_last();

        let routing: Vec<usize> = match frozen_routing {
            Some(r) => {
                assert_eq!(r.len(), n * k, "frozen routing has {} slots for {} rows", r.len(), n);
                r.to_vec()
            }
            None => {
                let lv = logits.values();
                let mut out = Vec::with_capacity(n * k);
                for row in 0..n {
                    out.extend(topk_desc(&lv[row * e..(row + 1) * e], k));
                }
                out
            }
        };

        // Gates: softmax over each row's selected logits.
        let gates = logits.gather_per_row(&routing, k).softmax_last(); // (N, k)

        let mut counts = vec![0usize; e];
        for &ex in &routing {
            counts[ex] += 1;
        }

        // Dispatch: for each expert, the (row, slot) pairs routed to it.
        let mut out_parts: Vec<Tensor<T>> = Vec::new();
        for (ex, expert) in self.experts.iter().enumerate() {
            let slots: Vec<usize> =
                (0..n * k).filter(|&i| routing[i] == ex).collect();
            if slots.is_empty() {
                continue;
            }
            let rows: Vec<usize> = slots.iter().map(|&i| i / k).collect();
            let inp = x.gather_rows(&rows);
            let y = expert.forward(&inp);
            let g = gates.gather_flat(&slots); // (n_e, 1)
            out_parts.push(y.scale_rows(&g).scatter_rows(&rows, n));
        }
        let mut out = out_parts.pop().expect("top-k routing selects at least one expert");
        for part in out_parts {
            out = out.add(&part);
        }

        // Load-balance term. The routed fractions enter as constants.
        let f: Vec<T> =
            counts.iter().map(|&c| T::from_f64(c as f64 / (n * k) as f64)).collect();
        let f = Tensor::from_vec(&[e], f);
        let aux = probs.mean_axis0().mul(&f).sum_all().mul_scalar(e as f64);

        (out, MoeStats { aux, counts, routing })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn init() -> ParamInit<f64> {
        ParamInit::new(11)
    }

    fn rand_x(n: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(&[n, d], (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn causal_mask_zeroes_future_attention_exactly() {
        let m: Tensor<f64> = causal_mask(4);
        let scores = Tensor::<f64>::from_vec(&[1, 4, 4], vec![0.3; 16]).add(&m);
        let a = scores.softmax_last();
        let av = a.to_vec();
        for i in 0..4 {
            for j in 0..4 {
                let p = av[i * 4 + j];
                if j > i {
                    assert_eq!(p, 0.0, "future weight at ({i},{j}) must be exactly zero");
                } else {
                    assert!((p - 1.0 / (i + 1) as f64).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn grouped_kv_heads_match_duplicated_full_heads() {
        // An attention with 2 KV heads whose projections are duplicated into
        // 4 full KV heads must produce the same output as plain MHA.
        let mut p = init();
        let (d, h, hd) = (8, 4, 2);
        let wq = p.linear("wq", d, d);
        let wk2 = p.linear("wk", d, 2 * hd);
        let wv2 = p.linear("wv", d, 2 * hd);
        let wo = p.linear("wo", d, d);
        let gqa = Attention { wq: wq.clone(), wk: wk2.clone(), wv: wv2.clone(), wo: wo.clone(), n_heads: h, n_kv_heads: 2, head_dim: hd };

        // Duplicate each KV head's columns (a head owns `hd` consecutive cols).
        let dup = |w: &Tensor<f64>| {
            let v = w.to_vec();
            let mut out = vec![0.0; d * d];
            for r in 0..d {
                for head in 0..h {
                    let src_head = head / 2; // two query heads per kv head
                    for c in 0..hd {
                        out[r * d + head * hd + c] = v[r * (2 * hd) + src_head * hd + c];
                    }
                }
            }
            Tensor::from_vec(&[d, d], out)
        };
        let mha = Attention { wq, wk: dup(&wk2), wv: dup(&wv2), wo, n_heads: h, n_kv_heads: h, head_dim: hd };

        let x = rand_x(1, 5 * d, 3).reshape(&[1, 5, d]);
        let m = causal_mask(5);
        let a = gqa.forward(&x, Some(&m));
        let b = mha.forward(&x, Some(&m));
        assert!(crate::tensor::ops::max_abs_diff(&a.to_vec(), &b.to_vec()) < 1e-12);
    }

    #[test]
    fn moe_counts_sum_to_tokens_times_top_k() {
        let mut p = init();
        let moe = MoeLayer::new(&mut p, "m", 8, 16, 4, 2);
        let x = rand_x(13, 8, 5);
        let (_, stats) = moe.forward(&x, None);
        assert_eq!(stats.counts.iter().sum::<usize>(), 13 * 2);
        assert_eq!(stats.routing.len(), 13 * 2);
    }

    #[test]
    fn moe_gates_equal_renormalized_softmax() {
        let mut p = init();
        let moe = MoeLayer::new(&mut p, "m", 8, 16, 4, 2);
        let x = rand_x(6, 8, 7);
        let logits = x.matmul(&moe.router);
        let probs = logits.softmax_last();
        let (_, stats) = moe.forward(&x, None);
        let gates = logits.gather_per_row(&stats.routing, 2).softmax_last();
        let (gv, pv) = (gates.to_vec(), probs.to_vec());
        for row in 0..6 {
            let (e0, e1) = (stats.routing[row * 2], stats.routing[row * 2 + 1]);
            let z = pv[row * 4 + e0] + pv[row * 4 + e1];
            assert!((gv[row * 2] - pv[row * 4 + e0] / z).abs() < 1e-12);
            assert!((gv[row * 2 + 1] - pv[row * 4 + e1] / z).abs() < 1e-12);
        }
    }

    #[test]
    fn moe_output_is_gated_sum_of_selected_experts() {
        let mut p = init();
        let moe = MoeLayer::new(&mut p, "m", 8, 16, 4, 2);
        let x = rand_x(5, 8, 9);
        let (out, stats) = moe.forward(&x, None);
        let gates = x
            .matmul(&moe.router)
            .gather_per_row(&stats.routing, 2)
            .softmax_last()
            .to_vec();
        let ov = out.to_vec();
        for row in 0..5 {
            let xr = x.slice_axis(0, row, row + 1);
            let mut want = vec![0.0f64; 8];
            for slot in 0..2 {
                let ex = stats.routing[row * 2 + slot];
                let y = moe.experts[ex].forward(&xr);
                for (w, &yv) in want.iter_mut().zip(y.values().iter()) {
                    *w += gates[row * 2 + slot] * yv;
                }
            }
            for j in 0..8 {
                assert!((ov[row * 8 + j] - want[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uniform_load_aux_is_one() {
        // Force logits to be identical across experts: router of zeros gives
        // uniform probabilities, and ties routed by index still spread...
        // ties all collapse to the lowest indices, so instead build a router
        // whose logits rotate the favorite expert per row.
        let mut p = init();
        let mut moe = MoeLayer::new(&mut p, "m", 4, 8, 4, 2);
        moe.router = Tensor::param(&[4, 4], {
            // x rows are one-hot; router = strong identity makes row i pick
            // experts {i, (i+1) % 4} with equal full-softmax mass elsewhere.
            let mut w = vec![0.0; 16];
            for i in 0..4 {
                w[i * 4 + i] = 50.0;
                w[i * 4 + (i + 1) % 4] = 50.0;
            }
            w
        }, "m.router");
        let mut xv = vec![0.0; 16];
        for i in 0..4 {
            xv[i * 4 + i] = 1.0;
        }
        let x = Tensor::from_vec(&[4, 4], xv);
        let (_, stats) = moe.forward(&x, None);
        // Every expert gets exactly 2 of the 8 slots, and the full-softmax
        // mass is ~1/2 on each chosen pair, so P is uniform at 1/4.
        assert_eq!(stats.counts, vec![2, 2, 2, 2]);
        assert!((stats.aux.item() - 1.0).abs() < 1e-9, "aux {}", stats.aux.item());
    }

    #[test]
    fn frozen_routing_reproduces_the_unfrozen_forward() {
        let mut p = init();
        let moe = MoeLayer::new(&mut p, "m", 8, 16, 4, 2);
        let x = rand_x(9, 8, 13);
        let (out, stats) = moe.forward(&x, None);
        let (out2, stats2) = moe.forward(&x, Some(&stats.routing));
        assert_eq!(out.to_vec(), out2.to_vec());
        assert_eq!(stats.counts, stats2.counts);
        assert_eq!(stats.aux.item(), stats2.aux.item());
    }

    #[test]
    fn attention_rows_only_depend_on_earlier_tokens() {
        let mut p = init();
        let d = 8;
        let attn = Attention {
            wq: p.linear("wq", d, d),
            wk: p.linear("wk", d, d),
            wv: p.linear("wv", d, d),
            wo: p.linear("wo", d, d),
            n_heads: 4,
            n_kv_heads: 4,
            head_dim: 2,
        };
        let x1 = rand_x(1, 6 * d, 17).reshape(&[1, 6, d]);
        // Perturb only the last token.
        let mut v2 = x1.to_vec();
        for j in 0..d {
            v2[5 * d + j] += 3.0;
        }
        let x2 = Tensor::from_vec(&[1, 6, d], v2);
        let m = causal_mask(6);
        let y1 = attn.forward(&x1, Some(&m)).to_vec();
        let y2 = attn.forward(&x2, Some(&m)).to_vec();
        // Positions 0..5 are bit-identical; position 5 differs.
        assert_eq!(&y1[..5 * d], &y2[..5 * d]);
        assert!(y1[5 * d..] != y2[5 * d..]);
    }
}
