//! Guidance language model: sequence assembly, the causal LoRA-adapted
//! decoder, IMG-token hidden states, their next-token loss, and the
//! query transformer that maps them into the diffusion width.

use crate::autograd::{Graph, Mask, Var};
use crate::config::PipelineConfig;
use crate::encoders::Vocabulary;
use crate::error::{Error, Result};
use crate::nn::{AttentionSpec, CrossAttentionBlock, FeedForward, LayerNorm, Linear, ParamBuilder, TransformerLayer};
use crate::params::{ParamId, ParamStore};

/// Names of the five sequence segments, in order.
pub const SEGMENTS: [&str; 5] = ["image", "visual_cues", "object_cues", "text", "img_tokens"];

/// Cumulative segment ends: `ends[k]` is one past the last row of segment `k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Boundaries {
    pub ends: [usize; 5],
}

impl Boundaries {
    pub fn from_lengths(lengths: [usize; 5]) -> Self {
        let mut ends = [0; 5];
        let mut acc = 0;
        for (e, l) in ends.iter_mut().zip(lengths) {
            acc += l;
            *e = acc;
        }
        Boundaries { ends }
    }

    pub fn total(&self) -> usize {
        self.ends[4]
    }

    pub fn start(&self, k: usize) -> usize {
        if k == 0 {
            0
        } else {
            self.ends[k - 1]
        }
    }

    pub fn len(&self, k: usize) -> usize {
        self.ends[k] - self.start(k)
    }

    pub fn img_start(&self) -> usize {
        self.start(4)
    }
}

/// `[IA(E_I(I)); R_V; R_T; text; Q]` with its segment boundaries.
pub fn assemble_sequence(
    g: &mut Graph,
    ia_out: Var,
    r_v: Var,
    r_t: Var,
    text: Var,
    img_tokens: Var,
) -> Result<(Var, Boundaries)> {
    let parts = [ia_out, r_v, r_t, text, img_tokens];
    let mut lengths = [0; 5];
    let width = g.value(ia_out).last_dim();
    for (k, &p) in parts.iter().enumerate() {
        let (n, d) = g.value(p).dims2()?;
        if d != width {
            return Err(Error::dim(
                "assemble_sequence",
                format!("segment {} has width {d}, expected {width}", SEGMENTS[k]),
            ));
        }
        lengths[k] = n;
    }
    Ok((g.concat(&parts, 0)?, Boundaries::from_lengths(lengths)))
}

/// The final `r` hidden rows.
pub fn extract_guidance(g: &mut Graph, hidden: Var, b: &Boundaries, r: usize) -> Result<Var> {
    if b.len(4) != r {
        return Err(Error::Validation(format!("IMG segment has {} rows, expected {r}", b.len(4))));
    }
    if g.value(hidden).rows() != b.total() {
        return Err(Error::dim("extract_guidance", format!("{} hidden rows vs {} in layout", g.value(hidden).rows(), b.total())));
    }
    g.narrow(hidden, 0, b.img_start(), r)
}

/// `Σ_i −log softmax(logits[start + i − 1])[IMG_i]` over the IMG segment.
pub fn mllm_loss(g: &mut Graph, logits: Var, b: &Boundaries, vocab: &Vocabulary) -> Result<Var> {
    let start = b.img_start();
    let r = b.len(4);
    if start == 0 {
        return Err(Error::Validation("IMG segment needs at least one preceding row".into()));
    }
    if r != vocab.img_count() {
        return Err(Error::Validation(format!("IMG segment has {r} rows, vocabulary has {}", vocab.img_count())));
    }
    let rows: Vec<usize> = (0..r).map(|i| start + i - 1).collect();
    g.cross_entropy_rows(logits, &rows, &vocab.img_ids())
}

/// Small causal decoder over already-embedded rows.
#[derive(Clone, Debug)]
pub struct GuidanceLM {
    pub embed: ParamId,
    pub layers: Vec<TransformerLayer>,
    pub ln_f: LayerNorm,
    pub head: Option<Linear>,
}

impl GuidanceLM {
    pub fn new(pb: &mut ParamBuilder, cfg: &PipelineConfig, vocab_len: usize) -> Result<Self> {
        let d = cfg.dims.d_llm;
        let mut pb = pb.scope("lm");
        let embed = pb.normal("embed", &[vocab_len, d], 0.5)?;
        let spec = AttentionSpec {
            d_model: d,
            heads: cfg.lm.heads,
            residual_norm: false,
            lora: Some((cfg.lora.rank, cfg.lora.alpha)),
            base_trainable: !cfg.lm.frozen_base,
        };
        let mut base = pb.with_trainable(!cfg.lm.frozen_base);
        let layers = (0..cfg.lm.layers)
            .map(|i| TransformerLayer::new(&mut base, &format!("layer{i}"), spec, false))
            .collect::<Result<Vec<_>>>()?;
        let ln_f = LayerNorm::new(&mut base, "ln_f", d)?;
        let head = if cfg.lm.tied_head {
            None
        } else {
            Some(Linear::new(&mut pb, "head", d, vocab_len, true)?)
        };
        Ok(GuidanceLM {
            embed,
            layers,
            ln_f,
            head,
        })
    }

    /// Embedding rows for the given ids.
    pub fn embed_ids(&self, g: &mut Graph, store: &ParamStore, ids: &[usize]) -> Result<Var> {
        let table = g.param(store, self.embed);
        g.gather_rows(table, ids)
    }

    /// Returns `(hidden, logits)`; hidden is the final normalized state.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, seq: Var) -> Result<(Var, Var)> {
        let mut x = seq;
        for layer in &self.layers {
            x = layer.forward(g, store, x, None, Mask::Causal)?;
        }
        let hidden = self.ln_f.forward(g, store, x)?;
        let logits = match &self.head {
            Some(head) => head.forward(g, store, hidden)?,
            None => {
                let table = g.param(store, self.embed);
                g.matmul_bt(hidden, table)?
            }
        };
        Ok((hidden, logits))
    }
}

/// One post-norm layer: self-attention over queries, cross-attention to the
/// guidance, feed-forward; every sub-block is residual and normalized.
#[derive(Clone, Debug)]
pub struct QFormerLayer {
    pub self_attn: CrossAttentionBlock,
    pub cross_attn: CrossAttentionBlock,
    pub ff: FeedForward,
    pub ln_ff: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct QFormer {
    pub input: Linear,
    pub queries: ParamId,
    pub layers: Vec<QFormerLayer>,
    pub output: Linear,
}

impl QFormer {
    pub fn new(pb: &mut ParamBuilder, cfg: &PipelineConfig) -> Result<Self> {
        let q = &cfg.qformer;
        let mut pb = pb.scope("qformer");
        let input = Linear::new(&mut pb, "input", cfg.dims.d_llm, q.d_model, true)?;
        let queries = pb.normal("queries", &[q.queries, q.d_model], 1.0)?;
        let spec = AttentionSpec::plain(q.d_model, q.heads).with_residual_norm();
        let mut layers = Vec::with_capacity(q.layers);
        for i in 0..q.layers {
            let mut lb = pb.scope(&format!("layer{i}"));
            layers.push(QFormerLayer {
                self_attn: CrossAttentionBlock::new(&mut lb, "self_attn", spec)?,
                cross_attn: CrossAttentionBlock::new(&mut lb, "cross_attn", spec)?,
                ff: FeedForward::new(&mut lb, "ff", q.d_model)?,
                ln_ff: LayerNorm::new(&mut lb, "ln_ff", q.d_model)?,
            });
        }
        let output = Linear::new(&mut pb, "output", q.d_model, cfg.dims.d_diff, true)?;
        Ok(QFormer {
            input,
            queries,
            layers,
            output,
        })
    }

    /// `V [r, d_llm] → V̂ [n_queries, d_diff]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, v: Var) -> Result<Var> {
        let kv = self.input.forward(g, store, v)?;
        let mut x = g.param(store, self.queries);
        for layer in &self.layers {
            x = layer.self_attn.forward(g, store, x, x)?;
            x = layer.cross_attn.forward(g, store, x, kv)?;
            let f = layer.ff.forward(g, store, x)?;
            let res = g.add(x, f)?;
            x = layer.ln_ff.forward(g, store, res)?;
        }
        self.output.forward(g, store, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check_params;
    use crate::rng;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn vocab(r: usize) -> Vocabulary {
        let words: Vec<String> = (0..20).map(|i| format!("w{i}")).collect();
        Vocabulary::build(&[words.join(" ")], r).unwrap()
    }

    fn lm(cfg: &PipelineConfig, v: usize) -> (ParamStore, GuidanceLM) {
        let mut store = ParamStore::new();
        let mut r = rng::stream(cfg.seed, rng::INIT, 0);
        let mut pb = ParamBuilder::new(&mut store, &mut r, "");
        let m = GuidanceLM::new(&mut pb, cfg, v).unwrap();
        (store, m)
    }

    #[test]
    fn boundary_example() {
        let b = Boundaries::from_lengths([80, 18, 2, 12, 32]);
        assert_eq!(b.ends, [80, 98, 100, 112, 144]);
        assert_eq!((b.img_start(), b.total()), (112, 144));
    }

    proptest! {
        #[test]
        fn assembly_layout(lens in proptest::array::uniform5(1usize..6)) {
            let mut g = Graph::new();
            let mut r = rng::stream(lens.iter().sum::<usize>() as u64, "t", 0);
            let parts: Vec<Var> = lens.iter().map(|&n| g.input(Tensor::randn(&[n, 3], 1.0, &mut r))).collect();
            let (seq, b) = assemble_sequence(&mut g, parts[0], parts[1], parts[2], parts[3], parts[4]).unwrap();
            prop_assert_eq!(b.total(), lens.iter().sum::<usize>());
            for k in 0..5 {
                prop_assert_eq!(b.len(k), lens[k]);
                let got = g.value(seq).slice_rows(b.start(k), lens[k]).unwrap();
                prop_assert_eq!(&got, g.value(parts[k]));
            }
            let v = extract_guidance(&mut g, seq, &b, lens[4]).unwrap();
            prop_assert_eq!(g.value(v), g.value(parts[4]));
        }
    }

    #[test]
    fn extraction_indexing_and_errors() {
        let mut g = Graph::new();
        let h = g.input(Tensor::new(&[10, 1], (0..10).map(f64::from).collect()).unwrap());
        let b = Boundaries::from_lengths([3, 1, 1, 1, 4]);
        let v = extract_guidance(&mut g, h, &b, 4).unwrap();
        assert_eq!(g.value(v).data(), &[6.0, 7.0, 8.0, 9.0]);
        assert!(extract_guidance(&mut g, h, &b, 3).is_err());
        let w = g.input(Tensor::zeros(&[2, 2]));
        assert!(assemble_sequence(&mut g, h, h, h, h, w).is_err());
    }

    #[test]
    fn causal_by_exhaustive_perturbation() {
        let mut cfg = PipelineConfig::toy();
        cfg.lm.layers = 2;
        let (store, m) = lm(&cfg, 12);
        let mut r = rng::stream(4, "seq", 0);
        let base = Tensor::randn(&[12, 4], 1.0, &mut r);
        let mut g = Graph::inference();
        let x = g.constant(base.clone());
        let (_, l0) = m.forward(&mut g, &store, x).unwrap();
        let l0 = g.value(l0).clone();
        for j in 0..12 {
            let mut t = base.clone();
            for (k, v) in t.data_mut()[j * 4..(j + 1) * 4].iter_mut().enumerate() {
                *v += 0.25 * (k as f64 + 1.0);
            }
            let x = g.constant(t);
            let (_, l) = m.forward(&mut g, &store, x).unwrap();
            let l = g.value(l);
            for i in 0..12 {
                assert_eq!(l.row(i) == l0.row(i), i < j, "row {i}, perturbed {j}");
            }
        }
    }

    #[test]
    fn single_row_and_zero_lora_equals_base() {
        let cfg = PipelineConfig::toy();
        let (store, m) = lm(&cfg, 9);
        let mut g = Graph::inference();
        let x = g.constant(Tensor::full(&[1, 4], 0.3));
        let (h, _) = m.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(h), &[1, 4]);

        // Same model without adapters: B = 0 means identical output.
        let mut r = rng::stream(2, "seq", 0);
        let seq = Tensor::randn(&[5, 4], 1.0, &mut r);
        let x = g.constant(seq.clone());
        let (_, with) = m.forward(&mut g, &store, x).unwrap();
        let mut plain = m.clone();
        for layer in &mut plain.layers {
            for w in [&mut layer.self_attn.w_q, &mut layer.self_attn.w_k, &mut layer.self_attn.w_v, &mut layer.self_attn.w_o] {
                w.lora = None;
            }
        }
        let x = g.constant(seq);
        let (_, without) = plain.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.value(with), g.value(without));
    }

    #[test]
    fn lm_gradients_over_lora_only() {
        let cfg = PipelineConfig::toy();
        let (mut store, m) = lm(&cfg, 9);
        // Move B away from zero so every adapter term is exercised.
        let mut r = rng::stream(7, "b", 0);
        let lora: Vec<ParamId> = store.ids().filter(|&id| store.name(id).contains(".lora.")).collect();
        for &id in &lora {
            let t = Tensor::randn(store.value(id).shape(), 0.3, &mut r);
            store.set_value(id, t).unwrap();
        }
        assert!(store.trainable_ids().iter().all(|&id| !store.name(id).contains("layer0.ff")));
        let seq = Tensor::randn(&[5, 4], 1.0, &mut r);
        let err = grad_check_params(
            &mut store,
            &lora,
            |g, s| {
                let x = g.constant(seq.clone());
                let (h, logits) = m.forward(g, s, x)?;
                let a = g.square(h);
                let a = g.sum(a);
                let b = g.cross_entropy_rows(logits, &[1, 3], &[2, 5])?;
                g.add(a, b)
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    /// Per-position cross-entropy computed from scratch with log-sum-exp.
    fn ce_oracle(logits: &Tensor, rows: &[usize], targets: &[usize]) -> f64 {
        rows.iter()
            .zip(targets)
            .map(|(&i, &t)| {
                let row = logits.row(i);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                lse - row[t]
            })
            .sum()
    }

    #[test]
    fn mllm_loss_oracles() {
        let v = vocab(32);
        let n = v.len();
        let b = Boundaries::from_lengths([3, 2, 1, 4, 32]);
        let mut g = Graph::new();
        let mut r = rng::stream(11, "l", 0);
        let logits = Tensor::randn(&[b.total(), n], 2.0, &mut r);
        let lv = g.input(logits.clone());
        let loss = mllm_loss(&mut g, lv, &b, &v).unwrap();
        let rows: Vec<usize> = (0..32).map(|i| 9 + i).collect();
        let oracle = ce_oracle(&logits, &rows, &v.img_ids());
        assert!((g.value(loss).data()[0] - oracle).abs() < 1e-10);

        let mut peaked = Tensor::zeros(&[b.total(), n]);
        for (k, &row) in rows.iter().enumerate() {
            peaked.data_mut()[row * n + v.img_id(k + 1)] = 1e4;
        }
        let pv = g.input(peaked);
        let zero = mllm_loss(&mut g, pv, &b, &v).unwrap();
        assert!(g.value(zero).data()[0].abs() < 1e-12);
    }

    #[test]
    fn uniform_logits_closed_form() {
        // 4 specials + 64 words + 32 IMG ids = 100 entries.
        let words: Vec<String> = (0..64).map(|i| format!("w{i}")).collect();
        let v = Vocabulary::build(&[words.join(" ")], 32).unwrap();
        assert_eq!(v.len(), 100);
        let b = Boundaries::from_lengths([1, 1, 1, 1, 32]);
        let mut g = Graph::new();
        let lv = g.input(Tensor::zeros(&[b.total(), 100]));
        let loss = mllm_loss(&mut g, lv, &b, &v).unwrap();
        assert!((g.value(loss).data()[0] - 32.0 * 100f64.ln()).abs() < 1e-9);
    }

    fn qformer(cfg: &PipelineConfig) -> (ParamStore, QFormer) {
        let mut store = ParamStore::new();
        let mut r = rng::stream(cfg.seed, rng::INIT, 0);
        let mut pb = ParamBuilder::new(&mut store, &mut r, "");
        let q = QFormer::new(&mut pb, cfg).unwrap();
        (store, q)
    }

    #[test]
    fn qformer_defaults_and_shape() {
        let cfg = PipelineConfig::default();
        assert_eq!((cfg.qformer.queries, cfg.qformer.layers), (77, 6));
        let (store, q) = qformer(&cfg);
        assert_eq!(q.layers.len(), 6);
        let mut g = Graph::inference();
        let mut r = rng::stream(1, "v", 0);
        for rows in [1, 32, 5] {
            let v = g.constant(Tensor::randn(&[rows, 64], 1.0, &mut r));
            let out = q.forward(&mut g, &store, v).unwrap();
            assert_eq!(g.shape(out), &[77, 32]);
        }
    }

    #[test]
    fn qformer_gradients() {
        let mut cfg = PipelineConfig::toy();
        cfg.qformer.layers = 6;
        let (mut store, q) = qformer(&cfg);
        let mut r = rng::stream(2, "v", 0);
        let v = Tensor::randn(&[2, 4], 1.0, &mut r);
        let ids = store.ids().collect::<Vec<_>>();
        let err = grad_check_params(
            &mut store,
            &ids,
            |g, s| {
                let x = g.constant(v.clone());
                let out = q.forward(g, s, x)?;
                let sq = g.square(out);
                Ok(g.sum(sq))
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
