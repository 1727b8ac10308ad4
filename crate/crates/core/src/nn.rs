//! Trainable layers shared by every stage: linear (optionally LoRA-adapted),
//! layer norm, GELU feed-forward and multi-head cross-attention.
//!
//! Layers hold [`ParamId`]s into a [`ParamStore`]; forward passes bind them onto
//! a [`Graph`]. Attention blocks carry no positional terms, so they are
//! invariant to permutations of the key/value rows.

use crate::autograd::{Graph, Mask, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::StreamRng;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;
pub const LORA_INIT_STD: f64 = 0.02;

/// Scoped parameter factory: names are `prefix.name`.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut StreamRng,
    prefix: String,
    trainable: bool,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut StreamRng, prefix: &str) -> Self {
        ParamBuilder {
            store,
            rng,
            prefix: prefix.to_string(),
            trainable: true,
        }
    }

    pub fn scope(&mut self, name: &str) -> ParamBuilder<'_> {
        ParamBuilder {
            prefix: self.qualify(name),
            store: self.store,
            rng: self.rng,
            trainable: self.trainable,
        }
    }

    /// Same scope, different trainability.
    pub fn with_trainable(&mut self, trainable: bool) -> ParamBuilder<'_> {
        ParamBuilder {
            prefix: self.prefix.clone(),
            store: self.store,
            rng: self.rng,
            trainable,
        }
    }

    pub fn rng(&mut self) -> &mut StreamRng {
        self.rng
    }

    pub fn trainable(mut self, trainable: bool) -> Self {
        self.trainable = trainable;
        self
    }

    fn qualify(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        let full = self.qualify(name);
        self.store.add(full, value, self.trainable)
    }

    /// Xavier-uniform `[d_out, d_in]`.
    pub fn xavier(&mut self, name: &str, d_out: usize, d_in: usize) -> Result<ParamId> {
        let bound = (6.0 / (d_in + d_out) as f64).sqrt();
        let t = Tensor::uniform(&[d_out, d_in], bound, self.rng);
        self.add(name, t)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let t = Tensor::randn(shape, std, self.rng);
        self.add(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Tensor::full(shape, 1.0))
    }
}

/// LoRA correction `(alpha / rank) · B · A` on a frozen base weight.
#[derive(Clone, Debug)]
pub struct LoraAdapter {
    /// `[rank, d_in]`, normal(0, 0.02) at init.
    pub a: ParamId,
    /// `[d_out, rank]`, zero at init.
    pub b: ParamId,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraAdapter {
    pub fn new(pb: &mut ParamBuilder, d_in: usize, d_out: usize, rank: usize, alpha: f64) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Config("lora rank must be positive".into()));
        }
        let mut pb = pb.scope("lora").trainable(true);
        Ok(LoraAdapter {
            a: pb.normal("a", &[rank, d_in], LORA_INIT_STD)?,
            b: pb.zeros("b", &[d_out, rank])?,
            rank,
            alpha,
        })
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// `W_base + (alpha/rank) · B · A`.
    pub fn merge(&self, store: &ParamStore, base: &Tensor) -> Result<Tensor> {
        let delta = store.value(self.b).matmul(store.value(self.a))?;
        if delta.shape() != base.shape() {
            return Err(Error::dim(
                "lora_merge",
                format!("base {:?} vs adapter {:?}", base.shape(), delta.shape()),
            ));
        }
        let s = self.scaling();
        base.zip(&delta, |w, d| w + s * d)
    }
}

/// `x · W_baseᵀ + (alpha/rank) · x · Aᵀ · Bᵀ`.
pub fn lora_forward(g: &mut Graph, store: &ParamStore, x: Var, base: Var, adapter: &LoraAdapter) -> Result<Var> {
    let y = g.matmul_bt(x, base)?;
    let a = g.param(store, adapter.a);
    let b = g.param(store, adapter.b);
    let xa = g.matmul_bt(x, a)?;
    let xab = g.matmul_bt(xa, b)?;
    if g.shape(xab) != g.shape(y) {
        return Err(Error::dim(
            "lora_forward",
            format!("base output {:?} vs adapter output {:?}", g.shape(y), g.shape(xab)),
        ));
    }
    let scaled = g.scale(xab, adapter.scaling());
    g.add(y, scaled)
}

/// Affine map `x · Wᵀ + b` with `W: [d_out, d_in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub lora: Option<LoraAdapter>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, name: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let mut pb = pb.scope(name);
        Ok(Linear {
            weight: pb.xavier("weight", d_out, d_in)?,
            bias: if bias { Some(pb.zeros("bias", &[d_out])?) } else { None },
            lora: None,
            d_in,
            d_out,
        })
    }

    /// Weight and bias start at zero.
    pub fn zeroed(pb: &mut ParamBuilder, name: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let mut pb = pb.scope(name);
        Ok(Linear {
            weight: pb.zeros("weight", &[d_out, d_in])?,
            bias: if bias { Some(pb.zeros("bias", &[d_out])?) } else { None },
            lora: None,
            d_in,
            d_out,
        })
    }

    /// Frozen base weight plus a trainable LoRA adapter.
    pub fn with_lora(
        pb: &mut ParamBuilder,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rank: usize,
        alpha: f64,
        base_trainable: bool,
    ) -> Result<Self> {
        let mut base = Linear::new(&mut pb.with_trainable(base_trainable), name, d_in, d_out, bias)?;
        let mut scoped = pb.scope(name);
        base.lora = Some(LoraAdapter::new(&mut scoped, d_in, d_out, rank, alpha)?);
        Ok(base)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let width = g.value(x).last_dim();
        if width != self.d_in {
            return Err(Error::dim(
                "linear",
                format!("input width {width}, layer expects {}", self.d_in),
            ));
        }
        let w = g.param(store, self.weight);
        let mut y = match &self.lora {
            Some(adapter) => lora_forward(g, store, x, w, adapter)?,
            None => g.matmul_bt(x, w)?,
        };
        if let Some(b) = self.bias {
            let b = g.param(store, b);
            y = g.add_row_bias(y, b)?;
        }
        Ok(y)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder, name: &str, d: usize) -> Result<Self> {
        let mut pb = pb.scope(name);
        Ok(LayerNorm {
            gamma: pb.ones("gamma", &[d])?,
            beta: pb.zeros("beta", &[d])?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layernorm(x, gamma, beta, LN_EPS)
    }
}

/// `Linear(d → 4d) → GELU → Linear(4d → d)`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new(pb: &mut ParamBuilder, name: &str, d: usize) -> Result<Self> {
        let mut pb = pb.scope(name);
        Ok(FeedForward {
            fc1: Linear::new(&mut pb, "fc1", d, 4 * d, true)?,
            fc2: Linear::new(&mut pb, "fc2", 4 * d, d, true)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, store, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, store, h)
    }
}

/// Options for building a [`CrossAttentionBlock`].
#[derive(Clone, Copy, Debug)]
pub struct AttentionSpec {
    pub d_model: usize,
    pub heads: usize,
    /// Wrap the block as `LayerNorm(query + attention)`.
    pub residual_norm: bool,
    /// `(rank, alpha)` adapters on all four projections, with frozen base weights.
    pub lora: Option<(usize, f64)>,
    pub base_trainable: bool,
}

impl AttentionSpec {
    pub fn plain(d_model: usize, heads: usize) -> Self {
        AttentionSpec {
            d_model,
            heads,
            residual_norm: false,
            lora: None,
            base_trainable: true,
        }
    }

    pub fn with_residual_norm(mut self) -> Self {
        self.residual_norm = true;
        self
    }
}

/// Multi-head attention with separate query and key/value inputs.
#[derive(Clone, Debug)]
pub struct CrossAttentionBlock {
    pub heads: usize,
    pub d_model: usize,
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub w_o: Linear,
    pub norm: Option<LayerNorm>,
    label: String,
}

/// Per-head intermediates of one attention call.
#[derive(Clone, Debug)]
pub struct AttentionTrace {
    pub output: Var,
    /// `[n_q, n_kv]` row-stochastic weights per head.
    pub weights: Vec<Var>,
    /// `[n_kv, d_head]` projected values per head.
    pub values: Vec<Var>,
    /// `[n_q, d_head]` per-head outputs before `W_o`.
    pub head_outputs: Vec<Var>,
}

impl CrossAttentionBlock {
    pub fn new(pb: &mut ParamBuilder, name: &str, spec: AttentionSpec) -> Result<Self> {
        let AttentionSpec {
            d_model: d,
            heads,
            ..
        } = spec;
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "d_model {d} is not divisible by {heads} heads"
            )));
        }
        let label = pb.qualify(name);
        let mut pb = pb.scope(name);
        let mk = |pb: &mut ParamBuilder, n: &str| match spec.lora {
            Some((rank, alpha)) => Linear::with_lora(pb, n, d, d, false, rank, alpha, spec.base_trainable),
            None => Linear::new(pb, n, d, d, false),
        };
        Ok(CrossAttentionBlock {
            heads,
            d_model: d,
            w_q: mk(&mut pb, "w_q")?,
            w_k: mk(&mut pb, "w_k")?,
            w_v: mk(&mut pb, "w_v")?,
            w_o: mk(&mut pb, "w_o")?,
            norm: if spec.residual_norm {
                Some(LayerNorm::new(&mut pb, "norm", d)?)
            } else {
                None
            },
            label,
        })
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, query: Var, key_value: Var) -> Result<Var> {
        Ok(self.forward_traced(g, store, query, key_value, Mask::None)?.output)
    }

    /// Self-attention with a causal mask (`query == key_value`).
    pub fn forward_causal(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        Ok(self.forward_traced(g, store, x, x, Mask::Causal)?.output)
    }

    pub fn forward_traced(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        query: Var,
        key_value: Var,
        mask: Mask,
    ) -> Result<AttentionTrace> {
        let (_, dq) = g.value(query).dims2()?;
        let (_, dkv) = g.value(key_value).dims2()?;
        if dq != self.d_model || dkv != self.d_model {
            return Err(Error::dim(
                "cross_attention",
                format!(
                    "query width {dq}, key/value width {dkv}, block width {}",
                    self.d_model
                ),
            ));
        }
        let q = self.w_q.forward(g, store, query)?;
        let k = self.w_k.forward(g, store, key_value)?;
        let v = self.w_v.forward(g, store, key_value)?;
        let dh = self.d_model / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut weights = Vec::with_capacity(self.heads);
        let mut values = Vec::with_capacity(self.heads);
        let mut head_outputs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.narrow(q, 1, h * dh, dh)?,
                    g.narrow(k, 1, h * dh, dh)?,
                    g.narrow(v, 1, h * dh, dh)?,
                )
            };
            let scores = g.matmul_bt(qh, kh)?;
            let scores = g.scale(scores, scale);
            let attn = g.softmax_masked(scores, mask)?;
            let out = g.matmul(attn, vh)?;
            weights.push(attn);
            values.push(vh);
            head_outputs.push(out);
        }
        let merged = if self.heads == 1 {
            head_outputs[0]
        } else {
            g.concat(&head_outputs, 1)?
        };
        let mut output = self.w_o.forward(g, store, merged)?;
        if let Some(norm) = &self.norm {
            let res = g.add(query, output)?;
            output = norm.forward(g, store, res)?;
        }
        g.record_block("cross_attention", self.label.clone(), query, key_value, output);
        Ok(AttentionTrace {
            output,
            weights,
            values,
            head_outputs,
        })
    }
}

/// Pre-norm transformer layer: self-attention, optional cross-attention, feed-forward,
/// each wrapped in a residual connection.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub ln_self: LayerNorm,
    pub self_attn: CrossAttentionBlock,
    pub cross: Option<(LayerNorm, CrossAttentionBlock)>,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
}

impl TransformerLayer {
    pub fn new(pb: &mut ParamBuilder, name: &str, spec: AttentionSpec, with_cross: bool) -> Result<Self> {
        let mut pb = pb.scope(name);
        let d = spec.d_model;
        let cross = if with_cross {
            let ln = LayerNorm::new(&mut pb, "ln_cross", d)?;
            let ca = CrossAttentionBlock::new(&mut pb, "cross_attn", AttentionSpec { lora: None, ..spec })?;
            Some((ln, ca))
        } else {
            None
        };
        Ok(TransformerLayer {
            ln_self: LayerNorm::new(&mut pb, "ln_self", d)?,
            self_attn: CrossAttentionBlock::new(&mut pb, "self_attn", spec)?,
            cross,
            ln_ff: LayerNorm::new(&mut pb, "ln_ff", d)?,
            ff: FeedForward::new(&mut pb, "ff", d)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, context: Option<Var>, mask: Mask) -> Result<Var> {
        let h = self.ln_self.forward(g, store, x)?;
        let a = self.self_attn.forward_traced(g, store, h, h, mask)?.output;
        let mut x = g.add(x, a)?;
        if let (Some((ln, ca)), Some(ctx)) = (&self.cross, context) {
            let h = ln.forward(g, store, x)?;
            let a = ca.forward(g, store, h, ctx)?;
            x = g.add(x, a)?;
        }
        let h = self.ln_ff.forward(g, store, x)?;
        let f = self.ff.forward(g, store, h)?;
        g.add(x, f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check_params;
    use crate::rng;

    fn setup() -> (ParamStore, StreamRng) {
        (ParamStore::new(), rng::stream(1, "test", 0))
    }

    #[test]
    fn heads_must_divide_width() {
        let (mut store, mut r) = setup();
        let mut pb = ParamBuilder::new(&mut store, &mut r, "x");
        assert!(CrossAttentionBlock::new(&mut pb, "a", AttentionSpec::plain(10, 4)).is_err());
    }

    #[test]
    fn single_key_attends_with_weight_one() {
        let (mut store, mut r) = setup();
        let mut pb = ParamBuilder::new(&mut store, &mut r, "x");
        let blk = CrossAttentionBlock::new(&mut pb, "a", AttentionSpec::plain(8, 2)).unwrap();
        let mut g = Graph::new();
        let q = g.constant(Tensor::randn(&[5, 8], 1.0, &mut r));
        let kv_t = Tensor::randn(&[1, 8], 1.0, &mut r);
        let kv = g.constant(kv_t.clone());
        let tr = blk.forward_traced(&mut g, &store, q, kv, Mask::None).unwrap();
        for w in &tr.weights {
            assert!(g.value(*w).data().iter().all(|&v| v == 1.0));
        }
        // Every row equals kv · W_vᵀ · W_oᵀ.
        let wv = store.value(blk.w_v.weight).transpose().unwrap();
        let wo = store.value(blk.w_o.weight).transpose().unwrap();
        let expect = kv_t.matmul(&wv).unwrap().matmul(&wo).unwrap();
        let out = g.value(tr.output);
        for i in 0..5 {
            for j in 0..8 {
                assert!((out.at2(i, j) - expect.at2(0, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn duplicate_keys_get_equal_weight() {
        let (mut store, mut r) = setup();
        let mut pb = ParamBuilder::new(&mut store, &mut r, "x");
        let blk = CrossAttentionBlock::new(&mut pb, "a", AttentionSpec::plain(8, 2)).unwrap();
        let row = Tensor::randn(&[1, 8], 1.0, &mut r);
        let other = Tensor::randn(&[1, 8], 1.0, &mut r);
        let kv = Tensor::new(&[3, 8], [row.data(), other.data(), row.data()].concat()).unwrap();
        let mut g = Graph::new();
        let q = g.constant(Tensor::randn(&[4, 8], 1.0, &mut r));
        let kv = g.constant(kv);
        let tr = blk.forward_traced(&mut g, &store, q, kv, Mask::None).unwrap();
        for w in &tr.weights {
            let w = g.value(*w);
            for i in 0..4 {
                assert_eq!(w.at2(i, 0), w.at2(i, 2));
            }
        }
    }

    #[test]
    fn feed_forward_zero_weights_leave_bias_path() {
        let (mut store, mut r) = setup();
        let mut pb = ParamBuilder::new(&mut store, &mut r, "x");
        let ff = FeedForward::new(&mut pb, "ff", 4).unwrap();
        for id in [ff.fc1.weight, ff.fc2.weight] {
            let shape = store.value(id).shape().to_vec();
            store.set_value(id, Tensor::zeros(&shape)).unwrap();
        }
        store
            .set_value(ff.fc2.bias.unwrap(), Tensor::new(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        for n in [1, 3, 7] {
            let mut g = Graph::new();
            let x = g.constant(Tensor::randn(&[n, 4], 1.0, &mut r));
            let y = ff.forward(&mut g, &store, x).unwrap();
            assert_eq!(g.shape(y), &[n, 4]);
            for i in 0..n {
                assert_eq!(g.value(y).row(i), &[1.0, 2.0, 3.0, 4.0]);
            }
        }
    }

    #[test]
    fn lora_defaults_zero_init_and_merge() {
        let (mut store, mut r) = setup();
        let mut pb = ParamBuilder::new(&mut store, &mut r, "m");
        let lin = Linear::with_lora(&mut pb, "proj", 12, 6, false, 8, 16.0, false).unwrap();
        let adapter = lin.lora.clone().unwrap();
        assert_eq!(adapter.scaling(), 2.0);
        assert!(!store.is_trainable(lin.weight));
        assert!(store.is_trainable(adapter.a) && store.is_trainable(adapter.b));

        let x = Tensor::randn(&[5, 12], 1.0, &mut r);
        let base = store.value(lin.weight).clone();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = lin.forward(&mut g, &store, xv).unwrap();
        let w = g.constant(base.clone());
        let plain = g.matmul_bt(xv, w).unwrap();
        assert_eq!(g.value(y), g.value(plain));
        assert_eq!(adapter.merge(&store, &base).unwrap(), base);
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let (mut store, mut r) = setup();
        let mut pb = ParamBuilder::new(&mut store, &mut r, "x");
        let blk = CrossAttentionBlock::new(&mut pb, "a", AttentionSpec::plain(4, 2).with_residual_norm()).unwrap();
        let q = Tensor::randn(&[3, 4], 1.0, &mut r);
        let kv = Tensor::randn(&[5, 4], 1.0, &mut r);
        let ids: Vec<_> = store.ids().collect();
        let err = grad_check_params(
            &mut store,
            &ids,
            |g, s| {
                let q = g.constant(q.clone());
                let kv = g.constant(kv.clone());
                let y = blk.forward(g, s, q, kv)?;
                let y = g.square(y);
                Ok(g.sum(y))
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
