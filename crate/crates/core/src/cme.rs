//! Cross-modal enhancer: two five-block cross-attention pipelines (visual and
//! textual) that turn the aligned guidance into the conditioning features of
//! the diffusion editor.

use crate::autograd::{Graph, Var};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::nn::{AttentionSpec, CrossAttentionBlock, LayerNorm, Linear, ParamBuilder};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Visual,
    Textual,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Visual => "visual",
            Modality::Textual => "textual",
        }
    }
}

/// Which intermediate is emitted as the enhancer's guidance output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EBar {
    VBar,
    F1,
}

impl EBar {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "v_bar" => Ok(EBar::VBar),
            "f1" => Ok(EBar::F1),
            other => Err(Error::Config(format!("cme.e_bar must be v_bar or f1, got `{other}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Enhancer {
    pub modality: Modality,
    /// Learnable queries `Q_e`, `[n_e, d_diff]`.
    pub queries: ParamId,
    pub ctx_proj: Linear,
    pub cue_proj: Linear,
    pub blocks: [CrossAttentionBlock; 5],
    pub norm3: LayerNorm,
    pub out_linear: Linear,
    pub norm5: LayerNorm,
    pub e_bar: EBar,
}

/// Intermediate features of one enhancer pass.
#[derive(Clone, Copy, Debug)]
pub struct EnhancerOutput {
    pub f1: Var,
    pub f2: Var,
    pub v_bar: Var,
    pub g: Var,
    pub r_bar: Var,
    pub e_bar: Var,
}

impl Enhancer {
    /// `d_ctx` / `d_cue` are the widths of the raw modality context and cues.
    pub fn new(
        pb: &mut ParamBuilder,
        cfg: &PipelineConfig,
        modality: Modality,
        d_ctx: usize,
        d_cue: usize,
    ) -> Result<Self> {
        let d = cfg.dims.d_diff;
        let mut pb = pb.scope(modality.name());
        let spec = AttentionSpec::plain(d, cfg.cme.heads);
        let mut block = |i: usize| CrossAttentionBlock::new(&mut pb, &format!("block{i}"), spec);
        let blocks = [block(1)?, block(2)?, block(3)?, block(4)?, block(5)?];
        Ok(Enhancer {
            modality,
            queries: pb.normal("queries", &[cfg.cme.n_e, d], 1.0)?,
            ctx_proj: Linear::new(&mut pb, "ctx_proj", d_ctx, d, true)?,
            cue_proj: Linear::new(&mut pb, "cue_proj", d_cue, d, true)?,
            blocks,
            norm3: LayerNorm::new(&mut pb, "norm3", d)?,
            out_linear: Linear::new(&mut pb, "out_linear", d, d, true)?,
            norm5: LayerNorm::new(&mut pb, "norm5", d)?,
            e_bar: EBar::parse(&cfg.cme.e_bar)?,
        })
    }

    /// The five-block dataflow on inputs already in the diffusion width.
    pub fn forward_projected(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        v_hat: Var,
        ctx: Var,
        cues: Var,
    ) -> Result<EnhancerOutput> {
        let [b1, b2, b3, b4, b5] = &self.blocks;
        let q = g.param(store, self.queries);
        let f1 = b1.forward(g, store, q, v_hat)?;
        let f2 = b2.forward(g, store, ctx, cues)?;
        let a3 = b3.forward(g, store, f1, f2)?;
        let s3 = g.add(f1, a3)?;
        let v_bar = self.norm3.forward(g, store, s3)?;
        let gv = b4.forward(g, store, f2, v_bar)?;
        let a5 = b5.forward(g, store, gv, cues)?;
        let l5 = self.out_linear.forward(g, store, a5)?;
        let r_bar = self.norm5.forward(g, store, l5)?;
        let e_bar = match self.e_bar {
            EBar::VBar => v_bar,
            EBar::F1 => f1,
        };
        Ok(EnhancerOutput {
            f1,
            f2,
            v_bar,
            g: gv,
            r_bar,
            e_bar,
        })
    }

    /// Projects the raw context and cues into the diffusion width, then runs the blocks.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, v_hat: Var, ctx: Var, cues: Var) -> Result<EnhancerOutput> {
        let ctx = self.ctx_proj.forward(g, store, ctx)?;
        let cues = self.cue_proj.forward(g, store, cues)?;
        self.forward_projected(g, store, v_hat, ctx, cues)
    }
}

/// `(R̄_vis, ē_vis, R̄_txt, ē_txt)`.
#[derive(Clone, Copy, Debug)]
pub struct Enhanced {
    pub r_vis: Var,
    pub e_vis: Var,
    pub r_txt: Var,
    pub e_txt: Var,
}

#[derive(Clone, Debug)]
pub struct Cme {
    pub visual: Enhancer,
    pub textual: Enhancer,
}

impl Cme {
    pub fn new(pb: &mut ParamBuilder, cfg: &PipelineConfig) -> Result<Self> {
        let mut pb = pb.scope("cme");
        let (de, dl) = (cfg.dims.d_enc, cfg.dims.d_llm);
        Ok(Cme {
            visual: Enhancer::new(&mut pb, cfg, Modality::Visual, de, dl)?,
            textual: Enhancer::new(&mut pb, cfg, Modality::Textual, de, dl)?,
        })
    }

    pub fn enhance(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        v_hat: Var,
        img_feat: Var,
        r_v: Var,
        txt_feat: Var,
        r_t: Var,
    ) -> Result<Enhanced> {
        let vis = self.visual.forward(g, store, v_hat, img_feat, r_v)?;
        let txt = self.textual.forward(g, store, v_hat, txt_feat, r_t)?;
        Ok(Enhanced {
            r_vis: vis.r_bar,
            e_vis: vis.e_bar,
            r_txt: txt.r_bar,
            e_txt: txt.e_bar,
        })
    }
}
