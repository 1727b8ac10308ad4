//! The assembled editing model: parameter construction, the shared guidance
//! forward pass, training losses, checkpoints and single-image editing.

use std::path::Path;

use crate::autograd::{Graph, Var};
use crate::cme::{Cme, Enhanced};
use crate::config::PipelineConfig;
use crate::diffusion::{self, Conditioning, Denoiser, DiffusionDraw, NoiseSchedule};
use crate::encoders::{ImageAdapter, ImageEncoder, TextEncoder, Vocabulary};
use crate::error::{Error, Result};
use crate::frce::{self, Frce, ObjectExtractor, ReasoningCues, Segmenter};
use crate::guidance::{self, Boundaries, GuidanceLM, QFormer};
use crate::nn::{Linear, ParamBuilder};
use crate::params::ParamStore;
use crate::rng::{self, StreamRng};
use crate::tensor::Tensor;

/// Trainable groups and the name pattern that selects each.
pub const TRAINABLE_GROUPS: [(&str, &str); 6] = [
    ("lora", ".lora."),
    ("image_adapter", "image_adapter."),
    ("frce", "frce."),
    ("qformer", "qformer."),
    ("cme", "cme."),
    ("denoiser", "denoiser."),
];

/// Gradient norm over parameters whose name contains `pattern`.
pub fn group_grad_norm(store: &ParamStore, pattern: &str) -> f64 {
    store
        .ids()
        .filter(|&id| store.name(id).contains(pattern))
        .flat_map(|id| store.grad(id).data().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

pub fn is_lora(name: &str) -> bool {
    name.contains(".lora.")
}

pub struct Model {
    pub cfg: PipelineConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub sched: NoiseSchedule,
    pub image_encoder: ImageEncoder,
    pub text_encoder: TextEncoder,
    pub image_adapter: ImageAdapter,
    pub text_adapter: Linear,
    pub frce: Frce,
    pub lm: GuidanceLM,
    pub qformer: QFormer,
    pub cme: Cme,
    pub denoiser: Denoiser,
    segmenter: Box<dyn Segmenter>,
    extractor: Box<dyn ObjectExtractor>,
}

/// Everything the guidance path produces for one source image and instruction.
#[derive(Clone, Debug)]
pub struct Guide {
    pub boundaries: Boundaries,
    pub logits: Var,
    pub cues: ReasoningCues,
    pub v: Var,
    pub v_hat: Var,
    pub enhanced: Enhanced,
    pub cond: Conditioning,
    pub n_objects: usize,
    pub n_regions: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct Losses {
    pub l_mllm: Var,
    pub l_dm: Var,
}

/// Guidance features written by `edit`.
#[derive(Clone, Debug)]
pub struct GuidanceDump {
    pub v: Tensor,
    pub v_hat: Tensor,
    pub r_vis: Tensor,
    pub e_vis: Tensor,
    pub r_txt: Tensor,
    pub e_txt: Tensor,
}

impl GuidanceDump {
    pub fn entries(&self) -> [(&'static str, &Tensor); 6] {
        [
            ("v", &self.v),
            ("v_hat", &self.v_hat),
            ("r_bar_visual", &self.r_vis),
            ("e_bar_visual", &self.e_vis),
            ("r_bar_textual", &self.r_txt),
            ("e_bar_textual", &self.e_txt),
        ]
    }
}

pub struct EditOutput {
    pub image: Tensor,
    pub latent: Tensor,
    pub dump: GuidanceDump,
}

impl Model {
    pub fn new(cfg: &PipelineConfig, vocab: Vocabulary) -> Result<Self> {
        cfg.validate()?;
        if vocab.img_count() != cfg.vocab.img_tokens {
            return Err(Error::Config(format!(
                "vocabulary has {} IMG tokens, config expects {}",
                vocab.img_count(),
                cfg.vocab.img_tokens
            )));
        }
        let mut store = ParamStore::new();
        let mut r = rng::stream(cfg.seed, rng::INIT, 0);
        let mut pb = ParamBuilder::new(&mut store, &mut r, "");
        let image_encoder = ImageEncoder::new(&mut pb, cfg)?;
        let text_encoder = TextEncoder::new(&mut pb, cfg, vocab.len())?;
        let image_adapter = ImageAdapter::new(&mut pb, cfg)?;
        let text_adapter = Linear::new(&mut pb, "text_adapter", cfg.dims.d_enc, cfg.dims.d_llm, true)?;
        let frce = Frce::new(&mut pb, cfg)?;
        let lm = GuidanceLM::new(&mut pb, cfg, vocab.len())?;
        let qformer = QFormer::new(&mut pb, cfg)?;
        let cme = Cme::new(&mut pb, cfg)?;
        let denoiser = Denoiser::new(&mut pb, cfg, cfg.image_token_count(), cfg.encoders.max_text_len)?;
        Ok(Model {
            cfg: cfg.clone(),
            sched: NoiseSchedule::from_config(cfg)?,
            segmenter: frce::segmenter_for(cfg)?,
            extractor: frce::object_extractor_for(cfg)?,
            vocab,
            store,
            image_encoder,
            text_encoder,
            image_adapter,
            text_adapter,
            frce,
            lm,
            qformer,
            cme,
            denoiser,
        })
    }

    /// Shape of one latent, `[n_fine, d_enc]`.
    pub fn latent_shape(&self) -> [usize; 2] {
        let (gh, gw) = self.cfg.fine_grid();
        [gh * gw, self.cfg.dims.d_enc]
    }

    /// Fine-scale token grid of an image, outside any training graph.
    pub fn encode_latent(&self, img: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference();
        let toks = self.image_encoder.encode(&mut g, &self.store, img)?;
        Ok(g.value(toks.fine()).clone())
    }

    pub fn decode_latent(&self, latent: &Tensor) -> Result<Tensor> {
        self.image_encoder.decode_fine(&self.store, latent)
    }

    /// Source image and instruction through encoders, cue extraction, the
    /// language model, the query transformer and the enhancer.
    pub fn guide(&self, g: &mut Graph, src: &Tensor, instruction: &str) -> Result<Guide> {
        let store = &self.store;
        let tokens = self.image_encoder.encode(g, store, src)?;
        let ia = self.image_adapter.forward(g, store, &tokens)?;
        let seg = self.segmenter.segment(src)?;
        let obj_ids = frce::object_ids(&self.extractor.extract(instruction), &self.vocab);
        let objects = self.lm.embed_ids(g, store, &obj_ids)?;
        let cues = self.frce.forward(g, store, &tokens, &seg, objects)?;
        let text = self.text_encoder.encode(g, store, instruction, &self.vocab)?;
        let text_llm = self.text_adapter.forward(g, store, text.embedding)?;
        let img_rows = self.lm.embed_ids(g, store, &self.vocab.img_ids())?;
        let (seq, boundaries) = guidance::assemble_sequence(g, ia, cues.r_v, cues.r_t, text_llm, img_rows)?;
        let (hidden, logits) = self.lm.forward(g, store, seq)?;
        let v = guidance::extract_guidance(g, hidden, &boundaries, self.vocab.img_count())?;
        let v_hat = self.qformer.forward(g, store, v)?;
        let img_feat = tokens.all(g)?;
        let enhanced = self.cme.enhance(g, store, v_hat, img_feat, cues.r_v, text.embedding, cues.r_t)?;
        let context = g.concat(&[enhanced.e_vis, enhanced.e_txt], 0)?;
        let cond = Conditioning {
            img_lat: tokens.fine(),
            r_vis: enhanced.r_vis,
            r_txt: enhanced.r_txt,
            context,
        };
        Ok(Guide {
            boundaries,
            logits,
            cues,
            v,
            v_hat,
            enhanced,
            cond,
            n_objects: obj_ids.len(),
            n_regions: seg.n_regions,
        })
    }

    /// `(L_MLLM, L_DM)` for one sample under a fixed `(t, ε)` draw.
    pub fn losses(&self, g: &mut Graph, src: &Tensor, instruction: &str, tgt: &Tensor, draw: &DiffusionDraw) -> Result<(Guide, Losses)> {
        let guide = self.guide(g, src, instruction)?;
        let l_mllm = guidance::mllm_loss(g, guide.logits, &guide.boundaries, &self.vocab)?;
        let z0 = self.encode_latent(tgt)?;
        let l_dm = diffusion::diffusion_loss_with(g, &self.store, &self.denoiser, &self.sched, &z0, &guide.cond, draw)?;
        Ok((guide, Losses { l_mllm, l_dm }))
    }

    pub fn edit(&self, src: &Tensor, instruction: &str, rng: &mut StreamRng) -> Result<EditOutput> {
        let mut g = Graph::inference();
        let guide = self.guide(&mut g, src, instruction)?;
        let latent = diffusion::sample_latent(
            &self.store,
            &self.denoiser,
            &self.sched,
            &mut g,
            &guide.cond,
            &self.latent_shape(),
            self.cfg.diffusion.sample_steps,
            rng,
        )?;
        let image = self.decode_latent(&latent)?;
        let val = |v: Var| g.value(v).clone();
        let dump = GuidanceDump {
            v: val(guide.v),
            v_hat: val(guide.v_hat),
            r_vis: val(guide.enhanced.r_vis),
            e_vis: val(guide.enhanced.e_vis),
            r_txt: val(guide.enhanced.r_txt),
            e_txt: val(guide.enhanced.e_txt),
        };
        Ok(EditOutput { image, latent, dump })
    }

    /// Writes `base.rbck` (everything but adapters), `lora.rbck` and `vocab.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let hp = serde_json::to_value(self.cfg.to_flat()).expect("json");
        self.store.save_archive(&dir.join("base.rbck"), |n| !is_lora(n), hp.clone())?;
        self.store.save_archive(&dir.join("lora.rbck"), is_lora, hp)?;
        self.vocab.save(&dir.join("vocab.json"))
    }

    /// Builds from the config and the checkpoint's vocabulary, then loads both archives.
    pub fn load(cfg: &PipelineConfig, dir: &Path) -> Result<Self> {
        for f in ["base.rbck", "lora.rbck", "vocab.json"] {
            let p = dir.join(f);
            if !p.is_file() {
                return Err(Error::io(
                    &p,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint file missing"),
                ));
            }
        }
        let saved = crate::params::read_archive(&dir.join("base.rbck"))?.manifest.hyperparameters;
        let dims = |flat: &serde_json::Map<String, serde_json::Value>| -> String {
            flat.iter()
                .filter(|(k, _)| k.starts_with("image.") || k.starts_with("dims."))
                .map(|(k, v)| format!("{k}={v}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        let want: serde_json::Map<String, serde_json::Value> = cfg.to_flat().into_iter().collect();
        if let Some(have) = saved.as_object() {
            if dims(have) != dims(&want) {
                return Err(Error::Dimension {
                    op: "load_checkpoint",
                    detail: format!("checkpoint [{}] vs config [{}]", dims(have), dims(&want)),
                });
            }
        }
        let vocab = Vocabulary::load(&dir.join("vocab.json"))?;
        let mut m = Model::new(cfg, vocab)?;
        let n = m.store.load_archive(&dir.join("base.rbck"))? + m.store.load_archive(&dir.join("lora.rbck"))?;
        if n != m.store.len() {
            return Err(Error::Dimension {
                op: "load_checkpoint",
                detail: format!("checkpoint has {n} tensors, model has {}", m.store.len()),
            });
        }
        Ok(m)
    }
}
