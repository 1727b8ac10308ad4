//! Pipeline configuration.
//!
//! Files are flat JSON objects with dotted keys (`"cme.n_e": 16`). Loading
//! merges the file over the defaults, rejects unknown keys and validates every
//! field. The merged result is written back out as `config.json` next to every
//! artifact a command produces.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub image: ImageConfig,
    pub dims: DimsConfig,
    pub encoders: EncoderConfig,
    pub vocab: VocabConfig,
    pub frce: FrceConfig,
    pub lm: LmConfig,
    pub lora: LoraConfig,
    pub qformer: QFormerConfig,
    pub cme: CmeConfig,
    pub diffusion: DiffusionConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImageConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Patch sizes, one token grid per entry.
    pub patch_sizes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DimsConfig {
    pub d_enc: usize,
    pub d_llm: usize,
    pub d_diff: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub trainable: bool,
    pub max_text_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocabConfig {
    /// Number of reserved `[IMG_i]` tokens.
    pub img_tokens: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrceConfig {
    /// Side of the square token window regrouped by the patch adapter.
    pub window: usize,
    pub heads: usize,
    pub id_controller_heads: usize,
    /// Luminance distance from the background estimate that marks foreground.
    pub tau: f64,
    pub min_area: usize,
    pub segmenter: String,
    pub object_extractor: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    pub layers: usize,
    pub heads: usize,
    pub frozen_base: bool,
    pub tied_head: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QFormerConfig {
    pub layers: usize,
    pub queries: usize,
    pub d_model: usize,
    pub heads: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CmeConfig {
    pub n_e: usize,
    pub heads: usize,
    /// Which intermediate is emitted as ē: `"v_bar"` or `"f1"`.
    pub e_bar: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub t_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub blocks: usize,
    pub heads: usize,
    pub sample_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    /// 0 disables periodic checkpoints (a final one is always written).
    pub checkpoint_every: u64,
    /// Size of the fixed overfit batch; 0 trains normally.
    pub overfit: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub count: usize,
    pub category_mix: BTreeMap<String, f64>,
    /// Source candidates synthesized per sample (M).
    pub candidates: usize,
    /// Candidates kept per sample (N).
    pub top_n: usize,
    pub rule_weight: f64,
    pub psnr_weight: f64,
    /// PSNR (dB) that maps to a normalized score of 1.
    pub psnr_cap: f64,
    pub val_fraction: f64,
    pub val_cap: usize,
}


impl Default for ImageConfig {
    fn default() -> Self {
        ImageConfig {
            height: 32,
            width: 32,
            channels: 3,
            patch_sizes: vec![4, 8],
        }
    }
}

impl Default for DimsConfig {
    fn default() -> Self {
        DimsConfig {
            d_enc: 32,
            d_llm: 64,
            d_diff: 32,
        }
    }
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            trainable: true,
            max_text_len: 16,
        }
    }
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig { img_tokens: 32 }
    }
}

impl Default for FrceConfig {
    fn default() -> Self {
        FrceConfig {
            window: 2,
            heads: 4,
            id_controller_heads: 4,
            tau: 0.1,
            min_area: 4,
            segmenter: "luminance-cc".into(),
            object_extractor: "stoplist".into(),
        }
    }
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            layers: 2,
            heads: 4,
            frozen_base: true,
            tied_head: false,
        }
    }
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 8,
            alpha: 16.0,
        }
    }
}

impl Default for QFormerConfig {
    fn default() -> Self {
        QFormerConfig {
            layers: 6,
            queries: 77,
            d_model: 32,
            heads: 4,
        }
    }
}

impl Default for CmeConfig {
    fn default() -> Self {
        CmeConfig {
            n_e: 16,
            heads: 4,
            e_bar: "v_bar".into(),
        }
    }
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            t_steps: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
            blocks: 2,
            heads: 4,
            sample_steps: 10,
        }
    }
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-3,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 16,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 100,
            checkpoint_every: 50,
            overfit: 0,
        }
    }
}

pub const CATEGORY_NAMES: [&str; 4] = ["physical", "temporal", "causal", "story"];

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            count: 400,
            category_mix: CATEGORY_NAMES.iter().map(|c| (c.to_string(), 1.0)).collect(),
            candidates: 8,
            top_n: 1,
            rule_weight: 0.5,
            psnr_weight: 0.5,
            psnr_cap: 50.0,
            val_fraction: 0.1,
            val_cap: 400,
        }
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl PipelineConfig {
    /// Loads a dotted-key JSON file merged over the defaults.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let v: Value = serde_json::from_str(&text)
            .map_err(|e| bad(format!("{}: {e}", path.display())))?;
        let Value::Object(map) = v else {
            return Err(bad(format!("{}: expected a JSON object", path.display())));
        };
        let mut cfg = PipelineConfig::default();
        cfg.apply_flat(map.into_iter().collect())?;
        Ok(cfg)
    }

    /// Applies dotted-key overrides; on a validation error `self` is left unchanged.
    pub fn apply_flat(&mut self, overrides: Vec<(String, Value)>) -> Result<()> {
        let mut flat = self.to_flat();
        for (k, v) in overrides {
            let is_known = flat.contains_key(&k)
                || k.strip_prefix("data.category_mix.").is_some_and(|c| CATEGORY_NAMES.contains(&c));
            if !is_known {
                return Err(bad(format!("unknown config key `{k}`")));
            }
            flat.insert(k, v);
        }
        let nested = unflatten(&flat)?;
        let next: PipelineConfig = serde_json::from_value(nested).map_err(|e| bad(e.to_string()))?;
        next.validate()?;
        *self = next;
        Ok(())
    }

    /// Applies one `key=value` override; the value is parsed as JSON, falling back to a string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| bad(format!("override `{assignment}` is not key=value")))?;
        let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
        self.apply_flat(vec![(k.trim().to_string(), value)])
    }

    pub fn to_flat(&self) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        flatten("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        out
    }

    /// Pretty dotted-key JSON of the effective configuration.
    pub fn to_flat_json(&self) -> String {
        let map: Map<String, Value> = self.to_flat().into_iter().collect();
        serde_json::to_string_pretty(&Value::Object(map)).expect("json") + "\n"
    }

    pub fn write_effective(&self, dir: &Path) -> Result<()> {
        let path = dir.join("config.json");
        std::fs::write(&path, self.to_flat_json()).map_err(|e| Error::io(path, e))
    }

    /// Parses `physical=1,temporal=2,...` into the category mix.
    pub fn set_category_mix(&mut self, spec: &str) -> Result<()> {
        let mut overrides = Vec::new();
        for part in spec.split(',').filter(|p| !p.trim().is_empty()) {
            let (name, w) = part
                .split_once('=')
                .ok_or_else(|| bad(format!("category mix entry `{part}` is not name=weight")))?;
            let w: f64 = w
                .trim()
                .parse()
                .map_err(|_| bad(format!("category weight `{w}` is not a number")))?;
            overrides.push((format!("data.category_mix.{}", name.trim().to_lowercase()), Value::from(w)));
        }
        self.apply_flat(overrides)
    }

    pub fn validate(&self) -> Result<()> {
        let im = &self.image;
        if im.height == 0 || im.width == 0 || im.channels == 0 {
            return Err(bad("image dims must be positive"));
        }
        if im.patch_sizes.is_empty() {
            return Err(bad("image.patch_sizes must not be empty"));
        }
        for &p in &im.patch_sizes {
            if p == 0 || !im.height.is_multiple_of(p) || !im.width.is_multiple_of(p) {
                return Err(bad(format!(
                    "patch size {p} must divide image {}x{}",
                    im.height, im.width
                )));
            }
        }
        let mut sorted = im.patch_sizes.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != im.patch_sizes.len() {
            return Err(bad("image.patch_sizes must be distinct"));
        }
        let d = &self.dims;
        if d.d_enc == 0 || d.d_llm == 0 || d.d_diff == 0 {
            return Err(bad("dims must be positive"));
        }
        if self.encoders.max_text_len < 3 {
            return Err(bad("encoders.max_text_len must be at least 3"));
        }
        if self.vocab.img_tokens == 0 {
            return Err(bad("vocab.img_tokens must be positive"));
        }
        let f = &self.frce;
        let (gh, gw) = self.fine_grid();
        if f.window == 0 || gh % f.window != 0 || gw % f.window != 0 {
            return Err(bad(format!(
                "frce.window {} must divide the {gh}x{gw} fine token grid",
                f.window
            )));
        }
        if !(f.tau > 0.0 && f.tau < 1.0) {
            return Err(bad("frce.tau must lie in (0, 1)"));
        }
        if f.segmenter != "luminance-cc" {
            return Err(bad(format!("unknown segmenter `{}`", f.segmenter)));
        }
        if f.object_extractor != "stoplist" {
            return Err(bad(format!("unknown object extractor `{}`", f.object_extractor)));
        }
        check_heads("frce.heads", d.d_llm, f.heads)?;
        check_heads("frce.id_controller_heads", d.d_llm, f.id_controller_heads)?;
        if self.lm.layers == 0 {
            return Err(bad("lm.layers must be positive"));
        }
        check_heads("lm.heads", d.d_llm, self.lm.heads)?;
        if self.lora.rank == 0 || !(self.lora.alpha > 0.0) {
            return Err(bad("lora rank and alpha must be positive"));
        }
        let q = &self.qformer;
        if q.layers == 0 || q.queries == 0 {
            return Err(bad("qformer layers and queries must be positive"));
        }
        check_heads("qformer.heads", q.d_model, q.heads)?;
        if self.cme.n_e == 0 {
            return Err(bad("cme.n_e must be positive"));
        }
        check_heads("cme.heads", d.d_diff, self.cme.heads)?;
        if !matches!(self.cme.e_bar.as_str(), "v_bar" | "f1") {
            return Err(bad(format!("cme.e_bar must be v_bar or f1, got `{}`", self.cme.e_bar)));
        }
        let df = &self.diffusion;
        if df.t_steps == 0 {
            return Err(bad("diffusion.t_steps must be positive"));
        }
        if !(df.beta_start > 0.0 && df.beta_start <= df.beta_end && df.beta_end < 1.0) {
            return Err(bad("diffusion betas must satisfy 0 < beta_start <= beta_end < 1"));
        }
        if df.sample_steps == 0 || df.sample_steps > df.t_steps {
            return Err(bad("diffusion.sample_steps must lie in [1, t_steps]"));
        }
        check_heads("diffusion.heads", d.d_diff, df.heads)?;
        let o = &self.optim;
        if !(o.lr > 0.0) || o.weight_decay < 0.0 || o.batch_size == 0 {
            return Err(bad("optim: lr > 0, weight_decay >= 0, batch_size >= 1"));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return Err(bad("optim betas must lie in [0, 1) and eps > 0"));
        }
        let dc = &self.data;
        for (name, w) in &dc.category_mix {
            if !CATEGORY_NAMES.contains(&name.as_str()) {
                return Err(bad(format!("unknown category `{name}`")));
            }
            if !(w.is_finite() && *w >= 0.0) {
                return Err(bad(format!("category weight for {name} must be non-negative")));
            }
        }
        if dc.category_mix.values().sum::<f64>() <= 0.0 {
            return Err(bad("category mix must have positive total weight"));
        }
        if dc.candidates == 0 || dc.top_n == 0 || dc.top_n > dc.candidates {
            return Err(bad("data: need 1 <= top_n <= candidates"));
        }
        if dc.rule_weight < 0.0 || dc.psnr_weight < 0.0 || (dc.rule_weight + dc.psnr_weight - 1.0).abs() > 1e-12 {
            return Err(bad("data.rule_weight + data.psnr_weight must equal 1"));
        }
        if !(dc.psnr_cap > 0.0) || !(0.0..=1.0).contains(&dc.val_fraction) {
            return Err(bad("data: psnr_cap > 0 and val_fraction in [0, 1]"));
        }
        Ok(())
    }

    /// Smallest configured patch size.
    pub fn fine_patch(&self) -> usize {
        *self.image.patch_sizes.iter().min().expect("validated")
    }

    /// Token grid (rows, cols) at the finest scale.
    pub fn fine_grid(&self) -> (usize, usize) {
        let p = self.fine_patch();
        (self.image.height / p, self.image.width / p)
    }

    pub fn image_token_count(&self) -> usize {
        self.image
            .patch_sizes
            .iter()
            .map(|p| (self.image.height / p) * (self.image.width / p))
            .sum()
    }

    /// A small configuration for gradient audits and fast tests.
    pub fn toy() -> Self {
        let mut c = PipelineConfig::default();
        c.image = ImageConfig {
            height: 8,
            width: 8,
            channels: 3,
            patch_sizes: vec![2, 4],
        };
        c.dims = DimsConfig {
            d_enc: 4,
            d_llm: 4,
            d_diff: 4,
        };
        c.encoders.max_text_len = 6;
        c.vocab.img_tokens = 2;
        c.frce.heads = 2;
        c.frce.id_controller_heads = 2;
        c.lm.layers = 1;
        c.lm.heads = 2;
        c.lora.rank = 2;
        c.lora.alpha = 4.0;
        c.qformer = QFormerConfig {
            layers: 2,
            queries: 3,
            d_model: 4,
            heads: 2,
        };
        c.cme.n_e = 2;
        c.cme.heads = 2;
        c.diffusion.t_steps = 10;
        c.diffusion.heads = 2;
        c.diffusion.blocks = 1;
        c.diffusion.sample_steps = 2;
        c
    }
}

fn check_heads(key: &str, d: usize, heads: usize) -> Result<()> {
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(bad(format!("{key} = {heads} does not divide width {d}")));
    }
    Ok(())
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Result<Value> {
    let mut root = Map::new();
    for (k, v) in flat {
        let parts: Vec<&str> = k.split('.').collect();
        let mut node = &mut root;
        for p in &parts[..parts.len() - 1] {
            let entry = node
                .entry(p.to_string())
                .or_insert_with(|| Value::Object(Map::new()));
            node = entry
                .as_object_mut()
                .ok_or_else(|| bad(format!("config key `{k}` collides with a scalar")))?;
        }
        node.insert(parts[parts.len() - 1].to_string(), v.clone());
    }
    Ok(Value::Object(root))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_carry_reported_constants() {
        let c = PipelineConfig::default();
        c.validate().unwrap();
        assert_eq!((c.lora.rank, c.lora.alpha), (8, 16.0));
        assert_eq!(c.vocab.img_tokens, 32);
        assert_eq!((c.qformer.layers, c.qformer.queries), (6, 77));
        assert_eq!((c.optim.lr, c.optim.weight_decay, c.optim.batch_size), (1e-3, 1e-2, 16));
        PipelineConfig::toy().validate().unwrap();
    }

    #[test]
    fn flat_round_trip() {
        let c = PipelineConfig::default();
        let mut d = PipelineConfig::default();
        d.apply_flat(c.to_flat().into_iter().collect()).unwrap();
        assert_eq!(c, d);
        assert!(c.to_flat().contains_key("cme.n_e"));
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut c = PipelineConfig::default();
        let err = c.set("cme.bogus=3").unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(c.set("data.category_mix.weather=1").is_err());
    }

    #[test]
    fn overrides_apply_and_validate() {
        let mut c = PipelineConfig::default();
        c.set("cme.n_e=8").unwrap();
        assert_eq!(c.cme.n_e, 8);
        assert!(c.set("lm.heads=5").is_err());
        assert!(c.set_category_mix("physical=-1").is_err());
        c.set_category_mix("physical=2, story=0").unwrap();
        assert_eq!(c.data.category_mix["physical"], 2.0);
        assert_eq!(c.data.category_mix["story"], 0.0);
    }

    #[test]
    fn load_from_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"seed": 9, "diffusion.t_steps": 50}"#).unwrap();
        let c = PipelineConfig::load(&p).unwrap();
        assert_eq!((c.seed, c.diffusion.t_steps), (9, 50));
        std::fs::write(&p, r#"{"nope": 1}"#).unwrap();
        assert!(PipelineConfig::load(&p).is_err());
    }
}
