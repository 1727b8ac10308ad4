//! Small trainable stand-ins for the image encoder, text encoder, image
//! adapter and tokenizer.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::autograd::{Graph, Var};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::nn::{Linear, ParamBuilder};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Lowercases and splits into alphanumeric words and single punctuation marks.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() || ch == '\'' {
            word.push(ch);
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Token ↔ id map: specials, corpus words, then the `r` reserved `[IMG_i]` ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    img_start: usize,
}

impl Vocabulary {
    /// Words sorted by descending frequency, ties broken lexicographically.
    pub fn build(corpus: &[String], r: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Validation("vocabulary corpus is empty".into()));
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for line in corpus {
            for tok in tokenize(line) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut words: Vec<(String, usize)> = counts.into_iter().collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(words.into_iter().map(|(w, _)| w));
        let img_start = tokens.len();
        tokens.extend((1..=r).map(|i| format!("[IMG_{i}]")));
        Self::from_tokens(tokens, img_start)
    }

    fn from_tokens(tokens: Vec<String>, img_start: usize) -> Result<Self> {
        let index: HashMap<String, usize> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        if index.len() != tokens.len() {
            return Err(Error::Validation("vocabulary has duplicate tokens".into()));
        }
        Ok(Vocabulary {
            tokens,
            index,
            img_start,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn img_count(&self) -> usize {
        self.tokens.len() - self.img_start
    }

    /// Id of `[IMG_i]`, 1-based.
    pub fn img_id(&self, i: usize) -> usize {
        assert!(i >= 1 && i <= self.img_count(), "IMG index {i} out of range");
        self.img_start + i - 1
    }

    pub fn img_ids(&self) -> Vec<usize> {
        (self.img_start..self.tokens.len()).collect()
    }

    pub fn is_img(&self, id: usize) -> bool {
        id >= self.img_start
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    /// Word id, or UNK for out-of-vocabulary words (IMG names included).
    pub fn id(&self, word: &str) -> usize {
        match self.index.get(word) {
            Some(&i) if i < self.img_start && i > UNK => i,
            _ => UNK,
        }
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| !matches!(i, PAD | BOS | EOS))
            .map(|&i| self.tokens[i].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_json(&self) -> String {
        let map: serde_json::Map<String, serde_json::Value> = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), serde_json::Value::from(i)))
            .collect();
        serde_json::to_string_pretty(&map).expect("json") + "\n"
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let map: BTreeMap<String, usize> =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        let mut tokens = vec![String::new(); map.len()];
        for (t, i) in map {
            if i >= tokens.len() || !tokens[i].is_empty() {
                return Err(Error::format(path, format!("ids are not a dense range at `{t}`")));
            }
            tokens[i] = t;
        }
        if tokens[..SPECIALS.len().min(tokens.len())] != SPECIALS[..] {
            return Err(Error::format(path, "special tokens missing"));
        }
        let img_start = tokens
            .iter()
            .position(|t| t.starts_with("[IMG_"))
            .unwrap_or(tokens.len());
        if tokens[img_start..].iter().enumerate().any(|(k, t)| *t != format!("[IMG_{}]", k + 1)) {
            return Err(Error::format(path, "IMG tokens are not the final contiguous range"));
        }
        Self::from_tokens(tokens, img_start).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Splits an `[H, W, C]` image into row-major `p×p` patches, each flattened as `(dy, dx, c)`.
pub fn patchify(img: &Tensor, p: usize) -> Result<Tensor> {
    let (h, w, c) = image_dims(img)?;
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Validation(format!("patch {p} does not divide {h}x{w}")));
    }
    let (gh, gw) = (h / p, w / p);
    let src = img.data();
    let mut out = Vec::with_capacity(h * w * c);
    for py in 0..gh {
        for px in 0..gw {
            for dy in 0..p {
                let row = (py * p + dy) * w + px * p;
                out.extend_from_slice(&src[row * c..(row + p) * c]);
            }
        }
    }
    Tensor::new(&[gh * gw, p * p * c], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, p: usize, h: usize, w: usize, c: usize) -> Result<Tensor> {
    let (n, d) = patches.dims2()?;
    if n != (h / p) * (w / p) || d != p * p * c {
        return Err(Error::dim("unpatchify", format!("{:?} for {h}x{w}x{c} / {p}", patches.shape())));
    }
    let gw = w / p;
    let mut out = vec![0.0; h * w * c];
    for (k, patch) in patches.data().chunks_exact(d).enumerate() {
        let (py, px) = (k / gw, k % gw);
        for dy in 0..p {
            let row = (py * p + dy) * w + px * p;
            out[row * c..(row + p) * c].copy_from_slice(&patch[dy * p * c..(dy + 1) * p * c]);
        }
    }
    Tensor::new(&[h, w, c], out)
}

pub fn image_dims(img: &Tensor) -> Result<(usize, usize, usize)> {
    match img.shape() {
        [h, w, c] => Ok((*h, *w, *c)),
        s => Err(Error::Validation(format!("image must be [H, W, C], got {s:?}"))),
    }
}

/// Checks dims against the config and that every pixel lies in `[0, 1]`.
pub fn validate_image(img: &Tensor, cfg: &PipelineConfig) -> Result<()> {
    let (h, w, c) = image_dims(img)?;
    let im = &cfg.image;
    if (h, w, c) != (im.height, im.width, im.channels) {
        return Err(Error::Validation(format!(
            "image is {h}x{w}x{c}, config expects {}x{}x{}",
            im.height, im.width, im.channels
        )));
    }
    if let Some(v) = img.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Validation(format!("pixel value {v} outside [0, 1]")));
    }
    Ok(())
}

/// Per-scale token matrices of one image.
#[derive(Clone, Debug)]
pub struct ImageTokens {
    /// One `[n_s, d_enc]` var per configured patch size, in config order.
    pub per_scale: Vec<Var>,
    pub patch_sizes: Vec<usize>,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageTokens {
    fn fine_index(&self) -> usize {
        (0..self.patch_sizes.len())
            .min_by_key(|&i| self.patch_sizes[i])
            .expect("at least one scale")
    }

    pub fn fine(&self) -> Var {
        self.per_scale[self.fine_index()]
    }

    pub fn fine_patch(&self) -> usize {
        self.patch_sizes[self.fine_index()]
    }

    pub fn fine_grid(&self) -> (usize, usize) {
        let p = self.fine_patch();
        (self.height / p, self.width / p)
    }

    /// Scale indices ordered coarse (largest patch) to fine.
    pub fn coarse_to_fine(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.patch_sizes.len()).collect();
        idx.sort_by(|&a, &b| self.patch_sizes[b].cmp(&self.patch_sizes[a]));
        idx
    }

    /// All tokens stacked coarse-to-fine.
    pub fn all(&self, g: &mut Graph) -> Result<Var> {
        let parts: Vec<Var> = self.coarse_to_fine().iter().map(|&i| self.per_scale[i]).collect();
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        g.concat(&parts, 0)
    }
}

#[derive(Clone, Debug)]
struct ScaleEncoder {
    patch: usize,
    proj: Linear,
    pos: ParamId,
}

/// Patch-projection image encoder with a learned positional embedding per scale.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    scales: Vec<ScaleEncoder>,
    height: usize,
    width: usize,
    channels: usize,
}

impl ImageEncoder {
    pub fn new(pb: &mut ParamBuilder, cfg: &PipelineConfig) -> Result<Self> {
        let mut pb = pb.scope("image_encoder").trainable(cfg.encoders.trainable);
        let im = &cfg.image;
        let d = cfg.dims.d_enc;
        let mut scales = Vec::new();
        for &p in &im.patch_sizes {
            let n = (im.height / p) * (im.width / p);
            let mut sb = pb.scope(&format!("p{p}"));
            let proj = Linear::new(&mut sb, "proj", p * p * im.channels, d, true)?;
            let pos = sb.normal("pos", &[n, d], 0.02)?;
            scales.push(ScaleEncoder { patch: p, proj, pos });
        }
        Ok(ImageEncoder {
            scales,
            height: im.height,
            width: im.width,
            channels: im.channels,
        })
    }

    pub fn encode(&self, g: &mut Graph, store: &ParamStore, img: &Tensor) -> Result<ImageTokens> {
        let (h, w, c) = image_dims(img)?;
        if (h, w, c) != (self.height, self.width, self.channels) {
            return Err(Error::Validation(format!(
                "image is {h}x{w}x{c}, encoder expects {}x{}x{}",
                self.height, self.width, self.channels
            )));
        }
        if let Some(v) = img.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("pixel value {v} outside [0, 1]")));
        }
        let mut per_scale = Vec::with_capacity(self.scales.len());
        for s in &self.scales {
            let patches = g.constant(patchify(img, s.patch)?);
            let t = s.proj.forward(g, store, patches)?;
            let pos = g.param(store, s.pos);
            per_scale.push(g.add(t, pos)?);
        }
        Ok(ImageTokens {
            per_scale,
            patch_sizes: self.scales.iter().map(|s| s.patch).collect(),
            height: h,
            width: w,
            channels: c,
        })
    }

    /// Maps fine-scale tokens back to pixels through the transposed patch
    /// projection, clamped to `[0, 1]`.
    pub fn decode_fine(&self, store: &ParamStore, tokens: &Tensor) -> Result<Tensor> {
        let s = self
            .scales
            .iter()
            .min_by_key(|s| s.patch)
            .expect("at least one scale");
        let pos = store.value(s.pos);
        if tokens.shape() != pos.shape() {
            return Err(Error::dim("decode", format!("{:?} vs {:?}", tokens.shape(), pos.shape())));
        }
        let bias = store.value(s.proj.bias.expect("encoder projection has bias"));
        let d = bias.len();
        let mut centered = tokens.zip(pos, |t, p| t - p)?;
        for row in centered.data_mut().chunks_exact_mut(d) {
            for (v, b) in row.iter_mut().zip(bias.data()) {
                *v -= b;
            }
        }
        // [n, d_enc] · W[d_enc, p²C]
        let pixels = centered.matmul(store.value(s.proj.weight))?.map(|v| v.clamp(0.0, 1.0));
        unpatchify(&pixels, s.patch, self.height, self.width, self.channels)
    }
}

/// Text encoding of one instruction.
#[derive(Clone, Debug)]
pub struct TextEncoding {
    /// `[max_len, d_enc]`.
    pub embedding: Var,
    /// Framed and padded ids, length `max_len`.
    pub ids: Vec<usize>,
    /// Rows before padding: `min(max_len, tokens + 2)`.
    pub content_len: usize,
}

/// Token embedding plus learned positions, framed by BOS/EOS and padded.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    embed: ParamId,
    pos: ParamId,
    max_len: usize,
}

impl TextEncoder {
    pub fn new(pb: &mut ParamBuilder, cfg: &PipelineConfig, vocab_len: usize) -> Result<Self> {
        if cfg.encoders.max_text_len < 3 {
            return Err(Error::Config("max_text_len must be at least 3".into()));
        }
        let mut pb = pb.scope("text_encoder").trainable(cfg.encoders.trainable);
        Ok(TextEncoder {
            embed: pb.normal("embed", &[vocab_len, cfg.dims.d_enc], 0.5)?,
            pos: pb.normal("pos", &[cfg.encoders.max_text_len, cfg.dims.d_enc], 0.02)?,
            max_len: cfg.encoders.max_text_len,
        })
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// `[BOS] words.. [EOS] [PAD]..`, truncated so the frame fits in `max_len`.
    pub fn frame_ids(&self, instruction: &str, vocab: &Vocabulary) -> Result<(Vec<usize>, usize)> {
        if instruction.trim().is_empty() {
            return Err(Error::Validation("instruction is empty".into()));
        }
        let words = vocab.encode(instruction);
        let keep = words.len().min(self.max_len - 2);
        let mut ids = Vec::with_capacity(self.max_len);
        ids.push(BOS);
        ids.extend_from_slice(&words[..keep]);
        ids.push(EOS);
        let content_len = ids.len();
        ids.resize(self.max_len, PAD);
        Ok((ids, content_len))
    }

    pub fn encode(&self, g: &mut Graph, store: &ParamStore, instruction: &str, vocab: &Vocabulary) -> Result<TextEncoding> {
        let (ids, content_len) = self.frame_ids(instruction, vocab)?;
        let table = g.param(store, self.embed);
        let rows = g.gather_rows(table, &ids)?;
        let pos = g.param(store, self.pos);
        let embedding = g.add(rows, pos)?;
        Ok(TextEncoding {
            embedding,
            ids,
            content_len,
        })
    }
}

/// Per-token linear map into the language model width; scales stacked coarse-to-fine.
#[derive(Clone, Debug)]
pub struct ImageAdapter {
    pub proj: Linear,
}

impl ImageAdapter {
    pub fn new(pb: &mut ParamBuilder, cfg: &PipelineConfig) -> Result<Self> {
        Ok(ImageAdapter {
            proj: Linear::new(pb, "image_adapter", cfg.dims.d_enc, cfg.dims.d_llm, true)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, tokens: &ImageTokens) -> Result<Var> {
        let all = tokens.all(g)?;
        self.proj.forward(g, store, all)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn vocab() -> Vocabulary {
        Vocabulary::build(
            &["what would happen if the ice melted?".to_string(), "the cube".to_string()],
            32,
        )
        .unwrap()
    }

    #[test]
    fn tokenizer_hand_count() {
        let toks = tokenize("What would happen if the ice melted?");
        assert_eq!(toks, ["what", "would", "happen", "if", "the", "ice", "melted", "?"]);
    }

    #[test]
    fn vocab_layout() {
        let v = Vocabulary::build(&["hello".to_string()], 32).unwrap();
        assert_eq!(v.len(), 4 + 1 + 32);
        assert_eq!(v.img_id(1), 5);
        assert_eq!(v.img_ids(), (5..37).collect::<Vec<_>>());
        assert!(Vocabulary::build(&[], 32).is_err());
        // "the" occurs twice, everything else once and sorted lexicographically.
        let v = vocab();
        assert_eq!(v.token(4), "the");
        assert_eq!(v.token(5), "?");
        assert_eq!(vocab(), v);
    }

    #[test]
    fn encode_decode_round_trip_and_unk() {
        let v = vocab();
        let text = "what would happen if the cube melted ?";
        assert_eq!(v.decode(&v.encode(text)), text);
        assert_eq!(v.encode("zebra"), vec![UNK]);
        assert_eq!(v.encode("[IMG_1]").iter().filter(|&&i| v.is_img(i)).count(), 0);
    }

    #[test]
    fn vocab_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.json");
        let v = vocab();
        v.save(&p).unwrap();
        assert_eq!(Vocabulary::load(&p).unwrap(), v);
    }

    #[test]
    fn patchify_round_trip() {
        let mut r = rng::stream(3, "t", 0);
        let img = Tensor::uniform(&[8, 8, 3], 0.5, &mut r).map(|v| v + 0.5);
        for p in [1, 2, 4, 8] {
            let patches = patchify(&img, p).unwrap();
            assert_eq!(patches.shape(), &[64 / (p * p), p * p * 3]);
            assert_eq!(unpatchify(&patches, p, 8, 8, 3).unwrap(), img);
        }
    }

    #[test]
    fn image_token_counts_and_zero_image() {
        let cfg = PipelineConfig::default();
        let mut store = ParamStore::new();
        let mut r = rng::stream(1, "init", 0);
        let mut pb = ParamBuilder::new(&mut store, &mut r, "");
        let enc = ImageEncoder::new(&mut pb, &cfg).unwrap();
        let mut g = Graph::new();
        let toks = enc.encode(&mut g, &store, &Tensor::zeros(&[32, 32, 3])).unwrap();
        assert_eq!(g.shape(toks.per_scale[0]), &[64, 32]);
        assert_eq!(g.shape(toks.per_scale[1]), &[16, 32]);
        let pos = store.value(store.lookup("image_encoder.p4.pos").unwrap());
        assert_eq!(g.value(toks.per_scale[0]), pos);
    }

    #[test]
    fn image_validation() {
        let cfg = PipelineConfig::default();
        let mut store = ParamStore::new();
        let mut r = rng::stream(1, "init", 0);
        let mut pb = ParamBuilder::new(&mut store, &mut r, "");
        let enc = ImageEncoder::new(&mut pb, &cfg).unwrap();
        let mut g = Graph::new();
        assert!(enc.encode(&mut g, &store, &Tensor::full(&[32, 32, 3], 1.5)).is_err());
        assert!(enc.encode(&mut g, &store, &Tensor::zeros(&[30, 32, 3])).is_err());
        assert!(validate_image(&Tensor::full(&[32, 32, 3], -0.1), &cfg).is_err());
    }

    #[test]
    fn text_framing() {
        let cfg = PipelineConfig::default();
        let v = vocab();
        let mut store = ParamStore::new();
        let mut r = rng::stream(1, "init", 0);
        let mut pb = ParamBuilder::new(&mut store, &mut r, "");
        let te = TextEncoder::new(&mut pb, &cfg, v.len()).unwrap();
        let (ids, n) = te.frame_ids("What would happen if the ice melted?", &v).unwrap();
        assert_eq!(n, 10);
        assert_eq!(ids.len(), 16);
        assert_eq!((ids[0], ids[9], ids[10]), (BOS, EOS, PAD));
        assert!(te.frame_ids("  ", &v).is_err());
    }
}
