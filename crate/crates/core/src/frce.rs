//! Fine-grained reasoning cue extraction: local window features, region
//! features from a segmentation, object tokens from the instruction and the
//! ID controller that grounds them in the visual cues.

use std::collections::VecDeque;

use crate::autograd::{Graph, Mask, Var};
use crate::config::PipelineConfig;
use crate::encoders::{image_dims, ImageTokens, Vocabulary, UNK};
use crate::error::{Error, Result};
use crate::nn::{AttentionSpec, CrossAttentionBlock, FeedForward, Linear, ParamBuilder};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Per-pixel region labels; label 0 is the background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentationMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<usize>,
    pub n_regions: usize,
}

impl SegmentationMap {
    pub fn label(&self, y: usize, x: usize) -> usize {
        self.labels[y * self.width + x]
    }

    pub fn area(&self, label: usize) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

pub trait Segmenter: Send + Sync {
    fn segment(&self, img: &Tensor) -> Result<SegmentationMap>;
}

/// Threshold luminance against the border median, then label 4-connected components.
#[derive(Clone, Debug)]
pub struct LuminanceSegmenter {
    pub tau: f64,
    pub min_area: usize,
}

pub fn luminance(img: &Tensor) -> Result<Vec<f64>> {
    let (_, _, c) = image_dims(img)?;
    Ok(img
        .data()
        .chunks_exact(c)
        .map(|px| match px {
            [r, g, b] => 0.299 * r + 0.587 * g + 0.114 * b,
            _ => px.iter().sum::<f64>() / c as f64,
        })
        .collect())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl Segmenter for LuminanceSegmenter {
    fn segment(&self, img: &Tensor) -> Result<SegmentationMap> {
        let (h, w, _) = image_dims(img)?;
        let lum = luminance(img)?;
        let border: Vec<f64> = (0..h)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .filter(|&(y, x)| y == 0 || x == 0 || y + 1 == h || x + 1 == w)
            .map(|(y, x)| lum[y * w + x])
            .collect();
        let bg = median(border);
        let fg: Vec<bool> = lum.iter().map(|l| (l - bg).abs() > self.tau).collect();

        let mut labels = vec![0usize; h * w];
        let mut seen = vec![false; h * w];
        let mut next = 1;
        let mut queue = VecDeque::new();
        for start in 0..h * w {
            if !fg[start] || seen[start] {
                continue;
            }
            seen[start] = true;
            queue.push_back(start);
            let mut comp = Vec::new();
            while let Some(i) = queue.pop_front() {
                comp.push(i);
                let (y, x) = (i / w, i % w);
                let mut visit = |j: usize| {
                    if fg[j] && !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                };
                if y > 0 {
                    visit(i - w);
                }
                if y + 1 < h {
                    visit(i + w);
                }
                if x > 0 {
                    visit(i - 1);
                }
                if x + 1 < w {
                    visit(i + 1);
                }
            }
            if comp.len() >= self.min_area {
                for i in comp {
                    labels[i] = next;
                }
                next += 1;
            }
        }
        Ok(SegmentationMap {
            height: h,
            width: w,
            labels,
            n_regions: next,
        })
    }
}

pub trait ObjectExtractor: Send + Sync {
    /// Object words referenced by the instruction, in order of appearance.
    fn extract(&self, instruction: &str) -> Vec<String>;
}

/// Keeps tokens that are neither stop words, auxiliaries, frame words nor `-ed` verbs.
#[derive(Clone, Debug, Default)]
pub struct StoplistExtractor;

const STOPWORDS: &[&str] = &[
    "a", "about", "after", "an", "and", "any", "are", "as", "at", "be", "been", "before", "being", "by", "can",
    "could", "day", "days", "decade", "decades", "did", "do", "does", "during", "each", "few", "for", "from",
    "had", "has", "have", "how", "hour", "hours", "if", "in", "into", "is", "it", "its", "later", "like",
    "long", "many", "may", "might", "month", "months", "much", "next", "of", "off", "on", "one", "or", "over",
    "panel", "scene", "should", "some", "someone", "something", "that", "the", "their", "them", "then", "there",
    "these", "they", "this", "those", "time", "to", "under", "until", "up", "was", "week", "weeks", "were",
    "what", "when", "where", "which", "while", "who", "will", "with", "would", "year", "years",
];

const VERBS: &[&str] = &[
    "age", "became", "become", "begin", "break", "burn", "burnt", "catch", "change", "continue", "fall",
    "fell", "get", "go", "got", "grew", "grow", "grown", "happen", "knock", "leave", "left", "look", "looks", "made",
    "make", "melt", "shatter", "show", "tilt", "took", "turn", "two", "ten", "three", "went",
];

fn is_object_word(tok: &str) -> bool {
    tok.chars().any(char::is_alphanumeric)
        && !STOPWORDS.contains(&tok)
        && !VERBS.contains(&tok)
        && !(tok.len() > 3 && tok.ends_with("ed"))
        && !tok.chars().all(|c| c.is_ascii_digit())
}

impl ObjectExtractor for StoplistExtractor {
    fn extract(&self, instruction: &str) -> Vec<String> {
        crate::encoders::tokenize(instruction)
            .into_iter()
            .filter(|t| is_object_word(t))
            .collect()
    }
}

pub fn segmenter_for(cfg: &PipelineConfig) -> Result<Box<dyn Segmenter>> {
    match cfg.frce.segmenter.as_str() {
        "luminance-cc" => Ok(Box::new(LuminanceSegmenter {
            tau: cfg.frce.tau,
            min_area: cfg.frce.min_area,
        })),
        other => Err(Error::Config(format!("unknown segmenter `{other}`"))),
    }
}

pub fn object_extractor_for(cfg: &PipelineConfig) -> Result<Box<dyn ObjectExtractor>> {
    match cfg.frce.object_extractor.as_str() {
        "stoplist" => Ok(Box::new(StoplistExtractor)),
        other => Err(Error::Config(format!("unknown object extractor `{other}`"))),
    }
}

/// Vocabulary ids of the extracted objects; a single UNK when nothing is found.
pub fn object_ids(words: &[String], vocab: &Vocabulary) -> Vec<usize> {
    if words.is_empty() {
        return vec![UNK];
    }
    words.iter().map(|w| vocab.id(w)).collect()
}

/// Embeds object ids through an embedding table var (`[V, d]`).
pub fn extract_object_tokens(g: &mut Graph, table: Var, ids: &[usize]) -> Result<Var> {
    g.gather_rows(table, ids)
}

/// `[R_local; R_global]`.
pub fn fuse_visual_cues(g: &mut Graph, r_local: Var, r_global: Var) -> Result<Var> {
    let (_, dl) = g.value(r_local).dims2()?;
    let (_, dg) = g.value(r_global).dims2()?;
    if dl != dg {
        return Err(Error::dim("fuse_visual_cues", format!("widths {dl} and {dg}")));
    }
    g.concat(&[r_local, r_global], 0)
}

#[derive(Clone, Debug)]
pub struct ReasoningCues {
    pub r_local: Var,
    pub r_global: Var,
    pub r_v: Var,
    pub r_t: Var,
    /// Regions that covered no patch center and fell back to the global mean.
    pub fallback_regions: usize,
}

/// Window gather order and pooling matrix for the local branch.
fn window_layout(gh: usize, gw: usize, w: usize) -> Result<(Vec<usize>, Tensor)> {
    if w == 0 || !gh.is_multiple_of(w) || !gw.is_multiple_of(w) {
        return Err(Error::Validation(format!("window {w} does not divide the {gh}x{gw} token grid")));
    }
    let (nh, nw) = (gh / w, gw / w);
    let mut idx = Vec::with_capacity(gh * gw);
    for wy in 0..nh {
        for wx in 0..nw {
            for dy in 0..w {
                for dx in 0..w {
                    idx.push((wy * w + dy) * gw + wx * w + dx);
                }
            }
        }
    }
    let per = w * w;
    let n_p = nh * nw;
    let mut pool = vec![0.0; n_p * gh * gw];
    for k in 0..n_p {
        pool[k * gh * gw + k * per..k * gh * gw + (k + 1) * per].fill(1.0 / per as f64);
    }
    Ok((idx, Tensor::new(&[n_p, gh * gw], pool)?))
}

/// Region pooling matrix over fine patches, by patch-center membership.
pub fn region_pool(seg: &SegmentationMap, patch: usize) -> Result<(Tensor, usize)> {
    if !seg.height.is_multiple_of(patch) || !seg.width.is_multiple_of(patch) {
        return Err(Error::dim("region_pool", format!("{}x{} vs patch {patch}", seg.height, seg.width)));
    }
    let (gh, gw) = (seg.height / patch, seg.width / patch);
    let n = gh * gw;
    let mut pool = vec![0.0; seg.n_regions * n];
    let mut fallbacks = 0;
    for r in 0..seg.n_regions {
        let members: Vec<usize> = (0..n)
            .filter(|&k| seg.label((k / gw) * patch + patch / 2, (k % gw) * patch + patch / 2) == r)
            .collect();
        let row = &mut pool[r * n..(r + 1) * n];
        if members.is_empty() {
            fallbacks += 1;
            row.fill(1.0 / n as f64);
        } else {
            for k in &members {
                row[*k] = 1.0 / members.len() as f64;
            }
        }
    }
    Ok((Tensor::new(&[seg.n_regions, n], pool)?, fallbacks))
}

/// Trainable parts of the cue extractor: E_P, E_R and the ID controller.
#[derive(Clone, Debug)]
pub struct Frce {
    pub local_proj: Linear,
    pub local_attn: CrossAttentionBlock,
    pub local_ff: FeedForward,
    pub region_proj: Linear,
    pub region_ff: FeedForward,
    pub region_attn: CrossAttentionBlock,
    pub id_attn: CrossAttentionBlock,
    pub id_ff: FeedForward,
    pub window: usize,
}

impl Frce {
    pub fn new(pb: &mut ParamBuilder, cfg: &PipelineConfig) -> Result<Self> {
        let (de, dl) = (cfg.dims.d_enc, cfg.dims.d_llm);
        let f = &cfg.frce;
        let mut pb = pb.scope("frce");
        let (local_proj, local_attn, local_ff) = {
            let mut lb = pb.scope("local");
            (
                Linear::new(&mut lb, "proj", de, dl, true)?,
                CrossAttentionBlock::new(&mut lb, "attn", AttentionSpec::plain(dl, f.heads))?,
                FeedForward::new(&mut lb, "ff", dl)?,
            )
        };
        let (region_proj, region_ff, region_attn) = {
            let mut rb = pb.scope("region");
            (
                Linear::new(&mut rb, "proj", de, dl, true)?,
                FeedForward::new(&mut rb, "ff", dl)?,
                CrossAttentionBlock::new(&mut rb, "attn", AttentionSpec::plain(dl, f.heads))?,
            )
        };
        let mut ib = pb.scope("id_controller");
        let id_attn = CrossAttentionBlock::new(&mut ib, "attn", AttentionSpec::plain(dl, f.id_controller_heads))?;
        let id_ff = FeedForward::new(&mut ib, "ff", dl)?;
        Ok(Frce {
            local_proj,
            local_attn,
            local_ff,
            region_proj,
            region_ff,
            region_attn,
            id_attn,
            id_ff,
            window: f.window,
        })
    }

    /// One row per `w×w` window of fine tokens: projection, windowed
    /// self-attention and feed-forward (both residual), then a mean pool.
    pub fn extract_local(&self, g: &mut Graph, store: &ParamStore, tokens: &ImageTokens) -> Result<Var> {
        let (gh, gw) = tokens.fine_grid();
        let (idx, pool) = window_layout(gh, gw, self.window)?;
        let grouped = g.gather_rows(tokens.fine(), &idx)?;
        let x = self.local_proj.forward(g, store, grouped)?;
        let a = self
            .local_attn
            .forward_traced(g, store, x, x, Mask::Blocks(self.window * self.window))?
            .output;
        let x = g.add(x, a)?;
        let f = self.local_ff.forward(g, store, x)?;
        let x = g.add(x, f)?;
        let pool = g.constant(pool);
        g.matmul(pool, x)
    }

    /// One row per region: masked mean pool of fine tokens, projection,
    /// feed-forward and cross-attention against all image tokens (both residual).
    pub fn extract_global(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tokens: &ImageTokens,
        seg: &SegmentationMap,
    ) -> Result<(Var, usize)> {
        if (seg.height, seg.width) != (tokens.height, tokens.width) {
            return Err(Error::dim(
                "extract_global",
                format!("segmentation {}x{} vs image {}x{}", seg.height, seg.width, tokens.height, tokens.width),
            ));
        }
        let (pool, fallbacks) = region_pool(seg, tokens.fine_patch())?;
        let pool = g.constant(pool);
        let pooled = g.matmul(pool, tokens.fine())?;
        let x = self.region_proj.forward(g, store, pooled)?;
        let f = self.region_ff.forward(g, store, x)?;
        let x = g.add(x, f)?;
        let all = tokens.all(g)?;
        let kv = self.region_proj.forward(g, store, all)?;
        let a = self.region_attn.forward(g, store, x, kv)?;
        Ok((g.add(x, a)?, fallbacks))
    }

    /// `x = O + CA(O, R_V)`, then `x + FF(x)`.
    pub fn id_controller(&self, g: &mut Graph, store: &ParamStore, r_v: Var, objects: Var) -> Result<Var> {
        let a = self.id_attn.forward(g, store, objects, r_v)?;
        let x = g.add(objects, a)?;
        let f = self.id_ff.forward(g, store, x)?;
        g.add(x, f)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tokens: &ImageTokens,
        seg: &SegmentationMap,
        objects: Var,
    ) -> Result<ReasoningCues> {
        let r_local = self.extract_local(g, store, tokens)?;
        let (r_global, fallback_regions) = self.extract_global(g, store, tokens, seg)?;
        let r_v = fuse_visual_cues(g, r_local, r_global)?;
        let r_t = self.id_controller(g, store, r_v, objects)?;
        Ok(ReasoningCues {
            r_local,
            r_global,
            r_v,
            r_t,
            fallback_regions,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::ImageEncoder;
    use crate::gradcheck::grad_check_params;
    use crate::rng;

    fn square(img: &mut Tensor, y0: usize, x0: usize, s: usize, rgb: [f64; 3]) {
        let w = img.shape()[1];
        for y in y0..y0 + s {
            for x in x0..x0 + s {
                img.data_mut()[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&rgb);
            }
        }
    }

    /// Depth-first flood fill over the same foreground predicate.
    fn oracle_components(img: &Tensor, tau: f64) -> Vec<Vec<usize>> {
        let (h, w, _) = image_dims(img).unwrap();
        let lum = luminance(img).unwrap();
        let mut border = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if y == 0 || x == 0 || y == h - 1 || x == w - 1 {
                    border.push(lum[y * w + x]);
                }
            }
        }
        let bg = median(border);
        let mut seen = vec![false; h * w];
        let mut comps = Vec::new();
        for s in 0..h * w {
            if seen[s] || (lum[s] - bg).abs() <= tau {
                continue;
            }
            let mut stack = vec![s];
            let mut comp = vec![];
            seen[s] = true;
            while let Some(i) = stack.pop() {
                comp.push(i);
                let (y, x) = ((i / w) as i64, (i % w) as i64);
                for (dy, dx) in [(0, 1), (1, 0), (0, -1), (-1, 0)] {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if !seen[j] && (lum[j] - bg).abs() > tau {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
            comp.sort_unstable();
            comps.push(comp);
        }
        comps
    }

    fn seg() -> LuminanceSegmenter {
        LuminanceSegmenter { tau: 0.1, min_area: 4 }
    }

    #[test]
    fn uniform_image_is_one_region() {
        let m = seg().segment(&Tensor::full(&[16, 16, 3], 0.3)).unwrap();
        assert_eq!(m.n_regions, 1);
        assert!(m.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn squares_match_flood_fill_oracle() {
        let mut img = Tensor::zeros(&[16, 16, 3]);
        square(&mut img, 2, 9, 4, [1.0, 1.0, 1.0]);
        let m = seg().segment(&img).unwrap();
        assert_eq!(m.n_regions, 2);
        let oracle = oracle_components(&img, 0.1);
        assert!(oracle[0].iter().all(|&i| m.labels[i] == 1));
        assert_eq!(m.area(1), 16);

        square(&mut img, 10, 1, 3, [0.9, 0.2, 0.9]);
        let m = seg().segment(&img).unwrap();
        assert_eq!(m.n_regions, 3);
        let oracle = oracle_components(&img, 0.1);
        // The component whose first pixel comes first in raster order gets label 1.
        for (k, comp) in oracle.iter().enumerate() {
            assert!(comp.iter().all(|&i| m.labels[i] == k + 1));
        }
    }

    #[test]
    fn small_components_merge_into_background() {
        let mut img = Tensor::zeros(&[8, 8, 3]);
        square(&mut img, 3, 3, 1, [1.0, 1.0, 1.0]);
        assert_eq!(seg().segment(&img).unwrap().n_regions, 1);
    }

    #[test]
    fn object_extraction() {
        let ex = StoplistExtractor;
        assert_eq!(ex.extract("What would happen if the ice cube melted?"), ["ice", "cube"]);
        assert_eq!(ex.extract("What would the apple look like after ten years?"), ["apple"]);
        assert_eq!(ex.extract("abc"), ["abc"]);
        let v = Vocabulary::build(&["the cube".to_string()], 2).unwrap();
        assert_eq!(object_ids(&ex.extract("abc"), &v), vec![UNK]);
        assert_eq!(object_ids(&ex.extract("what would happen?"), &v), vec![UNK]);
    }

    fn build(cfg: &PipelineConfig) -> (ParamStore, ImageEncoder, Frce) {
        let mut store = ParamStore::new();
        let mut r = rng::stream(cfg.seed, rng::INIT, 0);
        let mut pb = ParamBuilder::new(&mut store, &mut r, "");
        let enc = ImageEncoder::new(&mut pb, cfg).unwrap();
        let frce = Frce::new(&mut pb, cfg).unwrap();
        (store, enc, frce)
    }

    fn random_image(h: usize, seed: u64) -> Tensor {
        let mut r = rng::stream(seed, "img", 0);
        Tensor::uniform(&[h, h, 3], 0.5, &mut r).map(|v| v + 0.5)
    }

    #[test]
    fn local_shapes_and_locality() {
        let cfg = PipelineConfig::default();
        let (store, enc, frce) = build(&cfg);
        let img = random_image(32, 1);
        let mut g = Graph::inference();
        let toks = enc.encode(&mut g, &store, &img).unwrap();
        let base = frce.extract_local(&mut g, &store, &toks).unwrap();
        assert_eq!(g.shape(base), &[16, 64]);
        let base = g.value(base).clone();

        // Swap fine token 0 (window 0) with token 2 (window 1).
        let fine = g.value(toks.fine()).clone();
        let mut perm: Vec<usize> = (0..64).collect();
        perm.swap(0, 2);
        let swapped = g.constant(Tensor::from_rows(&perm.iter().map(|&i| fine.row(i).to_vec()).collect::<Vec<_>>()).unwrap());
        let t2 = ImageTokens {
            per_scale: vec![swapped, toks.per_scale[1]],
            ..toks.clone()
        };
        let out = frce.extract_local(&mut g, &store, &t2).unwrap();
        let out = g.value(out);
        for k in 0..16 {
            let same = out.row(k) == base.row(k);
            assert_eq!(same, k > 1, "row {k}");
        }
    }

    #[test]
    fn single_region_global_and_fallback() {
        let cfg = PipelineConfig::default();
        let (store, enc, frce) = build(&cfg);
        let img = Tensor::full(&[32, 32, 3], 0.4);
        let m = seg().segment(&img).unwrap();
        let mut g = Graph::inference();
        let toks = enc.encode(&mut g, &store, &img).unwrap();
        let (rg, fb) = frce.extract_global(&mut g, &store, &toks, &m).unwrap();
        assert_eq!((g.shape(rg), fb), (&[1usize, 64][..], 0));

        // A full-image object leaves the background with no patch centers.
        let mut labels = vec![1; 32 * 32];
        labels[0] = 0;
        let m = SegmentationMap { height: 32, width: 32, labels, n_regions: 2 };
        let (rg, fb) = frce.extract_global(&mut g, &store, &toks, &m).unwrap();
        assert_eq!((g.shape(rg)[0], fb), (2, 1));
        assert_eq!(g.value(rg).row(0), g.value(rg).row(1));
    }

    #[test]
    fn global_equivariant_under_region_swap() {
        let cfg = PipelineConfig::default();
        let (mut store, enc, frce) = build(&cfg);
        for name in ["image_encoder.p4.pos", "image_encoder.p8.pos"] {
            let id = store.lookup(name).unwrap();
            let z = Tensor::zeros(store.value(id).shape());
            store.set_value(id, z).unwrap();
        }
        let (c1, c2) = ([0.9, 0.1, 0.1], [0.1, 0.9, 0.9]);
        let mut a = Tensor::zeros(&[32, 32, 3]);
        square(&mut a, 8, 0, 8, c1);
        square(&mut a, 16, 24, 8, c2);
        let mut b = Tensor::zeros(&[32, 32, 3]);
        square(&mut b, 8, 0, 8, c2);
        square(&mut b, 16, 24, 8, c1);
        let mut g = Graph::inference();
        let ma = seg().segment(&a).unwrap();
        let mb = seg().segment(&b).unwrap();
        assert_eq!(ma.n_regions, 3);
        assert_eq!(ma.labels, mb.labels);
        let ta = enc.encode(&mut g, &store, &a).unwrap();
        let tb = enc.encode(&mut g, &store, &b).unwrap();
        let (ra, _) = frce.extract_global(&mut g, &store, &ta, &ma).unwrap();
        let (rb, _) = frce.extract_global(&mut g, &store, &tb, &mb).unwrap();
        let (ra, rb) = (g.value(ra), g.value(rb));
        let close = |x: &[f64], y: &[f64]| x.iter().zip(y).all(|(p, q)| (p - q).abs() < 1e-12);
        assert!(close(ra.row(0), rb.row(0)));
        assert!(close(ra.row(1), rb.row(2)));
        assert!(close(ra.row(2), rb.row(1)));
    }

    #[test]
    fn fusion_and_id_controller_shapes() {
        let cfg = PipelineConfig::default();
        let (store, enc, frce) = build(&cfg);
        let img = random_image(32, 2);
        let mut g = Graph::inference();
        let toks = enc.encode(&mut g, &store, &img).unwrap();
        let m = seg().segment(&img).unwrap();
        let mut r = rng::stream(5, "o", 0);
        let objects = g.constant(Tensor::randn(&[3, 64], 1.0, &mut r));
        let cues = frce.forward(&mut g, &store, &toks, &m, objects).unwrap();
        let n_r = m.n_regions;
        assert_eq!(g.shape(cues.r_v), &[16 + n_r, 64]);
        assert_eq!(g.shape(cues.r_t), &[3, 64]);
        let rv = g.value(cues.r_v).clone();
        assert_eq!(rv.slice_rows(0, 16).unwrap(), *g.value(cues.r_local));
        assert_eq!(rv.slice_rows(16, n_r).unwrap(), *g.value(cues.r_global));
        let narrow = g.constant(Tensor::zeros(&[2, 32]));
        assert!(fuse_visual_cues(&mut g, cues.r_local, narrow).is_err());
    }

    #[test]
    fn id_controller_single_key() {
        let cfg = PipelineConfig::toy();
        let (store, _, frce) = build(&cfg);
        let mut r = rng::stream(9, "t", 0);
        let mut g = Graph::inference();
        let rv = g.constant(Tensor::randn(&[1, 4], 1.0, &mut r));
        let o = g.constant(Tensor::randn(&[3, 4], 1.0, &mut r));
        let out = frce.id_controller(&mut g, &store, rv, o).unwrap();
        // Every query sees the same single value row.
        let v = frce.id_attn.w_v.forward(&mut g, &store, rv).unwrap();
        let proj = frce.id_attn.w_o.forward(&mut g, &store, v).unwrap();
        let p = g.value(proj).clone();
        let rows: Vec<Vec<f64>> = (0..3)
            .map(|i| g.value(o).row(i).iter().zip(p.row(0)).map(|(a, b)| a + b).collect())
            .collect();
        let x = g.constant(Tensor::from_rows(&rows).unwrap());
        let f = frce.id_ff.forward(&mut g, &store, x).unwrap();
        let expect = g.add(x, f).unwrap();
        assert!(g.value(out).max_abs_diff(g.value(expect)) < 1e-12);
    }

    #[test]
    fn frce_gradients_match_finite_differences() {
        let cfg = PipelineConfig::toy();
        let (mut store, enc, frce) = build(&cfg);
        let mut img = Tensor::full(&[8, 8, 3], 0.2);
        square(&mut img, 2, 2, 4, [0.9, 0.8, 0.1]);
        let m = seg().segment(&img).unwrap();
        assert_eq!(m.n_regions, 2);
        let mut r = rng::stream(3, "o", 0);
        let obj = Tensor::randn(&[2, 4], 1.0, &mut r);
        let ids: Vec<_> = store.ids().filter(|&id| store.name(id).starts_with("frce.")).collect();
        let err = grad_check_params(
            &mut store,
            &ids,
            |g, s| {
                let toks = enc.encode(g, s, &img)?;
                let o = g.constant(obj.clone());
                let cues = frce.forward(g, s, &toks, &m, o)?;
                let a = g.square(cues.r_t);
                let b = g.square(cues.r_v);
                let (a, b) = (g.sum(a), g.sum(b));
                g.add(a, b)
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
