//! Synthetic edit pairs by inverse generation: render the edited scene, phrase a
//! hypothetical instruction, rebuild plausible pre-edit sources, keep the best.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{DataConfig, PipelineConfig, CATEGORY_NAMES};
use crate::encoders::image_dims;
use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};
use crate::tensor::Tensor;

/// Minimum distance in pixels between any rendered object and the image border.
pub const BORDER_MARGIN: f64 = 3.0;
/// Largest linear growth any transform applies to an object's base half-size.
const GROWTH: f64 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Physical,
    Temporal,
    Causal,
    Story,
}

impl Category {
    pub const ALL: [Category; 4] = [Category::Physical, Category::Temporal, Category::Causal, Category::Story];

    pub fn name(self) -> &'static str {
        CATEGORY_NAMES[self as usize]
    }

    pub fn parse(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Validation(format!("unknown category `{s}`")))
    }

    pub fn transforms(self) -> &'static [Transform] {
        match self {
            Category::Physical => &[Transform::Melt, Transform::Tilt, Transform::Shatter],
            Category::Temporal => &[Transform::Age, Transform::Grow],
            Category::Causal => &[Transform::KnockOver, Transform::Burn],
            Category::Story => &[Transform::NextPanel],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    Melt,
    Tilt,
    Shatter,
    Age,
    Grow,
    KnockOver,
    Burn,
    NextPanel,
}

impl Transform {
    const ALL: [Transform; 8] = [
        Transform::Melt,
        Transform::Tilt,
        Transform::Shatter,
        Transform::Age,
        Transform::Grow,
        Transform::KnockOver,
        Transform::Burn,
        Transform::NextPanel,
    ];

    /// Imperative form used in the initial instruction.
    pub fn verb(self) -> &'static str {
        match self {
            Transform::Melt => "melt",
            Transform::Tilt => "tilt",
            Transform::Shatter => "shatter",
            Transform::Age => "age",
            Transform::Grow => "grow",
            Transform::KnockOver => "knock over",
            Transform::Burn => "burn",
            Transform::NextPanel => "follow",
        }
    }

    /// Intransitive past with the object as subject.
    fn past(self) -> &'static str {
        match self {
            Transform::Melt => "melted",
            Transform::Tilt => "tilted",
            Transform::Shatter => "shattered",
            Transform::Age => "aged",
            Transform::Grow => "grew",
            Transform::KnockOver => "got knocked over",
            Transform::Burn => "burned",
            Transform::NextPanel => "moved on",
        }
    }

    /// Transitive past with an outside agent.
    fn active(self) -> &'static str {
        match self {
            Transform::KnockOver => "knocked over",
            Transform::NextPanel => "moved",
            t => t.past(),
        }
    }

    fn time_clause(self) -> &'static str {
        match self {
            Transform::Age => "ten years",
            Transform::Grow => "a few weeks",
            _ => "a long time",
        }
    }

    fn adjective(self) -> &'static str {
        match self {
            Transform::Melt => "melted",
            Transform::Tilt => "tilted",
            Transform::Shatter => "shattered",
            Transform::Age => "aged",
            Transform::Grow => "grown",
            Transform::KnockOver => "knocked over",
            Transform::Burn => "burned",
            Transform::NextPanel => "continued",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Disk,
}

/// Surface pattern; shading never drops an object to background contrast.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Finish {
    Solid,
    Pieces,
    Spots,
}

const SQUARE_NOUNS: [&str; 5] = ["cube", "box", "block", "crate", "book"];
const DISK_NOUNS: [&str; 5] = ["ball", "apple", "orange", "coin", "egg"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub noun: String,
    pub shape: Shape,
    pub cx: f64,
    pub cy: f64,
    pub hw: f64,
    pub hh: f64,
    pub angle: f64,
    pub color: [f64; 3],
    pub finish: Finish,
}

impl Primitive {
    /// Shade factor when the point lies inside the primitive.
    fn cover(&self, x: f64, y: f64) -> Option<f64> {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        let inside = match self.shape {
            Shape::Square => u.abs() <= self.hw && v.abs() <= self.hh,
            Shape::Disk => (u / self.hw).powi(2) + (v / self.hh).powi(2) <= 1.0,
        };
        if !inside {
            return None;
        }
        Some(match self.finish {
            Finish::Solid => 1.0,
            Finish::Pieces if (u >= 0.0) != (v >= 0.0) => 0.8,
            Finish::Spots if ((u + self.hw).floor() as i64 + (v + self.hh).floor() as i64).rem_euclid(3) == 0 => 0.85,
            _ => 1.0,
        })
    }

    fn transformed(&self, t: Transform) -> Primitive {
        let mut p = self.clone();
        match t {
            Transform::Melt => {
                p.hw *= GROWTH;
                p.hh *= 0.5;
                p.cy += 0.5 * self.hh;
            }
            Transform::Tilt => p.angle = std::f64::consts::FRAC_PI_6,
            Transform::Shatter => p.finish = Finish::Pieces,
            Transform::Age => {
                p.color = mix(self.color, [0.75, 0.7, 0.6], 0.5);
                p.finish = Finish::Spots;
            }
            Transform::Grow | Transform::NextPanel => {
                p.hw *= GROWTH;
                p.hh *= GROWTH;
            }
            Transform::KnockOver => {
                p.hw = self.hh;
                p.hh = self.hw;
                p.cy += self.hh - self.hw;
            }
            Transform::Burn => p.color = mix(self.color, [0.45, 0.2, 0.06], 0.8),
        }
        p
    }
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [0, 1, 2].map(|i| (1.0 - t) * a[i] + t * b[i])
}

fn luma(c: [f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match h6.floor() as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn rgb_to_hsv(c: [f64; 3]) -> (f64, f64, f64) {
    let max = c[0].max(c[1]).max(c[2]);
    let min = c[0].min(c[1]).min(c[2]);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == c[0] {
        ((c[1] - c[2]) / d).rem_euclid(6.0) / 6.0
    } else if max == c[1] {
        ((c[2] - c[0]) / d + 2.0) / 6.0
    } else {
        ((c[0] - c[1]) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn shift_hue(c: [f64; 3], dh: f64) -> [f64; 3] {
    let (h, s, v) = rgb_to_hsv(c);
    hsv_to_rgb(h + dh, s, v)
}

/// Channel values for an RGB colour; non-RGB images carry its luminance.
fn paint(c: [f64; 3], channels: usize) -> impl Iterator<Item = f64> {
    let l = luma(c);
    (0..channels).map(move |i| if channels == 3 { c[i] } else { l }.clamp(0.0, 1.0))
}

pub fn render(prims: &[Primitive], background: [f64; 3], h: usize, w: usize, c: usize) -> Tensor {
    let mut data = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let color = prims
                .iter()
                .rev()
                .find_map(|p| p.cover(px, py).map(|s| p.color.map(|v| v * s)))
                .unwrap_or(background);
            data.extend(paint(color, c));
        }
    }
    Tensor::new(&[h, w, c], data).expect("render buffer matches its shape")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub category: Category,
    pub transform: Transform,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub background: [f64; 3],
    /// Pre-edit objects; rendering these reproduces the unjittered source.
    pub base: Vec<Primitive>,
    /// Every primitive drawn in the target, one per connected component.
    pub objects: Vec<Primitive>,
    /// Index into `base` of the object the edit acts on.
    pub primary: usize,
    pub initial_instruction: String,
    pub source_caption: String,
    pub target_caption: String,
}

impl SceneMeta {
    pub fn render_source(&self) -> Tensor {
        render(&self.base, self.background, self.height, self.width, self.channels)
    }

    pub fn render_target(&self) -> Tensor {
        render(&self.objects, self.background, self.height, self.width, self.channels)
    }

    pub fn background_pixel(&self) -> Vec<f64> {
        paint(self.background, self.channels).collect()
    }
}

fn article(noun: &str) -> &'static str {
    if noun.starts_with(['a', 'e', 'i', 'o', 'u']) {
        "an"
    } else {
        "a"
    }
}

fn random_color(rng: &mut StreamRng) -> [f64; 3] {
    for _ in 0..64 {
        let c = hsv_to_rgb(rng.random(), rng.random_range(0.4..0.9), rng.random_range(0.75..1.0));
        if luma(c) >= 0.45 {
            return c;
        }
    }
    [0.8, 0.8, 0.8]
}

/// Lay out `n` objects in equal slots along the long axis of a region.
fn layout(
    rng: &mut StreamRng,
    region: [f64; 4],
    n: usize,
    transform: Transform,
    category: Category,
) -> Vec<Primitive> {
    let [x0, y0, x1, y1] = region;
    let horizontal = x1 - x0 >= y1 - y0;
    let long = if horizontal { x1 - x0 } else { y1 - y0 } / n as f64;
    let (slot_w, slot_h) = if horizontal { (long, y1 - y0) } else { (x1 - x0, long) };
    let extent = 0.5 * slot_w.min(slot_h) - 1.0;
    let hmax = extent / GROWTH;
    (0..n)
        .map(|i| {
            let primary = i == 0;
            let h = hmax * rng.random_range(0.7..1.0);
            let shape = if primary && transform == Transform::Tilt || rng.random_bool(0.5) {
                Shape::Square
            } else {
                Shape::Disk
            };
            let nouns = match shape {
                Shape::Square => &SQUARE_NOUNS,
                Shape::Disk => &DISK_NOUNS,
            };
            let noun = nouns[rng.random_range(0..nouns.len())].to_string();
            let (hw, hh) = if primary && category == Category::Causal { (h / 1.3, h) } else { (h, h) };
            let (scx, scy) = if horizontal {
                (x0 + long * (i as f64 + 0.5), 0.5 * (y0 + y1))
            } else {
                (0.5 * (x0 + x1), y0 + long * (i as f64 + 0.5))
            };
            let room_x = (0.5 * slot_w - 1.0 - GROWTH * h).max(0.0);
            let room_y = (0.5 * slot_h - 1.0 - GROWTH * h).max(0.0);
            let cx = scx + rng.random_range(-1.0..=1.0) * room_x;
            let cy = scy + rng.random_range(-1.0..=1.0) * room_y;
            let color = random_color(rng);
            Primitive {
                noun,
                shape,
                cx,
                cy,
                hw,
                hh,
                angle: 0.0,
                color,
                finish: Finish::Solid,
            }
        })
        .collect()
}

/// Draw a target scene for `category`; the metadata records its pre-edit state.
pub fn render_scene(category: Category, seed: u64, dims: (usize, usize, usize)) -> Result<(Tensor, SceneMeta)> {
    let (h, w, c) = dims;
    if h < 16 || w < 16 || c == 0 {
        return Err(Error::Validation(format!("scene rendering needs at least 16x16 pixels, got {h}x{w}x{c}")));
    }
    let mut rng = rng::stream(seed, "scene", 0);
    let transforms = category.transforms();
    let transform = transforms[rng.random_range(0..transforms.len())];
    let n = rng.random_range(1..=3usize);
    let tint: f64 = rng.random_range(0.02..0.1);
    let background = [0, 1, 2].map(|_| tint + rng.random_range(0.0..0.03));
    let (wf, hf) = (w as f64, h as f64);
    let m = BORDER_MARGIN;

    let (base, objects) = if category == Category::Story {
        let half = (w / 2) as f64;
        let base = layout(&mut rng, [m, m, half - m, hf - m], n, transform, category);
        let mut objects = base.clone();
        objects.extend(base.iter().enumerate().map(|(i, p)| {
            let mut q = if i == 0 { p.transformed(transform) } else { p.clone() };
            q.cx += half;
            q
        }));
        (base, objects)
    } else {
        let base = layout(&mut rng, [m, m, wf - m, hf - m], n, transform, category);
        let mut objects = base.clone();
        objects[0] = base[0].transformed(transform);
        (base, objects)
    };

    let noun = base[0].noun.clone();
    let target_caption = match transform {
        Transform::NextPanel => format!("a two-panel story of {} {noun}", article(&noun)),
        t => {
            let adj = t.adjective();
            format!("a photo of {} {adj} {noun}", article(adj))
        }
    };
    let meta = SceneMeta {
        category,
        transform,
        seed,
        height: h,
        width: w,
        channels: c,
        background,
        primary: 0,
        initial_instruction: format!("{} the {noun}", transform.verb()),
        source_caption: format!("a photo of {} {noun}", article(&noun)),
        target_caption,
        base,
        objects,
    };
    Ok((meta.render_target(), meta))
}

fn templates(category: Category) -> [&'static str; 2] {
    match category {
        Category::Physical => ["What would happen if the {o} {past}?", "What would the {o} look like if it {past}?"],
        Category::Temporal => ["What would the {o} look like after {time}?", "What would happen to the {o} after {time}?"],
        Category::Causal => ["What would happen if someone {active} the {o}?", "What would the {o} look like if it {past}?"],
        Category::Story => ["What would happen next to the {o}?", "What would the next panel show for the {o}?"],
    }
}

fn parse_initial(initial: &str) -> Option<(Transform, String)> {
    let s = initial.trim().to_lowercase();
    Transform::ALL.into_iter().find_map(|t| {
        let object = s.strip_prefix(t.verb())?.strip_prefix(" the ")?.trim();
        let ok = !object.is_empty() && object.split(' ').all(|w| !w.is_empty() && w.chars().all(char::is_alphabetic));
        ok.then(|| (t, object.to_string()))
    })
}

/// Turn "<verb> the <object>" into a hypothetical question; template chosen by `seed`.
pub fn rewrite_hypothetical(initial: &str, category: Category, seed: u64) -> String {
    let Some((t, object)) = parse_initial(initial) else {
        return format!("What would happen if {}?", initial.trim().trim_end_matches('?'));
    };
    let pool = templates(category);
    pool[(seed % pool.len() as u64) as usize]
        .replace("{o}", &object)
        .replace("{past}", t.past())
        .replace("{active}", t.active())
        .replace("{time}", t.time_clause())
}

/// Lattice offsets (pixels) for the primary object of jittered candidates.
const LATTICE: [f64; 4] = [-2.0, -1.0, 1.0, 2.0];

/// `m` plausible pre-edit images: candidate 0 is the exact inverse, the rest are jittered.
pub fn generate_source_candidates(meta: &SceneMeta, m: usize) -> Result<Vec<Tensor>> {
    if m == 0 {
        return Err(Error::Validation("need at least one source candidate".into()));
    }
    let mut out = vec![meta.render_source()];
    for k in 1..m {
        let mut rng = rng::stream(meta.seed, "candidate", k as u64);
        let j = k - 1;
        let (dx, dy) = if j < LATTICE.len() * LATTICE.len() {
            (LATTICE[j % 4], LATTICE[j / 4])
        } else {
            (rng.random_range(-2..=2) as f64, rng.random_range(-2..=2) as f64)
        };
        let prims: Vec<Primitive> = meta
            .base
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let mut q = p.clone();
                let scale = rng.random_range(0.9..=1.1);
                q.hw *= scale;
                q.hh *= scale;
                q.color = shift_hue(p.color, rng.random_range(-0.05..=0.05));
                if i == meta.primary {
                    q.cx += dx;
                    q.cy += dy;
                }
                q
            })
            .collect();
        out.push(render(&prims, meta.background, meta.height, meta.width, meta.channels));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub candidate_id: usize,
    pub rule_score: f64,
    pub psnr: f64,
    pub combined: f64,
}

pub trait CandidateScorer: Sync {
    fn score(&self, id: usize, candidate: &Tensor, reference: &Tensor, target: &Tensor, meta: &SceneMeta)
        -> Result<CandidateScore>;
}

/// PSNR in dB for images in [0, 1]; identical images saturate at 120 dB.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dim("psnr", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len().max(1) as f64;
    Ok(-10.0 * mse.max(1e-12).log10())
}

/// Rule consistency checks blended with capped PSNR against the exact inverse.
#[derive(Clone, Debug)]
pub struct RuleScorer {
    pub rule_weight: f64,
    pub psnr_weight: f64,
    pub psnr_cap: f64,
}

impl RuleScorer {
    pub fn from_config(dc: &DataConfig) -> Self {
        RuleScorer {
            rule_weight: dc.rule_weight,
            psnr_weight: dc.psnr_weight,
            psnr_cap: dc.psnr_cap,
        }
    }

    pub fn rule_score(candidate: &Tensor, reference: &Tensor, target: &Tensor, meta: &SceneMeta) -> f64 {
        let c = meta.channels;
        let bg = meta.background_pixel();
        let px = |t: &Tensor, y: usize, x: usize| t.data()[(y * meta.width + x) * c..][..c].to_vec();
        let differs = |a: &[f64], b: &[f64], tol: f64| a.iter().zip(b).any(|(x, y)| (x - y).abs() > tol);
        let foreground = |t: &Tensor| t.data().chunks_exact(c).filter(|p| differs(p, &bg, 1e-9)).count();

        let present = meta.base.iter().all(|p| {
            let y = (p.cy.floor() as usize).min(meta.height - 1);
            let x = (p.cx.floor() as usize).min(meta.width - 1);
            differs(&px(candidate, y, x), &bg, 0.05)
        });
        let (hl, wl) = (meta.height - 1, meta.width - 1);
        let background = [(0, 0), (0, wl), (hl, 0), (hl, wl)]
            .iter()
            .all(|&(y, x)| !differs(&px(candidate, y, x), &bg, 1e-9));
        let (fc, fr) = (foreground(candidate) as f64, foreground(reference) as f64);
        let plausible = candidate.max_abs_diff(target) > 1e-9 && fc >= 0.75 * fr && fc <= 1.25 * fr;
        [present, background, plausible].iter().filter(|&&b| b).count() as f64 / 3.0
    }
}

impl CandidateScorer for RuleScorer {
    fn score(
        &self,
        id: usize,
        candidate: &Tensor,
        reference: &Tensor,
        target: &Tensor,
        meta: &SceneMeta,
    ) -> Result<CandidateScore> {
        let rule_score = Self::rule_score(candidate, reference, target, meta);
        let psnr = psnr(candidate, reference)?;
        Ok(CandidateScore {
            candidate_id: id,
            rule_score,
            psnr,
            combined: self.rule_weight * rule_score + self.psnr_weight * psnr.min(self.psnr_cap) / self.psnr_cap,
        })
    }
}

/// Heap key whose maximum is the worst-ranked score.
struct Worst(CandidateScore);

impl Ord for Worst {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .0
            .combined
            .total_cmp(&self.0.combined)
            .then(self.0.candidate_id.cmp(&other.0.candidate_id))
    }
}

impl PartialOrd for Worst {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Worst {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Worst {}

/// The `n` best of `scores`, by combined score descending then candidate id ascending.
pub fn select_top(scores: impl IntoIterator<Item = CandidateScore>, n: usize) -> Vec<CandidateScore> {
    let mut heap = BinaryHeap::with_capacity(n + 1);
    for s in scores {
        heap.push(Worst(s));
        if heap.len() > n {
            heap.pop();
        }
    }
    heap.into_sorted_vec().into_iter().map(|w| w.0).collect()
}

pub fn score_and_select(
    scorer: &dyn CandidateScorer,
    candidates: &[Tensor],
    target: &Tensor,
    meta: &SceneMeta,
    n: usize,
) -> Result<Vec<CandidateScore>> {
    if n > candidates.len() {
        return Err(Error::Validation(format!(
            "cannot select {n} of {} candidates",
            candidates.len()
        )));
    }
    let reference = meta.render_source();
    let scores = candidates
        .iter()
        .enumerate()
        .map(|(i, c)| scorer.score(i, c, &reference, target, meta))
        .collect::<Result<Vec<_>>>()?;
    Ok(select_top(scores, n))
}

#[derive(Clone, Debug)]
pub struct EditSample {
    pub source: Tensor,
    pub instruction: String,
    pub target: Tensor,
    pub category: Category,
    pub sample_id: String,
    pub seed: u64,
}

impl EditSample {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invariant(format!("sample {}: {m}", self.sample_id)));
        image_dims(&self.source)?;
        if self.source.shape() != self.target.shape() {
            return bad(format!("source {:?} vs target {:?}", self.source.shape(), self.target.shape()));
        }
        if self.instruction.trim().is_empty() {
            return bad("empty instruction".into());
        }
        let in_range = |t: &Tensor| t.data().iter().all(|v| (0.0..=1.0).contains(v));
        if !in_range(&self.source) || !in_range(&self.target) {
            return bad("pixel outside [0, 1]".into());
        }
        Ok(())
    }
}

pub fn sample_id(category: Category, index: usize) -> String {
    format!("{}-{index:05}", category.name())
}

/// Per-sample seed; depends only on the category and index, never on generation order.
pub fn sample_seed(master: u64, category: Category, index: usize) -> u64 {
    rng::derive_seed(master, &format!("{}/{}", rng::DATA, category.name()), index as u64)
}

/// Generate one sample from its own seed.
pub fn generate_sample(
    cfg: &PipelineConfig,
    category: Category,
    index: usize,
) -> Result<(EditSample, SceneMeta, Vec<CandidateScore>)> {
    let seed = sample_seed(cfg.seed, category, index);
    let im = &cfg.image;
    let (target, meta) = render_scene(category, seed, (im.height, im.width, im.channels))?;
    let instruction = rewrite_hypothetical(&meta.initial_instruction, category, seed);
    let candidates = generate_source_candidates(&meta, cfg.data.candidates)?;
    let scorer = RuleScorer::from_config(&cfg.data);
    let selected = score_and_select(&scorer, &candidates, &target, &meta, cfg.data.top_n)?;
    let source = candidates[selected[0].candidate_id].clone();
    let sample = EditSample {
        source,
        instruction,
        target,
        category,
        sample_id: sample_id(category, index),
        seed,
    };
    sample.validate()?;
    Ok((sample, meta, selected))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub category: Category,
    pub index: usize,
    pub seed: u64,
    pub split: Split,
    pub instruction: String,
    pub initial_instruction: String,
    pub source_caption: String,
    pub target_caption: String,
    pub transform: Transform,
    pub objects: usize,
    pub selected: Vec<CandidateScore>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryCounts {
    pub total: usize,
    pub train: usize,
    pub val: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub count: usize,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub category_mix: BTreeMap<String, f64>,
    pub candidates: usize,
    pub top_n: usize,
    pub rule_weight: f64,
    pub psnr_weight: f64,
    pub psnr_cap: f64,
    pub categories: BTreeMap<String, CategoryCounts>,
    pub train: Vec<String>,
    pub val: Vec<String>,
}

/// Samples per category: one for each positively weighted category, the rest by
/// largest-remainder apportionment of the weights.
pub fn allocate(count: usize, mix: &BTreeMap<String, f64>) -> Result<Vec<(Category, usize)>> {
    let weights: Vec<(Category, f64)> = Category::ALL
        .iter()
        .map(|&c| (c, mix.get(c.name()).copied().unwrap_or(0.0)))
        .filter(|&(_, w)| w > 0.0)
        .collect();
    if weights.is_empty() {
        return Err(Error::Config("category mix has no positive weight".into()));
    }
    if count < weights.len() {
        return Err(Error::Config(format!(
            "count {count} is below one sample per category ({})",
            weights.len()
        )));
    }
    let rest = (count - weights.len()) as f64;
    let total: f64 = weights.iter().map(|w| w.1).sum();
    let quotas: Vec<f64> = weights.iter().map(|&(_, w)| rest * w / total).collect();
    let mut alloc: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let short = count - weights.len() - alloc.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        alloc[i] += 1;
    }
    Ok(weights.iter().zip(alloc).map(|(&(c, _), n)| (c, n + 1)).collect())
}

/// Validation size for a category of `n` samples: `min(cap, ceil(fraction * n))`.
pub fn validation_size(n: usize, fraction: f64, cap: usize) -> usize {
    ((fraction * n as f64).ceil() as usize).min(cap).min(n)
}

/// Deterministic sample plan: per-category counts and a random validation subset.
pub fn plan_split(cfg: &PipelineConfig) -> Result<(DatasetManifest, Vec<(Category, usize, Split)>)> {
    let dc = &cfg.data;
    let mut categories = BTreeMap::new();
    let mut jobs = Vec::new();
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (cat, n) in allocate(dc.count, &dc.category_mix)? {
        let n_val = validation_size(n, dc.val_fraction, dc.val_cap);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(cfg.seed, &format!("split/{}", cat.name()), 0));
        let val_set: BTreeSet<usize> = order[..n_val].iter().copied().collect();
        for i in 0..n {
            let split = if val_set.contains(&i) { Split::Val } else { Split::Train };
            match split {
                Split::Train => train.push(sample_id(cat, i)),
                Split::Val => val.push(sample_id(cat, i)),
            }
            jobs.push((cat, i, split));
        }
        categories.insert(
            cat.name().to_string(),
            CategoryCounts {
                total: n,
                train: n - n_val,
                val: n_val,
            },
        );
    }
    let manifest = DatasetManifest {
        count: dc.count,
        seed: cfg.seed,
        height: cfg.image.height,
        width: cfg.image.width,
        channels: cfg.image.channels,
        category_mix: dc.category_mix.clone(),
        candidates: dc.candidates,
        top_n: dc.top_n,
        rule_weight: dc.rule_weight,
        psnr_weight: dc.psnr_weight,
        psnr_cap: dc.psnr_cap,
        categories,
        train,
        val,
    };
    Ok((manifest, jobs))
}

/// Worker count for sample generation; `RB_THREADS` caps it.
pub fn worker_threads() -> usize {
    std::env::var("RB_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(0)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn blob_paths(dir: &Path, id: &str) -> (PathBuf, PathBuf) {
    let blobs = dir.join("blobs");
    (blobs.join(format!("{id}.src.rbt")), blobs.join(format!("{id}.tgt.rbt")))
}

/// Generate the dataset described by `cfg.data` and `cfg.seed` into `out_dir`.
pub fn build_dataset(cfg: &PipelineConfig, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let (manifest, jobs) = plan_split(cfg)?;
    let blobs = out_dir.join("blobs");
    fs::create_dir_all(&blobs).map_err(|e| Error::io(&blobs, e))?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_threads())
        .build()
        .map_err(|e| Error::Invariant(format!("worker pool: {e}")))?;
    let generated: Vec<Result<(EditSample, SceneMeta, Vec<CandidateScore>)>> =
        pool.install(|| jobs.par_iter().map(|&(cat, i, _)| generate_sample(cfg, cat, i)).collect());

    let jsonl = out_dir.join("samples.jsonl");
    let file = fs::File::create(&jsonl).map_err(|e| Error::io(&jsonl, e))?;
    let mut w = BufWriter::new(file);
    for (res, &(cat, index, split)) in generated.into_iter().zip(&jobs) {
        let (sample, meta, selected) = res?;
        let (src, tgt) = blob_paths(out_dir, &sample.sample_id);
        sample.source.save(&src)?;
        sample.target.save(&tgt)?;
        let rec = SampleRecord {
            id: sample.sample_id.clone(),
            category: cat,
            index,
            seed: sample.seed,
            split,
            instruction: sample.instruction,
            initial_instruction: meta.initial_instruction,
            source_caption: meta.source_caption,
            target_caption: meta.target_caption,
            transform: meta.transform,
            objects: meta.objects.len(),
            selected,
        };
        let line = serde_json::to_string(&rec).map_err(|e| Error::Invariant(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(&jsonl, e))?;
    }
    w.flush().map_err(|e| Error::io(&jsonl, e))?;

    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Invariant(e.to_string()))?;
    write_file(&out_dir.join("manifest.json"), text.as_bytes())?;
    Ok(manifest)
}

/// A dataset directory opened for reading.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
    pub records: Vec<SampleRecord>,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.json");
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
        let jpath = dir.join("samples.jsonl");
        let file = fs::File::open(&jpath).map_err(|e| Error::io(&jpath, e))?;
        let mut records = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&jpath, e))?;
            let rec: SampleRecord = serde_json::from_str(&line)
                .map_err(|e| Error::format(&jpath, format!("line {}: {e}", n + 1)))?;
            if rec.instruction.trim().is_empty() {
                return Err(Error::format(&jpath, format!("line {}: empty instruction", n + 1)));
            }
            records.push(rec);
        }
        let ids: BTreeSet<&str> = records.iter().map(|r| r.id.as_str()).collect();
        if ids.len() != records.len() || records.len() != manifest.count {
            return Err(Error::format(
                &jpath,
                format!("{} records with {} distinct ids, manifest says {}", records.len(), ids.len(), manifest.count),
            ));
        }
        Ok(Dataset {
            dir: dir.to_path_buf(),
            manifest,
            records,
        })
    }

    pub fn split(&self, split: Split) -> Vec<&SampleRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    /// Load and re-validate one sample's images.
    pub fn load(&self, rec: &SampleRecord) -> Result<EditSample> {
        let (src, tgt) = blob_paths(&self.dir, &rec.id);
        let sample = EditSample {
            source: Tensor::load(&src)?,
            instruction: rec.instruction.clone(),
            target: Tensor::load(&tgt)?,
            category: rec.category,
            sample_id: rec.id.clone(),
            seed: rec.seed,
        };
        let m = &self.manifest;
        if sample.source.shape() != [m.height, m.width, m.channels] {
            return Err(Error::format(
                &src,
                format!("shape {:?}, manifest says {}x{}x{}", sample.source.shape(), m.height, m.width, m.channels),
            ));
        }
        sample.validate().map_err(|e| Error::format(&src, e.to_string()))?;
        Ok(sample)
    }
}
