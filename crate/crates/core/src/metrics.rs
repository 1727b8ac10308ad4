//! Edit-quality metrics: pixel L1 and embedding cosines, aggregated into a report.
//!
//! Reference pairs follow the usual convention for instruction editing:
//! `sim_im` compares the output to the source image, `sim_out` the output to the
//! target caption, `sim_dino` the output to the target image, and `sim_dir` the
//! image delta to the caption delta.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::encoders::{image_dims, tokenize};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Tolerance on the unit-norm contract and the degenerate-delta threshold.
pub const UNIT_TOL: f64 = 1e-9;

pub trait ImageEmbedder: Sync {
    fn embed_image(&self, img: &Tensor) -> Result<Vec<f64>>;
}

pub trait Embedder: ImageEmbedder {
    fn embed_text(&self, text: &str) -> Vec<f64>;
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = norm(&v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    } else if let Some(first) = v.first_mut() {
        *first = 1.0;
    }
    v
}

/// Frozen random-feature embedder: grid-pooled pixels through a fixed projection,
/// and a bag of per-token random vectors for text.
#[derive(Clone, Debug)]
pub struct ToyEmbedder {
    seed: u64,
    grid: usize,
    dim: usize,
}

impl ToyEmbedder {
    pub const DIM: usize = 64;

    pub fn new(seed: u64) -> Self {
        Self::with_grid(seed, 4, "clip")
    }

    /// A second, finer-grained image embedder used for `sim_dino`.
    pub fn dino(seed: u64) -> Self {
        Self::with_grid(seed, 8, "dino")
    }

    fn with_grid(seed: u64, grid: usize, tag: &str) -> Self {
        ToyEmbedder {
            seed: rng::derive_seed(seed, &format!("{}/{tag}", rng::METRICS), 0),
            grid,
            dim: Self::DIM,
        }
    }

    fn projection(&self, inputs: usize) -> Tensor {
        let mut r = rng::stream(self.seed, "proj", inputs as u64);
        Tensor::randn(&[inputs, self.dim], 1.0 / (inputs as f64).sqrt(), &mut r)
    }

    fn pooled(&self, img: &Tensor) -> Result<Vec<f64>> {
        let (h, w, c) = image_dims(img)?;
        let g = self.grid;
        let mut sums = vec![0.0; g * g * c];
        let mut counts = vec![0usize; g * g];
        for y in 0..h {
            for x in 0..w {
                let cell = (y * g / h) * g + x * g / w;
                counts[cell] += 1;
                for ch in 0..c {
                    sums[cell * c + ch] += img.data()[(y * w + x) * c + ch];
                }
            }
        }
        Ok(sums
            .iter()
            .enumerate()
            .map(|(i, s)| if counts[i / c] == 0 { 0.0 } else { s / counts[i / c] as f64 - 0.5 })
            .collect())
    }
}

impl ImageEmbedder for ToyEmbedder {
    fn embed_image(&self, img: &Tensor) -> Result<Vec<f64>> {
        let f = self.pooled(img)?;
        let p = self.projection(f.len());
        let x = Tensor::new(&[1, f.len()], f)?;
        Ok(normalized(x.matmul(&p)?.into_data()))
    }
}

impl Embedder for ToyEmbedder {
    fn embed_text(&self, text: &str) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim];
        for tok in tokenize(text) {
            let mut r = rng::stream(self.seed, &format!("token/{tok}"), 0);
            let v = Tensor::randn(&[self.dim], 1.0, &mut r);
            acc.iter_mut().zip(v.data()).for_each(|(a, b)| *a += b);
        }
        normalized(acc)
    }
}

/// Mean absolute pixel difference.
pub fn metric_l1(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dim("metric_l1", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

/// Counts inputs that had to be renormalized before a cosine.
#[derive(Debug, Default)]
pub struct Warnings(AtomicUsize);

impl Warnings {
    pub fn count(&self) -> usize {
        self.0.load(Ordering::Relaxed)
    }

    fn bump(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }
}

/// Dot product of unit vectors, clamped to [-1, 1]. Non-unit inputs are normalized
/// and counted; a zero vector scores 0.
pub fn metric_sim(u: &[f64], v: &[f64], warnings: &Warnings) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::dim("metric_sim", format!("{} vs {}", u.len(), v.len())));
    }
    let mut scale = 1.0;
    for x in [u, v] {
        let n = norm(x);
        if (n - 1.0).abs() > UNIT_TOL {
            warnings.bump();
            if n == 0.0 {
                return Ok(0.0);
            }
            scale /= n;
        }
    }
    let d: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((d * scale).clamp(-1.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Direction {
    pub value: f64,
    pub degenerate: bool,
}

/// Cosine between two deltas; 0 and flagged when either is shorter than `UNIT_TOL`.
pub fn direction_cosine(d_img: &[f64], d_txt: &[f64]) -> Direction {
    let (ni, nt) = (norm(d_img), norm(d_txt));
    if ni < UNIT_TOL || nt < UNIT_TOL {
        return Direction {
            value: 0.0,
            degenerate: true,
        };
    }
    let d: f64 = d_img.iter().zip(d_txt).map(|(a, b)| a * b).sum();
    Direction {
        value: (d / (ni * nt)).clamp(-1.0, 1.0),
        degenerate: false,
    }
}

pub fn metric_dir(
    src_img: &Tensor,
    out_img: &Tensor,
    src_caption: &str,
    out_caption: &str,
    emb: &dyn Embedder,
) -> Result<Direction> {
    let delta = |a: Vec<f64>, b: Vec<f64>| -> Vec<f64> { b.iter().zip(&a).map(|(y, x)| y - x).collect() };
    let di = delta(emb.embed_image(src_img)?, emb.embed_image(out_img)?);
    let dt = delta(emb.embed_text(src_caption), emb.embed_text(out_caption));
    if di.len() != dt.len() {
        return Err(Error::dim("metric_dir", format!("image dim {} vs text dim {}", di.len(), dt.len())));
    }
    Ok(direction_cosine(&di, &dt))
}

/// One evaluated pair with the captions used for the text-side metrics.
#[derive(Clone, Debug)]
pub struct EvalItem {
    pub id: String,
    pub category: String,
    pub source: Tensor,
    pub target: Tensor,
    pub source_caption: String,
    pub target_caption: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub id: String,
    pub category: String,
    pub sim_dir: f64,
    pub sim_im: f64,
    pub sim_out: f64,
    pub l1: f64,
    pub sim_dino: f64,
    pub dir_degenerate: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Means {
    pub count: usize,
    pub sim_dir: f64,
    pub sim_im: f64,
    pub sim_out: f64,
    pub l1: f64,
    pub sim_dino: f64,
}

impl Means {
    /// Rows are folded in the order given; callers pass them sorted by id.
    fn of<'a>(rows: impl Iterator<Item = &'a MetricRow>) -> Self {
        let mut m = Means::default();
        for r in rows {
            m.count += 1;
            m.sim_dir += r.sim_dir;
            m.sim_im += r.sim_im;
            m.sim_out += r.sim_out;
            m.l1 += r.l1;
            m.sim_dino += r.sim_dino;
        }
        if m.count > 0 {
            let n = m.count as f64;
            for v in [&mut m.sim_dir, &mut m.sim_im, &mut m.sim_out, &mut m.l1, &mut m.sim_dino] {
                *v /= n;
            }
        }
        m
    }

    fn columns(&self) -> [f64; 5] {
        [self.sim_dir, self.sim_im, self.sim_out, self.l1, self.sim_dino]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub overall: Means,
    pub per_category: BTreeMap<String, Means>,
    /// Judge-based scores this harness cannot compute; always null.
    pub clip_score: Option<f64>,
    pub mllm_score: Option<f64>,
    pub ins_align: Option<f64>,
    pub omissions: Vec<String>,
    pub degenerate_dir: usize,
    pub renormalized_inputs: usize,
}

pub const COLUMNS: [&str; 5] = ["sim_dir", "sim_im", "sim_out", "l1", "sim_dino"];

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned text table: overall and per-category means.
    pub fn to_table(&self) -> String {
        let mut s = format!("{:<12}{:>7}", "split", "n");
        for c in COLUMNS {
            let _ = write!(s, "{c:>10}");
        }
        s.push('\n');
        let mut line = |name: &str, m: &Means| {
            let _ = write!(s, "{name:<12}{:>7}", m.count);
            for v in m.columns() {
                let _ = write!(s, "{v:>10.4}");
            }
            s.push('\n');
        };
        line("overall", &self.overall);
        for (c, m) in &self.per_category {
            line(c, m);
        }
        s.push_str("clip_score, mllm_score, ins_align: not computed\n");
        if !self.omissions.is_empty() {
            let _ = writeln!(s, "omitted (no output): {}", self.omissions.join(", "));
        }
        s
    }
}

/// Score every item that has an output; items without one are listed as omissions.
pub fn evaluate(
    items: &[EvalItem],
    outputs: &BTreeMap<String, Tensor>,
    emb: &dyn Embedder,
    dino: &dyn ImageEmbedder,
) -> Result<MetricReport> {
    let warnings = Warnings::default();
    let mut sorted: Vec<&EvalItem> = items.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let mut rows = Vec::new();
    let mut omissions = Vec::new();
    for it in sorted {
        let Some(out) = outputs.get(&it.id) else {
            omissions.push(it.id.clone());
            continue;
        };
        let e_out = emb.embed_image(out)?;
        let dir = metric_dir(&it.source, out, &it.source_caption, &it.target_caption, emb)?;
        rows.push(MetricRow {
            id: it.id.clone(),
            category: it.category.clone(),
            sim_dir: dir.value,
            sim_im: metric_sim(&e_out, &emb.embed_image(&it.source)?, &warnings)?,
            sim_out: metric_sim(&e_out, &emb.embed_text(&it.target_caption), &warnings)?,
            l1: metric_l1(out, &it.target)?,
            sim_dino: metric_sim(&dino.embed_image(out)?, &dino.embed_image(&it.target)?, &warnings)?,
            dir_degenerate: dir.degenerate,
        });
    }
    let mut per_category = BTreeMap::new();
    for r in &rows {
        per_category.entry(r.category.clone()).or_insert(());
    }
    let per_category = per_category
        .into_keys()
        .map(|c| {
            let m = Means::of(rows.iter().filter(|r| r.category == c));
            (c, m)
        })
        .collect();
    Ok(MetricReport {
        overall: Means::of(rows.iter()),
        per_category,
        clip_score: None,
        mllm_score: None,
        ins_align: None,
        omissions,
        degenerate_dir: rows.iter().filter(|r| r.dir_degenerate).count(),
        renormalized_inputs: warnings.count(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;

    fn img(seed: u64) -> Tensor {
        let mut r = rng::stream(seed, "img", 0);
        Tensor::uniform(&[16, 16, 3], 0.5, &mut r).map(|v| v + 0.5)
    }

    #[test]
    fn l1_laws() {
        let a = img(1);
        let b = img(2);
        assert_eq!(metric_l1(&a, &a).unwrap(), 0.0);
        assert_eq!(metric_l1(&Tensor::zeros(&[4, 4, 3]), &Tensor::full(&[4, 4, 3], 1.0)).unwrap(), 1.0);
        let mut brute = 0.0;
        for i in 0..a.len() {
            brute += (a.data()[i] - b.data()[i]).abs();
        }
        assert!((metric_l1(&a, &b).unwrap() - brute / 768.0).abs() < 1e-12);
        assert!(metric_l1(&a, &Tensor::zeros(&[16, 16, 1])).is_err());
    }

    #[test]
    fn sim_laws() {
        let w = Warnings::default();
        let e = ToyEmbedder::new(0).embed_image(&img(3)).unwrap();
        assert!((metric_sim(&e, &e, &w).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(metric_sim(&[1.0, 0.0], &[0.0, 1.0], &w).unwrap(), 0.0);
        assert_eq!(w.count(), 0);
        assert!((metric_sim(&[2.0, 0.0], &[1.0, 0.0], &w).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(w.count(), 1);
        assert!(metric_sim(&[1.0], &[1.0, 0.0], &w).is_err());
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let e = ToyEmbedder::new(5);
        let d = ToyEmbedder::dino(5);
        for s in 0..5 {
            assert!((norm(&e.embed_image(&img(s)).unwrap()) - 1.0).abs() < UNIT_TOL);
            assert!((norm(&d.embed_image(&img(s)).unwrap()) - 1.0).abs() < UNIT_TOL);
        }
        for t in ["a photo of a cube", "", "?"] {
            assert!((norm(&e.embed_text(t)) - 1.0).abs() < UNIT_TOL);
        }
    }

    proptest! {
        #[test]
        fn sim_matches_dot_oracle(u in prop::collection::vec(-1.0f64..1.0, 8), v in prop::collection::vec(-1.0f64..1.0, 8)) {
            prop_assume!(norm(&u) > 1e-3 && norm(&v) > 1e-3);
            let (u, v) = (normalized(u), normalized(v));
            let mut dot = 0.0;
            for i in 0..8 {
                dot += u[i] * v[i];
            }
            let got = metric_sim(&u, &v, &Warnings::default()).unwrap();
            prop_assert!((got - dot).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&got));
        }

        #[test]
        fn direction_is_scale_invariant(
            a in prop::collection::vec(-1.0f64..1.0, 6),
            b in prop::collection::vec(-1.0f64..1.0, 6),
            c in 0.01f64..100.0,
        ) {
            prop_assume!(norm(&a) > 1e-3 && norm(&b) > 1e-3);
            let base = direction_cosine(&a, &b).value;
            let sa: Vec<f64> = a.iter().map(|x| x * c).collect();
            let sb: Vec<f64> = b.iter().map(|x| x * c).collect();
            prop_assert!((direction_cosine(&sa, &b).value - base).abs() < 1e-12);
            prop_assert!((direction_cosine(&a, &sb).value - base).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&base));
        }
    }

    /// Image embedding is the mean pixel on one axis; text is its word count.
    struct Axis;

    impl ImageEmbedder for Axis {
        fn embed_image(&self, img: &Tensor) -> Result<Vec<f64>> {
            Ok(vec![img.sum() / img.len() as f64, 0.0])
        }
    }

    impl Embedder for Axis {
        fn embed_text(&self, text: &str) -> Vec<f64> {
            vec![tokenize(text).len() as f64, 0.0]
        }
    }

    #[test]
    fn direction_degenerate_and_parallel() {
        let e = ToyEmbedder::new(1);
        let a = img(1);
        let d = metric_dir(&a, &a, "a cube", "a cube", &e).unwrap();
        assert!(d.degenerate);
        assert_eq!(d.value, 0.0);
        let brighter = a.map(|v| (v + 0.2).min(1.0));
        let d = metric_dir(&a, &brighter, "a cube", "a melted cube", &Axis).unwrap();
        assert!(!d.degenerate);
        assert!((d.value - 1.0).abs() < 1e-9);
    }

    fn items(n: usize) -> (Vec<EvalItem>, BTreeMap<String, Tensor>) {
        let cats = ["physical", "temporal", "causal"];
        let mut outs = BTreeMap::new();
        let items = (0..n)
            .map(|i| {
                let id = format!("s{i:03}");
                outs.insert(id.clone(), img(100 + i as u64));
                EvalItem {
                    id,
                    category: cats[i % 3].to_string(),
                    source: img(i as u64),
                    target: img(50 + i as u64),
                    source_caption: "a photo of a cube".into(),
                    target_caption: if i % 2 == 0 { "a photo of a melted cube" } else { "a photo of a grown ball" }.into(),
                }
            })
            .collect();
        (items, outs)
    }

    #[test]
    fn oracle_outputs_score_perfectly() {
        let (it, _) = items(6);
        let outs = it.iter().map(|i| (i.id.clone(), i.target.clone())).collect();
        let r = evaluate(&it, &outs, &ToyEmbedder::new(0), &ToyEmbedder::dino(0)).unwrap();
        assert_eq!(r.overall.l1, 0.0);
        assert!((r.overall.sim_dino - 1.0).abs() < 1e-12);
    }

    #[test]
    fn aggregates_recombine_and_ignore_order() {
        let (mut it, mut outs) = items(17);
        outs.remove("s004");
        let (e, d) = (ToyEmbedder::new(0), ToyEmbedder::dino(0));
        let r = evaluate(&it, &outs, &e, &d).unwrap();
        assert_eq!(r.omissions, ["s004"]);
        assert_eq!(r.overall.count, 16);
        assert!(r.rows.iter().all(|x| [x.sim_dir, x.sim_im, x.sim_out, x.sim_dino].iter().all(|v| v.abs() <= 1.0)));

        let mean_l1 = r.rows.iter().map(|x| x.l1).sum::<f64>() / 16.0;
        assert!((r.overall.l1 - mean_l1).abs() < 1e-12);
        for k in 0..5 {
            let weighted: f64 = r.per_category.values().map(|m| m.columns()[k] * m.count as f64).sum::<f64>() / 16.0;
            assert!((weighted - r.overall.columns()[k]).abs() < 1e-12);
        }

        let mut rng = rng::stream(3, "shuffle", 0);
        for _ in 0..5 {
            it.shuffle(&mut rng);
            let again = evaluate(&it, &outs, &e, &d).unwrap();
            assert_eq!(again.to_json(), r.to_json());
        }
        let table = r.to_table();
        assert!(table.lines().next().unwrap().ends_with("sim_dir    sim_im   sim_out        l1  sim_dino"));
        assert!(table.contains("s004"));
    }
}
