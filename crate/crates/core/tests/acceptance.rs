//! Acceptance suite: one check per criterion, each printing a single pass/fail line.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;

use hiedit::config::PipelineConfig;
use hiedit::dataforge::{
    build_dataset, generate_source_candidates, plan_split, render_scene, score_and_select, Category, CandidateScore,
    CandidateScorer, RuleScorer,
};
use hiedit::diffusion::{
    diffusion_loss, diffusion_loss_with, sample_latent, total_loss, AnalyticNoise, Conditioning, DiffusionDraw,
    NoisePredictor, NoiseSchedule,
};
use hiedit::encoders::Vocabulary;
use hiedit::guidance::{assemble_sequence, extract_guidance, mllm_loss, Boundaries, QFormer};
use hiedit::metrics::{
    evaluate, metric_dir, metric_l1, metric_sim, Embedder, EvalItem, ImageEmbedder, ToyEmbedder, Warnings,
};
use hiedit::model::Model;
use hiedit::nn::{lora_forward, LoraAdapter, ParamBuilder};
use hiedit::optim::AdamW;
use hiedit::train::{moving_average, train, train_step, TrainOptions};
use hiedit::{rng, selftest, Graph, ParamStore, Tensor, Var};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: std::result::Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn scalar(g: &Graph, v: Var) -> f64 {
    g.value(v).data()[0]
}

fn gradient_audit() -> Outcome {
    let rep = ok(selftest::run(&selftest::SEEDS))?;
    ensure!(rep.passed(), "worst relative error {:.3e} over {} checks", rep.worst(), rep.checks.len());
    ensure!(rep.elapsed < Duration::from_secs(60), "took {:.1?}", rep.elapsed);
    let composite = ["id_controller", "cme_enhancer", "qformer", "denoiser"];
    for name in composite {
        ensure!(rep.checks.iter().filter(|c| c.name == name).count() == selftest::SEEDS.len(), "{name} not audited on every seed");
    }
    Ok(format!("{} checks, worst {:.2e}, {:.1?}", rep.checks.len(), rep.worst(), rep.elapsed))
}

fn lora_contracts() -> Outcome {
    let mut r = rng::stream(2, "acceptance/lora", 0);
    let mut sizes: Vec<(usize, usize, usize, f64)> = vec![(64, 64, 8, 16.0)];
    while sizes.len() < 10 {
        sizes.push((r.random_range(1..40), r.random_range(1..40), r.random_range(1..9), r.random_range(0.5..32.0)));
    }
    let (mut zero_worst, mut merge_worst) = (0.0f64, 0.0f64);
    for &(d_in, d_out, rank, alpha) in &sizes {
        let mut store = ParamStore::new();
        let mut init = rng::stream(7, rng::INIT, d_in as u64);
        let adapter = {
            let mut pb = ParamBuilder::new(&mut store, &mut init, "");
            ok(LoraAdapter::new(&mut pb, d_in, d_out, rank, alpha))?
        };
        let w = Tensor::randn(&[d_out, d_in], 1.0, &mut r);
        let x = Tensor::randn(&[5, d_in], 1.0, &mut r);
        let plain = ok(x.matmul(&ok(w.transpose())?))?;

        let mut g = Graph::inference();
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let y = ok(lora_forward(&mut g, &store, xv, wv, &adapter))?;
        zero_worst = zero_worst.max(g.value(y).max_abs_diff(&plain));

        ok(store.set_value(adapter.b, Tensor::randn(&[d_out, rank], 0.5, &mut r)))?;
        let merged = ok(adapter.merge(&store, &w))?;
        let via_merge = ok(x.matmul(&ok(merged.transpose())?))?;
        let mut g = Graph::inference();
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let y = ok(lora_forward(&mut g, &store, xv, wv, &adapter))?;
        merge_worst = merge_worst.max(g.value(y).max_abs_diff(&via_merge));
    }
    ensure!(zero_worst < 1e-6, "zero-init deviation {zero_worst:.3e}");
    ensure!(merge_worst < 1e-6, "merge deviation {merge_worst:.3e}");
    Ok(format!("10 sizes incl. rank 8 / alpha 16; zero-init {zero_worst:.1e}, merge {merge_worst:.1e}"))
}

fn default_model() -> Result<Model, String> {
    let cfg = PipelineConfig::default();
    let corpus = ["What would happen if the cube melted?".to_string()];
    let vocab = ok(Vocabulary::build(&corpus, cfg.vocab.img_tokens))?;
    ok(Model::new(&cfg, vocab))
}

fn scene(category: Category, seed: u64) -> Result<(Tensor, Tensor), String> {
    let (_, meta) = ok(render_scene(category, seed, (32, 32, 3)))?;
    Ok((meta.render_source(), meta.render_target()))
}

fn sequence_layout() -> Outcome {
    let mut r = rng::stream(3, "acceptance/layout", 0);
    for case in 0..20 {
        let lens: [usize; 5] = std::array::from_fn(|_| r.random_range(1..12));
        let width = r.random_range(1..6);
        let mut g = Graph::inference();
        let parts: Vec<Var> = lens.iter().map(|&n| g.constant(Tensor::randn(&[n, width], 1.0, &mut r))).collect();
        let (seq, b) = ok(assemble_sequence(&mut g, parts[0], parts[1], parts[2], parts[3], parts[4]))?;
        let mut start = 0;
        for k in 0..5 {
            ensure!(b.start(k) == start && b.len(k) == lens[k], "case {case}: segment {k} misplaced in {:?}", b.ends);
            let rows = ok(g.value(seq).slice_rows(start, lens[k]))?;
            ensure!(&rows == g.value(parts[k]), "case {case}: segment {k} contents differ");
            start += lens[k];
        }
        ensure!(b.total() == start && b.img_start() == start - lens[4], "case {case}: totals {:?}", b.ends);
        let v = ok(extract_guidance(&mut g, seq, &b, lens[4]))?;
        ensure!(g.value(v) == g.value(parts[4]), "case {case}: extraction is not the final rows");
    }

    let m = default_model()?;
    let (src, _) = scene(Category::Physical, 1)?;
    let mut g = Graph::inference();
    let guide = ok(m.guide(&mut g, &src, "What would happen if the cube melted?"))?;
    let r_img = m.cfg.vocab.img_tokens;
    ensure!(r_img == 32 && g.shape(guide.v) == [32, m.cfg.dims.d_llm], "V has shape {:?}", g.shape(guide.v));
    ensure!(guide.boundaries.len(4) == 32 && guide.boundaries.img_start() + 32 == guide.boundaries.total(), "IMG rows are not last");

    let mut store = ParamStore::new();
    let mut init = rng::stream(0, rng::INIT, 0);
    let qf = {
        let mut pb = ParamBuilder::new(&mut store, &mut init, "");
        ok(QFormer::new(&mut pb, &m.cfg))?
    };
    ensure!(qf.layers.len() == 6, "{} query-transformer layers", qf.layers.len());
    let d_diff = m.cfg.dims.d_diff;
    ensure!(g.shape(guide.v_hat) == [77, d_diff], "model V-hat {:?}", g.shape(guide.v_hat));
    let mut g = Graph::inference();
    for rows in [1, 32, 50] {
        let v = g.constant(Tensor::randn(&[rows, m.cfg.dims.d_llm], 1.0, &mut r));
        let out = ok(qf.forward(&mut g, &store, v))?;
        ensure!(g.shape(out) == [77, d_diff], "query transformer output {:?} for {rows} rows", g.shape(out));
    }
    Ok(format!("20 layouts; V 32x{}; query transformer 77x{d_diff} through 6 layers", m.cfg.dims.d_llm))
}

fn cme_structure() -> Outcome {
    let mut m = default_model()?;
    let (src, tgt) = scene(Category::Physical, 2)?;
    let instr = "What would happen if the cube melted?";
    let shape = m.latent_shape();
    let draw = DiffusionDraw::sample(&mut rng::stream(4, rng::TRAIN_NOISE, 0), &m.sched, &shape);

    // The injections start at zero, so one optimizer step opens the path from L_DM to the enhancer.
    let sample = hiedit::dataforge::EditSample {
        source: src.clone(),
        instruction: instr.into(),
        target: tgt.clone(),
        category: Category::Physical,
        sample_id: "warmup".into(),
        seed: 0,
    };
    let mut opt = AdamW::new(&m.cfg.optim);
    ok(train_step(&mut m, &mut opt, &[&sample], std::slice::from_ref(&draw), 1))?;

    let mut g = Graph::new();
    let (guide, losses) = ok(m.losses(&mut g, &src, instr, &tgt, &draw))?;
    for modality in ["visual", "textual"] {
        let prefix = format!("cme.{modality}.block");
        let recs: Vec<_> = g.blocks().iter().filter(|b| b.label.starts_with(&prefix)).collect();
        ensure!(recs.len() == 5, "{modality} enhancer has {} cross-attention blocks", recs.len());
        ensure!(recs.iter().all(|b| b.kind == "cross_attention"), "{modality}: unexpected block kind");
        let (f1, f2) = (recs[0].output, recs[1].output);
        ensure!(recs[0].key_value == guide.v_hat, "{modality} block1 does not attend to V-hat");
        ensure!(recs[2].query == f1 && recs[2].key_value == f2, "{modality} block3 wiring");
        ensure!(recs[3].query == f2, "{modality} block4 query is not F2");
        ensure!(recs[4].query == recs[3].output && recs[4].key_value == recs[1].key_value, "{modality} block5 wiring");
    }
    ok(g.backward(losses.l_dm))?;
    let e = guide.enhanced;
    let mut norms = Vec::new();
    for (name, v) in [("R_vis", e.r_vis), ("e_vis", e.e_vis), ("R_txt", e.r_txt), ("e_txt", e.e_txt)] {
        let n = g.grad(v).map_or(0.0, |d| d.iter().map(|x| x * x).sum::<f64>().sqrt());
        ensure!(n > 0.0 && n.is_finite(), "{name} gets no gradient from L_DM");
        norms.push(format!("{name} {n:.1e}"));
    }
    Ok(format!("5+5 blocks wired; grad norms {}", norms.join(", ")))
}

struct Fixed(Tensor);

impl NoisePredictor for Fixed {
    fn predict(&self, g: &mut Graph, _: &ParamStore, _: usize, _: Var, _: &Conditioning) -> hiedit::Result<Var> {
        Ok(g.constant(self.0.clone()))
    }
}

fn unused_conditioning(g: &mut Graph) -> Conditioning {
    let x = g.constant(Tensor::zeros(&[1, 1]));
    Conditioning { img_lat: x, r_vis: x, r_txt: x, context: x }
}

fn loss_oracles() -> Outcome {
    let words: Vec<String> = (0..40).map(|i| format!("word{i}")).collect();
    let vocab = ok(Vocabulary::build(&[words.join(" ")], 32))?;
    let n = vocab.len();
    let b = Boundaries::from_lengths([5, 3, 2, 7, 32]);
    let mut r = rng::stream(5, "acceptance/loss", 0);
    let logits = Tensor::randn(&[b.total(), n], 3.0, &mut r);
    let mut g = Graph::new();
    let lv = g.input(logits.clone());
    let loss = { let v = ok(mllm_loss(&mut g, lv, &b, &vocab))?; scalar(&g, v) };
    let oracle: f64 = (0..32)
        .map(|i| {
            let row = logits.row(b.img_start() + i - 1);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - row[vocab.img_id(i + 1)]
        })
        .sum();
    ensure!((loss - oracle).abs() < 1e-10, "cross-entropy {loss} vs oracle {oracle}");

    let flat = g.input(Tensor::zeros(&[b.total(), n]));
    let uniform = { let v = ok(mllm_loss(&mut g, flat, &b, &vocab))?; scalar(&g, v) };
    let closed = 32.0 * (n as f64).ln();
    ensure!((uniform - closed).abs() < 1e-9, "uniform logits {uniform} vs r ln|V| {closed}");

    let sched = ok(NoiseSchedule::from_config(&PipelineConfig::default()))?;
    let store = ParamStore::new();
    let mut g = Graph::inference();
    let cond = unused_conditioning(&mut g);
    let z0 = Tensor::randn(&[64, 32], 1.0, &mut r);
    let draw = DiffusionDraw::sample(&mut r, &sched, z0.shape());
    let cheat = { let v = ok(diffusion_loss_with(&mut g, &store, &Fixed(draw.eps.clone()), &sched, &z0, &cond, &draw))?; scalar(&g, v) };
    ensure!(cheat == 0.0, "cheating denoiser loss {cheat}");
    let zero = Fixed(Tensor::zeros(&[64, 32]));
    let mut mean = 0.0;
    for _ in 0..1000 {
        mean += { let v = ok(diffusion_loss(&mut g, &store, &zero, &sched, &z0, &cond, &mut r))?; scalar(&g, v) } / 1000.0;
    }
    ensure!((mean - 1.0).abs() < 0.05, "zero denoiser mean loss {mean}");

    let mut g = Graph::new();
    let (a, c) = (g.input(Tensor::scalar(loss)), g.input(Tensor::scalar(mean)));
    let t = { let v = ok(total_loss(&mut g, a, c, 0))?; scalar(&g, v) };
    ensure!(t == loss + mean, "total {t} is not {loss} + {mean}");
    Ok(format!("CE diff {:.1e}; uniform diff {:.1e}; zero denoiser {mean:.4}", (loss - oracle).abs(), (uniform - closed).abs()))
}

fn overfit(work: &Path) -> Outcome {
    let mut cfg = PipelineConfig::default();
    ok(cfg.set("data.count=40"))?;
    ok(cfg.set("train.steps=2000"))?;
    ok(cfg.set("train.overfit=8"))?;
    ok(cfg.set("optim.batch_size=8"))?;
    let (data, run) = (work.join("overfit-data"), work.join("overfit-run"));
    ok(build_dataset(&cfg, &data))?;
    let started = Instant::now();
    let out = ok(train(&cfg, &data, &run, &TrainOptions { resume: false, stop_at_reduction: Some(0.99) }))?;
    let wall = started.elapsed();
    let losses: Vec<f64> = out.history.iter().map(|h| h.l_total).collect();
    let first = losses[0];
    let reached = losses.iter().position(|&l| l <= 0.1 * first).map(|i| i + 1);
    let Some(at) = reached else {
        return Err(format!("loss {first:.3} -> {:.3} after {} steps", losses[losses.len() - 1], losses.len()));
    };
    ensure!(wall < Duration::from_secs(15 * 60), "wall time {wall:.1?}");
    let ma = moving_average(&losses, 50);
    let rises = ma.windows(2).filter(|w| w[1] >= w[0]).count();
    ensure!(rises == 0, "50-step moving average rises {rises} times over {} windows", ma.len());
    Ok(format!(
        "90% reduction at step {at}; ran {} steps to {:.2}% of initial in {wall:.1?}; {} moving-average windows decrease",
        losses.len(),
        100.0 * losses[losses.len() - 1] / first,
        ma.len()
    ))
}

fn sampler_inversion() -> Outcome {
    let cfg = PipelineConfig::default();
    let sched = ok(NoiseSchedule::from_config(&cfg))?;
    let store = ParamStore::new();
    let z0 = Tensor::randn(&[64, cfg.dims.d_enc], 1.0, &mut rng::stream(6, "acceptance/z0", 0));
    let truth = AnalyticNoise { z0: &z0, sched: &sched };
    let mut errs = Vec::new();
    for steps in [100, 10] {
        let mut g = Graph::inference();
        let cond = unused_conditioning(&mut g);
        let mut sr = rng::stream(6, rng::SAMPLER, steps as u64);
        let out = ok(sample_latent(&store, &truth, &sched, &mut g, &cond, z0.shape(), steps, &mut sr))?;
        let err = out.max_abs_diff(&z0);
        ensure!(err < 1e-5, "{steps} steps: L-inf error {err:.3e}");
        errs.push(format!("{steps} steps {err:.1e}"));
    }
    Ok(errs.join(", "))
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn first_difference(a: &Path, b: &Path) -> Option<String> {
    let (ta, tb) = (tree(a), tree(b));
    if ta.keys().ne(tb.keys()) {
        return Some(format!("file sets differ: {:?} vs {:?}", ta.keys().collect::<Vec<_>>(), tb.keys().collect::<Vec<_>>()));
    }
    ta.iter().find(|(k, v)| tb[*k] != **v).map(|(k, _)| format!("{} differs", k.display()))
}

fn data_forge(work: &Path) -> Outcome {
    let cfg = PipelineConfig::default();
    let scorer = RuleScorer::from_config(&cfg.data);
    let mut r = rng::stream(8, "acceptance/forge", 0);
    let mut ties = 0;
    for batch in 0..50u64 {
        let cat = Category::ALL[batch as usize % 4];
        let (_, meta) = ok(render_scene(cat, 1000 + batch, (32, 32, 3)))?;
        let cands = ok(generate_source_candidates(&meta, 100))?;
        let target = meta.render_target();
        let n = r.random_range(1..=100);
        let got = ok(score_and_select(&scorer, &cands, &target, &meta, n))?;
        let reference = meta.render_source();
        let mut all: Vec<CandidateScore> = cands
            .iter()
            .enumerate()
            .map(|(i, c)| scorer.score(i, c, &reference, &target, &meta))
            .collect::<hiedit::Result<_>>()
            .map_err(|e| e.to_string())?;
        all.sort_by(|a, b| b.combined.total_cmp(&a.combined).then(a.candidate_id.cmp(&b.candidate_id)));
        ties += all.windows(2).filter(|w| w[0].combined == w[1].combined).count();
        all.truncate(n);
        ensure!(got == all, "batch {batch}: selection of {n} differs from the sort oracle");
    }

    let mut small = cfg.clone();
    ok(small.set("data.count=12"))?;
    let (a, b) = (work.join("forge-a"), work.join("forge-b"));
    ok(build_dataset(&small, &a))?;
    ok(build_dataset(&small, &b))?;
    if let Some(d) = first_difference(&a, &b) {
        return Err(format!("rebuild is not byte-identical: {d}"));
    }

    let mut full = cfg.clone();
    ok(full.set("data.count=51039"))?;
    let (manifest, jobs) = ok(plan_split(&full))?;
    ensure!(jobs.len() == 51039, "{} planned jobs", jobs.len());
    for (cat, counts) in &manifest.categories {
        ensure!(counts.val == 400, "{cat}: {} validation samples", counts.val);
    }
    Ok(format!("50 batches of M=100 match the oracle ({ties} tied scores); rebuild identical; 4x400 validation at 51,039"))
}

/// First coordinates of the pixels for images; fixed vectors for captions.
struct Probe;

impl ImageEmbedder for Probe {
    fn embed_image(&self, img: &Tensor) -> hiedit::Result<Vec<f64>> {
        Ok(img.data()[..4].to_vec())
    }
}

impl Embedder for Probe {
    fn embed_text(&self, text: &str) -> Vec<f64> {
        let k: f64 = text.parse().unwrap_or(0.0);
        vec![1.0 + 0.5 * k, 2.0 - 0.25 * k, -1.0 + 0.1 * k, 0.75 * k]
    }
}

fn metric_laws() -> Outcome {
    let mut r = rng::stream(9, "acceptance/metrics", 0);
    let x = Tensor::uniform(&[16, 16, 3], 0.5, &mut r).map(|v| v + 0.5);
    let l1 = ok(metric_l1(&x, &x))?;
    ensure!(l1 == 0.0, "L1(x, x) = {l1}");

    let src = Tensor::new(&[1, 4, 1], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
    let delta = [0.5, -0.25, 0.1, 0.75];
    let shifted = |c: f64| Tensor::new(&[1, 4, 1], src.data().iter().zip(delta).map(|(s, d)| s + c * d).collect()).unwrap();
    let mut worst = 0.0f64;
    for (ci, ct) in [(1.0, "1"), (0.2, "1"), (3.0, "1"), (1.0, "4"), (0.5, "0.1")] {
        let d = ok(metric_dir(&src, &shifted(ci), "0", ct, &Probe))?;
        ensure!(!d.degenerate, "parallel case flagged degenerate");
        worst = worst.max((d.value - 1.0).abs());
    }
    ensure!(worst < 1e-9, "parallel direction off by {worst:.3e}");

    let emb = ToyEmbedder::new(9);
    let dino = ToyEmbedder::dino(9);
    let warnings = Warnings::default();
    let mut items = Vec::new();
    let mut outputs = BTreeMap::new();
    for (k, cat) in Category::ALL.iter().cycle().take(12).enumerate() {
        let (src, tgt) = scene(*cat, 40 + k as u64)?;
        let id = format!("{}-{k:03}", cat.name());
        let out = Tensor::uniform(&[32, 32, 3], 0.5, &mut r).map(|v| v + 0.5);
        let (a, b) = (ok(emb.embed_image(&out))?, emb.embed_text(&format!("a photo of item {k}")));
        let s = ok(metric_sim(&a, &b, &warnings))?;
        ensure!((-1.0..=1.0).contains(&s), "similarity {s}");
        outputs.insert(id.clone(), out);
        items.push(EvalItem {
            id,
            category: cat.name().into(),
            source: src,
            target: tgt,
            source_caption: format!("a photo of a cube {k}"),
            target_caption: format!("a photo of a melted cube {k}"),
        });
    }
    let forward = ok(evaluate(&items, &outputs, &emb, &dino))?;
    for row in &forward.rows {
        for v in [row.sim_dir, row.sim_im, row.sim_out, row.sim_dino] {
            ensure!((-1.0..=1.0).contains(&v), "{}: cosine {v} outside [-1, 1]", row.id);
        }
    }
    let mut shuffled = items.clone();
    shuffled.shuffle(&mut r);
    let again = ok(evaluate(&shuffled, &outputs, &emb, &dino))?;
    ensure!(forward.to_json() == again.to_json(), "report depends on item order");
    Ok(format!("L1 0; parallel direction within {worst:.1e} under 5 scalings; {} rows in range; order-independent", forward.rows.len()))
}

fn cli(args: &[String]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_hiedit"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("hiedit {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)));
    }
    Ok(())
}

fn end_to_end(work: &Path) -> Outcome {
    let roots = [work.join("e2e-a"), work.join("e2e-b")];
    for root in &roots {
        let s = |p: &str| root.join(p).to_string_lossy().into_owned();
        let common = ["--seed", "11", "--set", "image.height=16", "--set", "image.width=16", "--set", "optim.batch_size=4"];
        let with = |rest: &[&str]| -> Vec<String> { common.iter().chain(rest).map(|a| a.to_string()).collect() };
        cli(&with(&["gen-data", "--count", "24", "--out-dir", &s("data")]))?;
        cli(&with(&["train", "--data", &s("data"), "--run-dir", &s("run"), "--steps", "100"]))?;
        cli(&with(&["eval", "--data", &s("data"), "--checkpoint", &s("run/checkpoint"), "--out-dir", &s("eval")]))?;
    }
    let log = fs::read_to_string(roots[0].join("run/train.jsonl")).map_err(|e| e.to_string())?;
    ensure!(log.lines().count() == 100, "{} log lines", log.lines().count());
    for sub in ["data", "run", "eval"] {
        if let Some(d) = first_difference(&roots[0].join(sub), &roots[1].join(sub)) {
            return Err(format!("{sub}: {d}"));
        }
    }
    let files = tree(&roots[0]).len();
    Ok(format!("two gen-data/train(100)/eval runs byte-identical across {files} files"))
}

#[test]
fn acceptance() {
    let work = tempfile::tempdir().unwrap();
    let w = work.path();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("gradient audit", Box::new(gradient_audit)),
        ("LoRA contracts", Box::new(lora_contracts)),
        ("sequence layout", Box::new(sequence_layout)),
        ("enhancer structure", Box::new(cme_structure)),
        ("loss oracles", Box::new(loss_oracles)),
        ("overfit 8", Box::new(|| overfit(w))),
        ("sampler inversion", Box::new(sampler_inversion)),
        ("data forge", Box::new(|| data_forge(w))),
        ("metric laws", Box::new(metric_laws)),
        ("end-to-end determinism", Box::new(|| end_to_end(w))),
    ];
    let mut failed = Vec::new();
    for (k, (name, check)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let (tag, detail) = match &result {
            Ok(d) => ("PASS", d.clone()),
            Err(e) => ("FAIL", e.clone()),
        };
        // Written to the raw handle so the line shows even when the harness captures output.
        let _ = writeln!(io::stderr().lock(), "[{tag}] {:>2} {name:<24} {detail} ({:.1?})", k + 1, t.elapsed());
        if result.is_err() {
            failed.push(k + 1);
        }
    }
    assert!(failed.is_empty(), "criteria failed: {failed:?}");
}
