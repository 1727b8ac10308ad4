//! Gradient audit over every differentiable op and the main composite blocks at
//! toy dimensions.

use std::time::{Duration, Instant};

use serde::Serialize;

use crate::autograd::{Graph, Mask, Var};
use crate::cme::Cme;
use crate::config::PipelineConfig;
use crate::diffusion::{Conditioning, Denoiser, NoisePredictor};
use crate::error::{Error, Result};
use crate::frce::Frce;
use crate::gradcheck::{grad_check, grad_check_params, DEFAULT_STEP};
use crate::guidance::QFormer;
use crate::nn::ParamBuilder;
use crate::params::{ParamId, ParamStore};
use crate::rng::{self, StreamRng};
use crate::tensor::Tensor;

pub const TOLERANCE: f64 = 1e-4;
pub const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub seed: u64,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct SelftestReport {
    pub checks: Vec<Check>,
    pub elapsed: Duration,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn worst(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }
}

/// Contracts `out` against a fixed random tensor so every output coordinate matters.
fn probe(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let mut r = rng::stream(seed, "probe", out.index() as u64);
    let w = g.constant(Tensor::randn(g.shape(out), 1.0, &mut r));
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

type OpFn = fn(&mut Graph, &[Var]) -> Result<Var>;

fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |g, v| g.matmul(v[0], v[1])),
        ("matmul_bt", vec![vec![3, 4], vec![2, 4]], |g, v| g.matmul_bt(v[0], v[1])),
        ("add", vec![vec![3, 4], vec![3, 4]], |g, v| g.add(v[0], v[1])),
        ("sub", vec![vec![3, 4], vec![3, 4]], |g, v| g.sub(v[0], v[1])),
        ("mul", vec![vec![3, 4], vec![3, 4]], |g, v| g.mul(v[0], v[1])),
        ("add_row_bias", vec![vec![3, 4], vec![4]], |g, v| g.add_row_bias(v[0], v[1])),
        ("scale", vec![vec![3, 4]], |g, v| Ok(g.scale(v[0], -1.7))),
        ("softmax", vec![vec![3, 5]], |g, v| Ok(g.softmax(v[0]))),
        ("softmax_causal", vec![vec![4, 4]], |g, v| g.softmax_causal(v[0])),
        ("softmax_blocks", vec![vec![6, 6]], |g, v| g.softmax_masked(v[0], Mask::Blocks(2))),
        ("layernorm", vec![vec![3, 5], vec![5], vec![5]], |g, v| g.layernorm(v[0], v[1], v[2], 1e-5)),
        ("gelu", vec![vec![3, 4]], |g, v| Ok(g.gelu(v[0]))),
        ("concat_rows", vec![vec![2, 3], vec![1, 3]], |g, v| g.concat(&[v[0], v[1]], 0)),
        ("concat_cols", vec![vec![2, 3], vec![2, 2]], |g, v| g.concat(&[v[0], v[1]], 1)),
        ("narrow", vec![vec![4, 5]], |g, v| g.narrow(v[0], 1, 1, 3)),
        ("gather_rows", vec![vec![4, 3]], |g, v| g.gather_rows(v[0], &[2, 0, 2, 3])),
        ("transpose", vec![vec![3, 4]], |g, v| g.transpose(v[0])),
        ("reshape", vec![vec![3, 4]], |g, v| g.reshape(v[0], &[2, 6])),
        ("sum", vec![vec![3, 4]], |g, v| Ok(g.sum(v[0]))),
        ("mean", vec![vec![3, 4]], |g, v| Ok(g.mean(v[0]))),
        ("square", vec![vec![3, 4]], |g, v| Ok(g.square(v[0]))),
        ("cross_entropy_rows", vec![vec![4, 6]], |g, v| g.cross_entropy_rows(v[0], &[0, 2, 3], &[5, 1, 1])),
        ("mse", vec![vec![3, 4], vec![3, 4]], |g, v| g.mse(v[0], v[1])),
    ]
}

fn check(name: &str, seed: u64, err: f64) -> Check {
    Check {
        name: name.to_string(),
        seed,
        max_rel_err: err,
        passed: err < TOLERANCE,
    }
}

fn store_for(cfg: &PipelineConfig) -> (ParamStore, StreamRng) {
    (ParamStore::new(), rng::stream(cfg.seed, rng::INIT, 0))
}

fn ids_with(store: &ParamStore, prefix: &str) -> Result<Vec<ParamId>> {
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.name(id).starts_with(prefix)).collect();
    if ids.is_empty() {
        return Err(Error::Invariant(format!("no parameters under `{prefix}`")));
    }
    Ok(ids)
}

fn composite_checks(seed: u64) -> Result<Vec<Check>> {
    let mut cfg = PipelineConfig::toy();
    cfg.seed = seed;
    cfg.qformer.layers = 6;
    let d = cfg.dims.d_enc;
    let mut data = rng::stream(seed, "selftest/data", 0);
    let mut out = Vec::new();

    let (mut store, mut r) = store_for(&cfg);
    let frce = Frce::new(&mut ParamBuilder::new(&mut store, &mut r, ""), &cfg)?;
    let rv = Tensor::randn(&[5, d], 1.0, &mut data);
    let objs = Tensor::randn(&[2, cfg.dims.d_llm], 1.0, &mut data);
    let ids = ids_with(&store, "frce.id_controller.")?;
    let err = grad_check_params(
        &mut store,
        &ids,
        |g, s| {
            let (a, b) = (g.constant(rv.clone()), g.constant(objs.clone()));
            let o = frce.id_controller(g, s, a, b)?;
            probe(g, o, seed)
        },
        DEFAULT_STEP,
    )?;
    out.push(check("id_controller", seed, err));

    let (mut store, mut r) = store_for(&cfg);
    let cme = Cme::new(&mut ParamBuilder::new(&mut store, &mut r, ""), &cfg)?;
    let vh = Tensor::randn(&[cfg.qformer.queries, cfg.dims.d_diff], 1.0, &mut data);
    let ctx = Tensor::randn(&[5, d], 1.0, &mut data);
    let cues = Tensor::randn(&[3, d], 1.0, &mut data);
    let ids = ids_with(&store, "cme.visual.")?;
    let err = grad_check_params(
        &mut store,
        &ids,
        |g, s| {
            let [a, b, c] = [&vh, &ctx, &cues].map(|t| g.constant(t.clone()));
            let o = cme.visual.forward(g, s, a, b, c)?;
            let both = g.concat(&[o.r_bar, o.e_bar], 0)?;
            probe(g, both, seed)
        },
        DEFAULT_STEP,
    )?;
    out.push(check("cme_enhancer", seed, err));

    let (mut store, mut r) = store_for(&cfg);
    let qf = QFormer::new(&mut ParamBuilder::new(&mut store, &mut r, ""), &cfg)?;
    let v = Tensor::randn(&[cfg.vocab.img_tokens, cfg.dims.d_llm], 1.0, &mut data);
    let ids: Vec<ParamId> = store.ids().collect();
    let err = grad_check_params(
        &mut store,
        &ids,
        |g, s| {
            let x = g.constant(v.clone());
            let o = qf.forward(g, s, x)?;
            probe(g, o, seed)
        },
        DEFAULT_STEP,
    )?;
    out.push(check("qformer", seed, err));

    let (mut store, mut r) = store_for(&cfg);
    let (n_vis, n_txt) = (3, 2);
    let den = Denoiser::new(&mut ParamBuilder::new(&mut store, &mut r, ""), &cfg, n_vis, n_txt)?;
    // Zero-initialized injections would hide their input gradients.
    for id in ids_with(&store, "denoiser.inject")? {
        let t = Tensor::randn(store.value(id).shape(), 0.3, &mut data);
        store.set_value(id, t)?;
    }
    let (gh, gw) = cfg.fine_grid();
    let n = gh * gw;
    let tensors = [
        Tensor::randn(&[n, d], 1.0, &mut data),
        Tensor::randn(&[n, d], 1.0, &mut data),
        Tensor::randn(&[n_vis, d], 1.0, &mut data),
        Tensor::randn(&[n_txt, d], 1.0, &mut data),
        Tensor::randn(&[4, d], 1.0, &mut data),
    ];
    let eps = Tensor::randn(&[n, d], 1.0, &mut data);
    let ids: Vec<ParamId> = store.ids().collect();
    let t = 1 + (seed as usize) % (cfg.diffusion.t_steps - 1);
    let err = grad_check_params(
        &mut store,
        &ids,
        |g, s| {
            let [zt, il, rv, rt, ctx] = tensors.each_ref().map(|x| g.constant(x.clone()));
            let cond = Conditioning {
                img_lat: il,
                r_vis: rv,
                r_txt: rt,
                context: ctx,
            };
            let pred = den.predict(g, s, t, zt, &cond)?;
            let e = g.constant(eps.clone());
            g.mse(pred, e)
        },
        DEFAULT_STEP,
    )?;
    out.push(check("denoiser", seed, err));
    Ok(out)
}

pub fn run(seeds: &[u64]) -> Result<SelftestReport> {
    let start = Instant::now();
    let mut checks = Vec::new();
    for &seed in seeds {
        for (k, (name, shapes, f)) in op_cases().into_iter().enumerate() {
            let mut r = rng::stream(seed, "selftest/op", k as u64);
            let inputs: Vec<Tensor> = shapes.iter().map(|s| Tensor::randn(s, 1.0, &mut r)).collect();
            let err = grad_check(
                |g, v| {
                    let o = f(g, v)?;
                    probe(g, o, seed)
                },
                &inputs,
                DEFAULT_STEP,
            )?;
            checks.push(check(name, seed, err));
        }
        checks.extend(composite_checks(seed)?);
    }
    Ok(SelftestReport {
        checks,
        elapsed: start.elapsed(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_seed_passes() {
        let rep = run(&[9]).unwrap();
        assert_eq!(rep.checks.len(), op_cases().len() + 4);
        assert!(rep.passed(), "{:?}", rep.checks.iter().filter(|c| !c.passed).collect::<Vec<_>>());
    }
}
