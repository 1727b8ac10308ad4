//! Latent diffusion editor: noise schedule, forward noising, conditioning,
//! the transformer denoiser, losses and a deterministic DDIM sampler.
//!
//! The latent of an image is its fine-scale encoder token grid `[n, C]`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autograd::{Graph, Mask, Var};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::nn::{AttentionSpec, LayerNorm, Linear, ParamBuilder, TransformerLayer};
use crate::params::{ParamId, ParamStore};
use crate::rng::StreamRng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Rejects any β outside `(0, 1)`, which is exactly what keeps ᾱ strictly decreasing.
    pub fn new(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("noise schedule needs at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Config(format!("beta {b} outside (0, 1)")));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        if alpha_bars.windows(2).any(|w| w[1] >= w[0]) || alpha_bars.iter().any(|&a| !(a > 0.0)) {
            return Err(Error::Invariant("alpha_bar is not strictly decreasing in (0, 1)".into()));
        }
        Ok(NoiseSchedule { betas, alpha_bars })
    }

    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::new(betas)
    }

    pub fn from_config(cfg: &PipelineConfig) -> Result<Self> {
        let d = &cfg.diffusion;
        Self::linear(d.t_steps, d.beta_start, d.beta_end)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// ᾱ_t for `1 ≤ t ≤ T`; ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Validation(format!("timestep {t} outside [1, {}]", self.steps())));
        }
        Ok(())
    }
}

/// `z_t = √ᾱ_t · z0 + √(1−ᾱ_t) · ε`.
pub fn forward_noising(z0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    z0.zip(eps, |z, e| a * z + b * e)
}

/// Sinusoidal embedding of a timestep, `[1, d]`.
pub fn timestep_embedding(t: usize, d: usize) -> Tensor {
    let half = d / 2;
    let mut out = vec![0.0; d];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (t as f64 * freq).sin();
        out[i + half] = (t as f64 * freq).cos();
    }
    Tensor::new(&[1, d], out).expect("shape")
}

/// Conditioning shared by every denoiser call of one sample.
#[derive(Clone, Copy, Debug)]
pub struct Conditioning {
    /// Source latent, `[n, C]`.
    pub img_lat: Var,
    pub r_vis: Var,
    pub r_txt: Var,
    /// `[ē_vis; ē_txt]`.
    pub context: Var,
}

pub trait NoisePredictor {
    fn predict(&self, g: &mut Graph, store: &ParamStore, t: usize, z_t: Var, cond: &Conditioning) -> Result<Var>;
}

/// Token-mixing then zero-initialized channel projection of an `R̄` set onto the latent grid.
#[derive(Clone, Debug)]
pub struct Injection {
    pub rows: ParamId,
    pub proj: Linear,
}

impl Injection {
    fn new(pb: &mut ParamBuilder, name: &str, n_latent: usize, n_ctx: usize, d_in: usize, d_out: usize) -> Result<Self> {
        let mut pb = pb.scope(name);
        Ok(Injection {
            rows: pb.xavier("rows", n_latent, n_ctx)?,
            proj: Linear::zeroed(&mut pb, "proj", d_in, d_out, true)?,
        })
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, r_bar: Var) -> Result<Var> {
        let rows = g.param(store, self.rows);
        let mixed = g.matmul(rows, r_bar)?;
        self.proj.forward(g, store, mixed)
    }
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    pub inj_vis: Injection,
    pub inj_txt: Injection,
    pub in_proj: Linear,
    pub time_proj: Linear,
    pub blocks: Vec<TransformerLayer>,
    pub ln_out: LayerNorm,
    pub head: Linear,
    pub channels: usize,
    pub n_latent: usize,
}

impl Denoiser {
    /// `n_vis` / `n_txt` are the row counts of `R̄_vis` / `R̄_txt`.
    pub fn new(pb: &mut ParamBuilder, cfg: &PipelineConfig, n_vis: usize, n_txt: usize) -> Result<Self> {
        let c = cfg.dims.d_enc;
        let d = cfg.dims.d_diff;
        let (gh, gw) = cfg.fine_grid();
        let n = gh * gw;
        let mut pb = pb.scope("denoiser");
        let spec = AttentionSpec::plain(d, cfg.diffusion.heads);
        Ok(Denoiser {
            inj_vis: Injection::new(&mut pb, "inject_visual", n, n_vis, d, 2 * c)?,
            inj_txt: Injection::new(&mut pb, "inject_textual", n, n_txt, d, 2 * c)?,
            in_proj: Linear::new(&mut pb, "in_proj", 2 * c, d, true)?,
            time_proj: Linear::new(&mut pb, "time_proj", d, d, true)?,
            blocks: (0..cfg.diffusion.blocks)
                .map(|i| TransformerLayer::new(&mut pb, &format!("block{i}"), spec, true))
                .collect::<Result<_>>()?,
            ln_out: LayerNorm::new(&mut pb, "ln_out", d)?,
            head: Linear::new(&mut pb, "head", d, c, true)?,
            channels: c,
            n_latent: n,
        })
    }

    /// `[z_t, img_lat] + inject(R̄_vis) + inject(R̄_txt)`.
    pub fn condition_inputs(&self, g: &mut Graph, store: &ParamStore, z_t: Var, img_lat: Var, r_vis: Var, r_txt: Var) -> Result<Var> {
        let (nz, _) = g.value(z_t).dims2()?;
        let (ni, _) = g.value(img_lat).dims2()?;
        if nz != ni || nz != self.n_latent {
            return Err(Error::dim(
                "condition_inputs",
                format!("latent rows {nz}, source rows {ni}, grid {}", self.n_latent),
            ));
        }
        let x = g.concat(&[z_t, img_lat], 1)?;
        let v = self.inj_vis.forward(g, store, r_vis)?;
        let t = self.inj_txt.forward(g, store, r_txt)?;
        let x = g.add(x, v)?;
        g.add(x, t)
    }

    /// Noise prediction from conditioned inputs `[n, 2C]` and context rows.
    pub fn denoise(&self, g: &mut Graph, store: &ParamStore, t: usize, conditioned: Var, context: Var) -> Result<Var> {
        let mut x = self.in_proj.forward(g, store, conditioned)?;
        let d = g.value(x).last_dim();
        let temb = g.constant(timestep_embedding(t, d));
        let temb = self.time_proj.forward(g, store, temb)?;
        let temb = g.reshape(temb, &[d])?;
        x = g.add_row_bias(x, temb)?;
        for block in &self.blocks {
            x = block.forward(g, store, x, Some(context), Mask::None)?;
        }
        let x = self.ln_out.forward(g, store, x)?;
        self.head.forward(g, store, x)
    }
}

impl NoisePredictor for Denoiser {
    fn predict(&self, g: &mut Graph, store: &ParamStore, t: usize, z_t: Var, cond: &Conditioning) -> Result<Var> {
        let x = self.condition_inputs(g, store, z_t, cond.img_lat, cond.r_vis, cond.r_txt)?;
        self.denoise(g, store, t, x, cond.context)
    }
}

/// One `(t, ε)` draw.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionDraw {
    pub t: usize,
    pub eps: Tensor,
}

impl DiffusionDraw {
    /// `t ~ U{1..T}`, `ε ~ N(0, I)`.
    pub fn sample(rng: &mut StreamRng, sched: &NoiseSchedule, shape: &[usize]) -> Self {
        let t = rng.random_range(1..=sched.steps());
        let n: usize = shape.iter().product();
        let eps = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        DiffusionDraw {
            t,
            eps: Tensor::new(shape, eps).expect("shape"),
        }
    }
}

/// `mean((ε − ε̂(t, z_t))²)` for a fixed draw.
pub fn diffusion_loss_with(
    g: &mut Graph,
    store: &ParamStore,
    model: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    z0: &Tensor,
    cond: &Conditioning,
    draw: &DiffusionDraw,
) -> Result<Var> {
    let zt = forward_noising(z0, draw.t, &draw.eps, sched)?;
    let zt = g.constant(zt);
    let pred = model.predict(g, store, draw.t, zt, cond)?;
    let eps = g.constant(draw.eps.clone());
    g.mse(pred, eps)
}

pub fn diffusion_loss(
    g: &mut Graph,
    store: &ParamStore,
    model: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    z0: &Tensor,
    cond: &Conditioning,
    rng: &mut StreamRng,
) -> Result<Var> {
    let draw = DiffusionDraw::sample(rng, sched, z0.shape());
    diffusion_loss_with(g, store, model, sched, z0, cond, &draw)
}

/// `L = L_MLLM + L_DM`; a non-finite term is an error.
pub fn total_loss(g: &mut Graph, l_mllm: Var, l_dm: Var, step: u64) -> Result<Var> {
    let (a, b) = (g.value(l_mllm).data()[0], g.value(l_dm).data()[0]);
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::NonFinite { step, l_mllm: a, l_dm: b });
    }
    g.add(l_mllm, l_dm)
}

/// Descending DDIM timesteps `T, …` of length `steps`.
pub fn ddim_timesteps(t_steps: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > t_steps {
        return Err(Error::Validation(format!("sampler steps {steps} outside [1, {t_steps}]")));
    }
    Ok((0..steps).map(|k| (steps - k) * t_steps / steps).collect())
}

/// Deterministic DDIM (η = 0) from a seeded `z_T`; returns the final `ẑ0`.
pub fn sample_latent(
    store: &ParamStore,
    model: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    g: &mut Graph,
    cond: &Conditioning,
    shape: &[usize],
    steps: usize,
    rng: &mut StreamRng,
) -> Result<Tensor> {
    let ts = ddim_timesteps(sched.steps(), steps)?;
    let n: usize = shape.iter().product();
    let mut z = Tensor::new(shape, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())?;
    for (k, &t) in ts.iter().enumerate() {
        let zv = g.constant(z.clone());
        let eps = model.predict(g, store, t, zv, cond)?;
        let eps = g.value(eps).clone();
        let ab = sched.alpha_bar(t);
        let z0 = z.zip(&eps, |zt, e| (zt - (1.0 - ab).sqrt() * e) / ab.sqrt())?;
        z = match ts.get(k + 1) {
            Some(&prev) => {
                let ap = sched.alpha_bar(prev);
                z0.zip(&eps, |x, e| ap.sqrt() * x + (1.0 - ap).sqrt() * e)?
            }
            None => z0,
        };
    }
    Ok(z)
}

/// Returns the noise that maps a known `z0` to `z_t`; a perfect predictor.
pub struct AnalyticNoise<'a> {
    pub z0: &'a Tensor,
    pub sched: &'a NoiseSchedule,
}

impl NoisePredictor for AnalyticNoise<'_> {
    fn predict(&self, g: &mut Graph, _: &ParamStore, t: usize, z_t: Var, _: &Conditioning) -> Result<Var> {
        let ab = self.sched.alpha_bar(t);
        let eps = g.value(z_t).zip(self.z0, |z, x| (z - ab.sqrt() * x) / (1.0 - ab).sqrt())?;
        Ok(g.constant(eps))
    }
}
