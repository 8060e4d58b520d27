//! Denoising diffusion: forward noising, the conditional denoising loss,
//! classifier-free guidance, deterministic reverse sampling, and a small
//! differentiable text-conditioned generator.

use std::collections::BTreeMap;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cdm::check_seen_only;
use crate::config::{GeneratorConfig, OptimizerConfig, NAME_PLACEHOLDER};
use crate::data::{ClassSpace, Image, LabeledImage};
use crate::error::{Error, Result};
use crate::nn::{stack_rows, Linear, LinearVars};
use crate::optim::AdamW;
use crate::prototypes::{normalize_class_name, TextEncoder, TokenId, ToyTextEncoder};
use crate::store::Artifact;
use crate::tape::{Matrix, Tape, Var};

/// Cumulative signal coefficients `ᾱ_t` for `t = 1..=T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas spaced linearly from `beta_start` to `beta_end`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("noise schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end) {
            return Err(Error::Config(format!("invalid beta range [{beta_start}, {beta_end}]")));
        }
        let mut prod = 1.0;
        let alpha_bar = (0..steps)
            .map(|i| {
                let frac = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
                prod *= 1.0 - (beta_start + frac * (beta_end - beta_start));
                prod
            })
            .collect();
        Self::from_alpha_bar(alpha_bar)
    }

    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.is_empty() {
            return Err(Error::Config("noise schedule is empty".into()));
        }
        if let Some(v) = alpha_bar.iter().find(|v| !(**v > 0.0 && **v <= 1.0)) {
            return Err(Error::Config(format!("alpha_bar value {v} outside (0, 1]")));
        }
        if alpha_bar.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config("alpha_bar must be strictly decreasing".into()));
        }
        Ok(NoiseSchedule { alpha_bar })
    }

    pub fn len(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha_bar.is_empty()
    }

    /// `ᾱ_t`, 1-based; `t = 0` is the clean endpoint with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        match t {
            0 => Ok(1.0),
            t if t <= self.len() => Ok(self.alpha_bar[t - 1]),
            t => Err(Error::structural(format!("timestep {t} outside 1..={}", self.len()))),
        }
    }

    fn checked_step(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Err(Error::structural(format!("timestep 0 outside 1..={}", self.len())));
        }
        self.alpha_bar(t)
    }

    /// Uniformly strided timesteps for `steps` reverse updates, descending
    /// from `T`.
    pub fn inference_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        if steps == 0 || steps > self.len() {
            return Err(Error::Config(format!("sampling steps must lie in 1..={}, got {steps}", self.len())));
        }
        let stride = self.len() / steps;
        Ok((0..steps).map(|i| self.len() - i * stride).collect())
    }
}

/// `√ᾱ · z0 + √(1−ᾱ) · eps` for an explicit `ᾱ ∈ [0, 1]`.
pub fn forward_noise_with(z0: &Matrix, alpha_bar: f64, eps: &Matrix) -> Result<Matrix> {
    if z0.raw_dim() != eps.raw_dim() {
        return Err(Error::structural(format!("noise shape {:?} differs from latent shape {:?}", eps.dim(), z0.dim())));
    }
    if !(0.0..=1.0).contains(&alpha_bar) {
        return Err(Error::structural(format!("alpha_bar {alpha_bar} outside [0, 1]")));
    }
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    Ok(z0 * a + eps * b)
}

/// Noisy latent at timestep `t` (1-based).
pub fn forward_noise(z0: &Matrix, t: usize, eps: &Matrix, schedule: &NoiseSchedule) -> Result<Matrix> {
    forward_noise_with(z0, schedule.checked_step(t)?, eps)
}

/// Noise predictor `ε_θ(z_t, t, c)`; `cond = None` is the empty-prompt branch.
pub trait Denoiser {
    fn latent_dim(&self) -> usize;
    fn cond_dim(&self) -> usize;
    /// One prediction per row of `zt`; `cond` has one row per row of `zt`.
    fn predict(&self, zt: &Matrix, t: usize, cond: Option<&Matrix>) -> Result<Matrix>;
}

fn check_batch(model: &dyn Denoiser, zt: &Matrix, cond: Option<&Matrix>) -> Result<()> {
    if zt.ncols() != model.latent_dim() {
        return Err(Error::structural(format!("latent width {} differs from model width {}", zt.ncols(), model.latent_dim())));
    }
    if let Some(c) = cond {
        if c.nrows() != zt.nrows() || c.ncols() != model.cond_dim() {
            return Err(Error::structural(format!(
                "conditioning shape {:?} does not match {} rows of width {}",
                c.dim(),
                zt.nrows(),
                model.cond_dim()
            )));
        }
    }
    Ok(())
}

/// Mean over rows of `‖eps − ε_θ(forward_noise(z0, t, eps), t, cond)‖²`.
pub fn denoising_loss(
    model: &dyn Denoiser,
    z0: &Matrix,
    cond: Option<&Matrix>,
    t: usize,
    eps: &Matrix,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    let zt = forward_noise(z0, t, eps, schedule)?;
    check_batch(model, &zt, cond)?;
    let pred = model.predict(&zt, t, cond)?;
    if pred.raw_dim() != eps.raw_dim() {
        return Err(Error::structural("prediction shape differs from noise shape"));
    }
    let diff = eps - &pred;
    Ok(diff.iter().map(|v| v * v).sum::<f64>() / z0.nrows() as f64)
}

/// `w · conditional + (1 − w) · unconditional`.
pub fn cfg_combine(conditional: &Matrix, unconditional: &Matrix, w: f64) -> Result<Matrix> {
    if conditional.raw_dim() != unconditional.raw_dim() {
        return Err(Error::structural("guidance branches have different shapes"));
    }
    Ok(conditional * w + unconditional * (1.0 - w))
}

/// Classifier-free guided noise estimate.
pub fn cfg_predict(model: &dyn Denoiser, zt: &Matrix, t: usize, cond: &Matrix, w: f64) -> Result<Matrix> {
    check_batch(model, zt, Some(cond))?;
    let c = model.predict(zt, t, Some(cond))?;
    let u = model.predict(zt, t, None)?;
    cfg_combine(&c, &u, w)
}

/// Clean-latent estimate `(z_t − √(1−ᾱ_t)·ε̂) / √ᾱ_t`, clipped to `[-1, 1]`.
pub fn clean_estimate(zt: &Matrix, eps: &Matrix, alpha_bar_t: f64) -> Matrix {
    let x0 = (zt - &(eps * (1.0 - alpha_bar_t).sqrt())) / alpha_bar_t.sqrt();
    x0.mapv(|v| v.clamp(-1.0, 1.0))
}

/// Coefficients `(a, b)` of the deterministic update
/// `z_prev = a·z_t + b·x̂0` given the clipped clean estimate `x̂0`.
pub fn ddim_coefficients(alpha_bar_t: f64, alpha_bar_prev: f64) -> (f64, f64) {
    let a = ((1.0 - alpha_bar_prev) / (1.0 - alpha_bar_t)).sqrt();
    let b = alpha_bar_prev.sqrt() - a * alpha_bar_t.sqrt();
    (a, b)
}

/// One deterministic reverse update from `t` to the timestep with `alpha_bar_prev`.
pub fn ddim_step(zt: &Matrix, eps: &Matrix, alpha_bar_t: f64, alpha_bar_prev: f64) -> Matrix {
    let x0 = clean_estimate(zt, eps, alpha_bar_t);
    let (a, b) = ddim_coefficients(alpha_bar_t, alpha_bar_prev);
    zt * a + x0 * b
}

/// [`ddim_step`] recorded on a tape.
pub fn ddim_step_on_tape(tape: &mut Tape, zt: Var, eps: Var, alpha_bar_t: f64, alpha_bar_prev: f64) -> Var {
    let raw = tape.axpby(zt, 1.0 / alpha_bar_t.sqrt(), eps, -((1.0 - alpha_bar_t) / alpha_bar_t).sqrt());
    let x0 = tape.clamp(raw, -1.0, 1.0);
    let (a, b) = ddim_coefficients(alpha_bar_t, alpha_bar_prev);
    tape.axpby(zt, a, x0, b)
}

/// Map a latent in `[-1, 1]` to pixel values in `[0, 1]`.
pub fn decode(z: &Matrix) -> Matrix {
    z.mapv(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0))
}

/// Inverse of [`decode`] on in-range values.
pub fn encode_image(pixels: &[f64]) -> Vec<f64> {
    pixels.iter().map(|v| 2.0 * v - 1.0).collect()
}

/// Standard-normal starting latent, one row per seed.
pub fn initial_noise(seeds: &[u64], dim: usize) -> Matrix {
    let mut m = Matrix::zeros((seeds.len(), dim));
    for (mut row, &seed) in m.rows_mut().into_iter().zip(seeds) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        row.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
    }
    m
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub latent: Matrix,
    pub images: Matrix,
}

fn check_finite(m: &Matrix, step: usize) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical { step, detail: "non-finite latent during reverse diffusion".into() })
    }
}

/// Deterministic guided reverse diffusion from a given starting latent.
pub fn sample_from_noise(
    model: &dyn Denoiser,
    cond: &Matrix,
    noise: &Matrix,
    steps: usize,
    w: f64,
    schedule: &NoiseSchedule,
) -> Result<Sample> {
    check_batch(model, noise, Some(cond))?;
    let ts = schedule.inference_timesteps(steps)?;
    let mut z = noise.clone();
    for (i, &t) in ts.iter().enumerate() {
        let prev = ts.get(i + 1).copied().unwrap_or(0);
        let eps = cfg_predict(model, &z, t, cond, w)?;
        z = ddim_step(&z, &eps, schedule.alpha_bar(t)?, schedule.alpha_bar(prev)?);
        check_finite(&z, i)?;
    }
    let images = decode(&z);
    Ok(Sample { latent: z, images })
}

/// [`sample_from_noise`] with the starting latent drawn from per-row seeds.
pub fn sample(model: &dyn Denoiser, cond: &Matrix, steps: usize, w: f64, seeds: &[u64], schedule: &NoiseSchedule) -> Result<Sample> {
    if seeds.len() != cond.nrows() {
        return Err(Error::structural("one seed per conditioning row is required"));
    }
    sample_from_noise(model, cond, &initial_noise(seeds, model.latent_dim()), steps, w, schedule)
}

pub const TIME_EMBEDDING_DIM: usize = 32;

/// Sinusoidal embedding of a timestep.
pub fn time_embedding(t: usize) -> Vec<f64> {
    let half = TIME_EMBEDDING_DIM / 2;
    let mut out = Vec::with_capacity(TIME_EMBEDDING_DIM);
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out.push((t as f64 * freq).sin());
    }
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out.push((t as f64 * freq).cos());
    }
    out
}

/// Small conditional denoiser.
///
/// The clean latent is estimated as the per-pixel linear (Wiener) denoiser
/// around a text-dependent mean `m` and variance `v`, plus an MLP residual:
/// `x̂0 = m + s(t)⊙(z_t − √ᾱ_t·m) + F(z_t, t, text)` with
/// `s = v√ᾱ / (ᾱv + 1 − ᾱ)`, `m = μ + c·W_m` and `v = σ²⊙exp(c·W_v)`, where
/// `c` is the squashed text conditioning and `μ`, `σ²` are the training-data
/// pixel statistics. The noise estimate is the posterior mean
/// `k(t)·(z_t − √ᾱ_t·x̂0)` under an isotropic error of variance
/// `residual_var` on `x̂0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyDenoiser {
    pub text: Linear,
    pub hidden: Linear,
    pub cond_in: Matrix,
    pub cond_out: Matrix,
    pub cond_var: Matrix,
    pub time_in: Matrix,
    pub out: Linear,
    pub residual_var: f64,
    /// Per-pixel mean and variance of the training latents.
    pub data_mean: Vec<f64>,
    pub data_var: Vec<f64>,
    pub schedule: NoiseSchedule,
}

/// Per-row schedule constants broadcast to the latent width.
struct RowCoefficients {
    alpha_bar: Matrix,
    sqrt_alpha_bar: Matrix,
    one_minus: Matrix,
    k: Matrix,
    k_sqrt_alpha_bar: Matrix,
}

/// Tape handles of the [`ToyDenoiser`] weights.
#[derive(Clone, Copy, Debug)]
pub struct DenoiserVars {
    pub text: LinearVars,
    pub hidden: LinearVars,
    pub cond_in: Var,
    pub cond_out: Var,
    pub cond_var: Var,
    pub time_in: Var,
    pub out: LinearVars,
}

impl DenoiserVars {
    pub fn all(&self) -> [Var; 10] {
        [
            self.text.weight,
            self.text.bias,
            self.hidden.weight,
            self.hidden.bias,
            self.cond_in,
            self.cond_out,
            self.cond_var,
            self.time_in,
            self.out.weight,
            self.out.bias,
        ]
    }
}

impl ToyDenoiser {
    pub fn new(latent_dim: usize, text_dim: usize, cfg: &GeneratorConfig, seed: u64) -> Result<Self> {
        let schedule = NoiseSchedule::linear(cfg.train_timesteps, cfg.beta_start, cfg.beta_end)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6465_6e6f);
        let h = cfg.hidden_dim;
        let cond_in = Linear::init(cfg.cond_dim, h, 1.0, &mut rng).weight;
        let time_in = Linear::init(TIME_EMBEDDING_DIM, h, 1.0, &mut rng).weight;
        Ok(ToyDenoiser {
            text: Linear::init(text_dim, cfg.cond_dim, 4.0, &mut rng),
            hidden: Linear::init(latent_dim, h, 1.0, &mut rng),
            cond_in,
            cond_out: Matrix::zeros((cfg.cond_dim, latent_dim)),
            cond_var: Matrix::zeros((cfg.cond_dim, latent_dim)),
            time_in,
            out: Linear::init(h, latent_dim, 0.5, &mut rng),
            residual_var: cfg.residual_var,
            data_mean: vec![0.0; latent_dim],
            data_var: vec![1.0; latent_dim],
            schedule,
        })
    }

    pub fn params(&self) -> Vec<&Matrix> {
        vec![
            &self.text.weight,
            &self.text.bias,
            &self.hidden.weight,
            &self.hidden.bias,
            &self.cond_in,
            &self.cond_out,
            &self.cond_var,
            &self.time_in,
            &self.out.weight,
            &self.out.bias,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        vec![
            &mut self.text.weight,
            &mut self.text.bias,
            &mut self.hidden.weight,
            &mut self.hidden.bias,
            &mut self.cond_in,
            &mut self.cond_out,
            &mut self.cond_var,
            &mut self.time_in,
            &mut self.out.weight,
            &mut self.out.bias,
        ]
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> DenoiserVars {
        let leaf = |tape: &mut Tape, m: &Matrix| if trainable { tape.param(m.clone()) } else { tape.constant(m.clone()) };
        DenoiserVars {
            text: self.text.bind(tape, trainable),
            hidden: self.hidden.bind(tape, trainable),
            cond_in: leaf(tape, &self.cond_in),
            cond_out: leaf(tape, &self.cond_out),
            cond_var: leaf(tape, &self.cond_var),
            time_in: leaf(tape, &self.time_in),
            out: self.out.bind(tape, trainable),
        }
    }

    fn row_coefficients(&self, ts: &[usize], rows: usize) -> Result<RowCoefficients> {
        let d = self.data_mean.len();
        let mut per_row = Vec::with_capacity(rows);
        for r in 0..rows {
            let t = if ts.len() == 1 { ts[0] } else { ts[r] };
            let ab = self.schedule.checked_step(t)?;
            let k = (1.0 - ab).sqrt() / (ab * self.residual_var + 1.0 - ab);
            per_row.push([ab, ab.sqrt(), 1.0 - ab, k, k * ab.sqrt()]);
        }
        let fill = |i: usize| Matrix::from_shape_fn((rows, d), |(r, _)| per_row[r][i]);
        Ok(RowCoefficients {
            alpha_bar: fill(0),
            sqrt_alpha_bar: fill(1),
            one_minus: fill(2),
            k: fill(3),
            k_sqrt_alpha_bar: fill(4),
        })
    }

    fn time_rows(ts: &[usize]) -> Matrix {
        let rows: Vec<Vec<f64>> = ts.iter().map(|&t| time_embedding(t)).collect();
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        stack_rows(&refs)
    }

    /// Record the noise prediction on `tape`. `ts` holds one timestep per row
    /// or a single timestep shared by all rows; `text` has one row per row of
    /// `zt`.
    pub fn forward_tape(&self, tape: &mut Tape, vars: &DenoiserVars, zt: Var, ts: &[usize], text: Var) -> Result<Var> {
        let rows = tape.value(zt).nrows();
        if ts.len() != 1 && ts.len() != rows {
            return Err(Error::structural("need one timestep per row or a single shared timestep"));
        }
        let c = Linear::forward(tape, vars.text, text);
        let c = tape.tanh(c);
        let hz = Linear::forward(tape, vars.hidden, zt);
        let hc = tape.matmul(c, vars.cond_in);
        let mut pre = tape.add(hz, hc);
        let temb = tape.constant(Self::time_rows(ts));
        let ht = tape.matmul(temb, vars.time_in);
        pre = if ts.len() == 1 { tape.add_row(pre, ht) } else { tape.add(pre, ht) };
        let h = tape.silu(pre);
        let residual = Linear::forward(tape, vars.out, h);
        let coef = self.row_coefficients(ts, rows)?;
        let [ab, sab, om, k, ksab] = [coef.alpha_bar, coef.sqrt_alpha_bar, coef.one_minus, coef.k, coef.k_sqrt_alpha_bar]
            .map(|m| tape.constant(m));
        let mean = tape.row(&self.data_mean);
        let shift = tape.matmul(c, vars.cond_out);
        let m = tape.add_row(shift, mean);
        let log_v = tape.matmul(c, vars.cond_var);
        let log_v = tape.clamp(log_v, -8.0, 8.0);
        let rel_v = tape.exp(log_v);
        let var = tape.constant(Matrix::from_shape_fn((rows, self.data_var.len()), |(_, p)| self.data_var[p]));
        let v = tape.mul(rel_v, var);
        let vab = tape.mul(v, ab);
        let den = tape.add(vab, om);
        let inv = tape.recip(den);
        let vsab = tape.mul(v, sab);
        let skip = tape.mul(vsab, inv);
        let sm = tape.mul(m, sab);
        let dz = tape.sub(zt, sm);
        let sdz = tape.mul(skip, dz);
        let x0 = tape.add(m, sdz);
        let x0 = tape.add(x0, residual);
        let kz = tape.mul(zt, k);
        let kx = tape.mul(x0, ksab);
        Ok(tape.sub(kz, kx))
    }

    fn predict_rows(&self, zt: &Matrix, t: usize, text: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let z = tape.constant(zt.clone());
        let c = tape.constant(text.clone());
        let out = self.forward_tape(&mut tape, &vars, z, &[t], c)?;
        Ok(tape.value(out).clone())
    }
}

impl Denoiser for ToyDenoiser {
    fn latent_dim(&self) -> usize {
        self.hidden.input_dim()
    }

    fn cond_dim(&self) -> usize {
        self.text.input_dim()
    }

    fn predict(&self, zt: &Matrix, t: usize, cond: Option<&Matrix>) -> Result<Matrix> {
        check_batch(self, zt, cond)?;
        match cond {
            Some(c) => self.predict_rows(zt, t, c),
            None => self.predict_rows(zt, t, &Matrix::zeros((zt.nrows(), self.cond_dim()))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleOptions {
    pub steps: usize,
    pub guidance: f64,
    /// Reverse steps recorded for differentiation, counted from the end;
    /// `None` records the whole chain.
    pub grad_depth: Option<usize>,
}

impl SampleOptions {
    pub fn from_config(cfg: &GeneratorConfig) -> Self {
        SampleOptions { steps: cfg.sampling_steps, guidance: cfg.guidance_scale, grad_depth: cfg.grad_depth }
    }
}

/// Images produced on a tape, differentiable with respect to injected tokens.
#[derive(Clone, Debug)]
pub struct TapeSample {
    pub images: Var,
    pub latent: Var,
    /// Timesteps whose reverse updates were recorded, in execution order.
    pub recorded_steps: Vec<usize>,
}

/// A text-to-image generator usable by the token optimization loop.
///
/// Prompts are token-id sequences over the adapter's text-encoder vocabulary.
/// Ids at or beyond `vocab_size()` are injected tokens whose embeddings the
/// caller supplies; this is the embedding-table injection point that new class
/// tokens are optimized through.
pub trait GeneratorAdapter: Sync {
    fn tag(&self) -> String;
    /// Whether [`GeneratorAdapter::sample_on_tape`] is available.
    fn differentiable(&self) -> bool;
    fn image_size(&self) -> (usize, usize);
    fn text_encoder(&self) -> &dyn TextEncoder;
    /// Conditioning vector for a prompt.
    fn encode_prompt(&self, tokens: &[TokenId], injected: &BTreeMap<TokenId, Vec<f64>>) -> Result<Vec<f64>>;
    /// Decoded images (one row per conditioning row) and final latents.
    fn sample(&self, cond: &Matrix, seeds: &[u64], opts: &SampleOptions) -> Result<Sample>;
    /// Sample with the computation recorded on `tape` so that gradients reach
    /// the injected token embeddings.
    fn sample_on_tape(
        &self,
        _tape: &mut Tape,
        _prompts: &[Vec<TokenId>],
        _injected: &BTreeMap<TokenId, Var>,
        _noise: &Matrix,
        _opts: &SampleOptions,
    ) -> Result<TapeSample> {
        Err(Error::Dependency(format!("generator {} does not support differentiable sampling", self.tag())))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub losses: Vec<f64>,
    pub cond_dropout: f64,
}

impl TrainingReport {
    /// Mean loss over the first and last `window` steps.
    pub fn loss_drop(&self, window: usize) -> Option<(f64, f64)> {
        let w = window.min(self.losses.len() / 2);
        if w == 0 {
            return None;
        }
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        Some((mean(&self.losses[..w]), mean(&self.losses[self.losses.len() - w..])))
    }
}

/// Text encoder plus [`ToyDenoiser`] over 32×32-style RGB images in pixel
/// space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyGenerator {
    pub encoder: ToyTextEncoder,
    pub denoiser: ToyDenoiser,
    pub width: usize,
    pub height: usize,
    pub report: TrainingReport,
}

impl Artifact for ToyGenerator {
    const KIND: &'static str = "toy-generator";

    fn dims(&self) -> Vec<usize> {
        vec![self.width, self.height, self.denoiser.latent_dim(), self.denoiser.cond_dim()]
    }
}

impl ToyGenerator {
    pub fn new(encoder: ToyTextEncoder, width: usize, height: usize, cfg: &GeneratorConfig, seed: u64) -> Result<Self> {
        let denoiser = ToyDenoiser::new(width * height * Image::CHANNELS, encoder.dim(), cfg, seed)?;
        Ok(ToyGenerator { encoder, denoiser, width, height, report: TrainingReport::default() })
    }

    /// Conditioning for a plain-text prompt.
    pub fn encode_text(&self, prompt: &str) -> Result<Vec<f64>> {
        self.encoder.encode(prompt)
    }

    pub fn images(&self, sample: &Sample) -> Result<Vec<Image>> {
        sample
            .images
            .rows()
            .into_iter()
            .map(|r| Image::from_flat(self.width, self.height, r.to_vec()))
            .collect()
    }

    fn embedding_row(&self, id: TokenId) -> Result<&[f64]> {
        self.encoder
            .embedding(id)
            .ok_or_else(|| Error::structural(format!("token id {id} is neither in the vocabulary nor injected")))
    }

    /// Conditioning rows on `tape` for a batch of prompts.
    pub fn encode_prompts_on_tape(&self, tape: &mut Tape, prompts: &[Vec<TokenId>], injected: &BTreeMap<TokenId, Var>) -> Result<Var> {
        let d_e = self.encoder.embedding_dim();
        let mut fixed = Matrix::zeros((prompts.len(), d_e));
        let mut coeff: BTreeMap<TokenId, Matrix> = BTreeMap::new();
        for (r, prompt) in prompts.iter().enumerate() {
            if prompt.is_empty() {
                continue;
            }
            let inv = 1.0 / prompt.len() as f64;
            for &id in prompt {
                if let Some(v) = injected.get(&id) {
                    if tape.value(*v).dim() != (1, d_e) {
                        return Err(Error::structural(format!("injected embedding for token {id} must be 1x{d_e}")));
                    }
                    coeff.entry(id).or_insert_with(|| Matrix::zeros((prompts.len(), 1)))[[r, 0]] += inv;
                } else {
                    let e = self.embedding_row(id)?;
                    for (dst, src) in fixed.row_mut(r).iter_mut().zip(e) {
                        *dst += inv * src;
                    }
                }
            }
        }
        let mut pooled = tape.constant(fixed);
        for (id, c) in coeff {
            let c = tape.constant(c);
            let contrib = tape.matmul(c, injected[&id]);
            pooled = tape.add(pooled, contrib);
        }
        let proj = tape.constant(self.encoder.projection().clone());
        Ok(tape.matmul(pooled, proj))
    }

    /// Differentiable sampling; with `trainable_params` every recorded step
    /// binds its own copy of the denoiser weights as tracked leaves, returned
    /// per step for gradient audits.
    pub fn sample_on_tape_audited(
        &self,
        tape: &mut Tape,
        prompts: &[Vec<TokenId>],
        injected: &BTreeMap<TokenId, Var>,
        noise: &Matrix,
        opts: &SampleOptions,
        trainable_params: bool,
    ) -> Result<(TapeSample, Vec<DenoiserVars>)> {
        if noise.nrows() != prompts.len() || noise.ncols() != self.denoiser.latent_dim() {
            return Err(Error::structural(format!(
                "noise shape {:?} does not match {} prompts of width {}",
                noise.dim(),
                prompts.len(),
                self.denoiser.latent_dim()
            )));
        }
        let schedule = &self.denoiser.schedule;
        let ts = schedule.inference_timesteps(opts.steps)?;
        let depth = opts.grad_depth.unwrap_or(ts.len()).min(ts.len());
        let first_recorded = ts.len() - depth;

        let text = self.encode_prompts_on_tape(tape, prompts, injected)?;
        let uncond_text = tape.constant(Matrix::zeros((prompts.len(), self.denoiser.cond_dim())));

        // Steps before the recorded window run off-tape on plain values.
        let mut z_plain = noise.clone();
        if first_recorded > 0 {
            let cond_value = tape.value(text).clone();
            for (i, &t) in ts[..first_recorded].iter().enumerate() {
                let prev = ts[i + 1];
                let eps = cfg_predict(&self.denoiser, &z_plain, t, &cond_value, opts.guidance)?;
                z_plain = ddim_step(&z_plain, &eps, schedule.alpha_bar(t)?, schedule.alpha_bar(prev)?);
                check_finite(&z_plain, i)?;
            }
        }

        let mut z = tape.constant(z_plain);
        let shared = if trainable_params { None } else { Some(self.denoiser.bind(tape, false)) };
        let mut per_step = Vec::new();
        let mut recorded = Vec::new();
        for (i, &t) in ts.iter().enumerate().skip(first_recorded) {
            let vars = match shared {
                Some(v) => v,
                None => {
                    let v = self.denoiser.bind(tape, true);
                    per_step.push(v);
                    v
                }
            };
            let prev = ts.get(i + 1).copied().unwrap_or(0);
            let ec = self.denoiser.forward_tape(tape, &vars, z, &[t], text)?;
            let eu = self.denoiser.forward_tape(tape, &vars, z, &[t], uncond_text)?;
            let eps = tape.axpby(ec, opts.guidance, eu, 1.0 - opts.guidance);
            z = ddim_step_on_tape(tape, z, eps, schedule.alpha_bar(t)?, schedule.alpha_bar(prev)?);
            check_finite(tape.value(z), i)?;
            recorded.push(t);
        }
        let shifted = {
            let half = tape.scale(z, 0.5);
            let ones = tape.row(&vec![0.5; self.denoiser.latent_dim()]);
            tape.add_row(half, ones)
        };
        let images = tape.clamp(shifted, 0.0, 1.0);
        Ok((TapeSample { images, latent: z, recorded_steps: recorded }, per_step))
    }
}

impl GeneratorAdapter for ToyGenerator {
    fn tag(&self) -> String {
        format!("toy-pixel-diffusion({}x{},T={})", self.width, self.height, self.denoiser.schedule.len())
    }

    fn differentiable(&self) -> bool {
        true
    }

    fn image_size(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    fn text_encoder(&self) -> &dyn TextEncoder {
        &self.encoder
    }

    fn encode_prompt(&self, tokens: &[TokenId], injected: &BTreeMap<TokenId, Vec<f64>>) -> Result<Vec<f64>> {
        let mut rows: Vec<&[f64]> = Vec::with_capacity(tokens.len());
        for &id in tokens {
            match injected.get(&id) {
                Some(e) => rows.push(e.as_slice()),
                None => rows.push(self.embedding_row(id)?),
            }
        }
        if let Some(r) = rows.iter().find(|r| r.len() != self.encoder.embedding_dim()) {
            return Err(Error::structural(format!("embedding of width {} in prompt", r.len())));
        }
        Ok(self.encoder.encode_embeddings(&rows))
    }

    fn sample(&self, cond: &Matrix, seeds: &[u64], opts: &SampleOptions) -> Result<Sample> {
        sample(&self.denoiser, cond, opts.steps, opts.guidance, seeds, &self.denoiser.schedule)
    }

    fn sample_on_tape(
        &self,
        tape: &mut Tape,
        prompts: &[Vec<TokenId>],
        injected: &BTreeMap<TokenId, Var>,
        noise: &Matrix,
        opts: &SampleOptions,
    ) -> Result<TapeSample> {
        self.sample_on_tape_audited(tape, prompts, injected, noise, opts, false).map(|(s, _)| s)
    }
}

/// Caption every training image with each configured template.
fn captions(images: &[LabeledImage], space: &ClassSpace, templates: &[String]) -> Result<Vec<Vec<String>>> {
    images
        .iter()
        .map(|s| {
            let name = space
                .name(&s.class_id)
                .ok_or_else(|| Error::structural(format!("unknown class {}", s.class_id)))?;
            Ok(templates.iter().map(|t| t.replace(NAME_PLACEHOLDER, &normalize_class_name(name))).collect())
        })
        .collect()
}

/// Data-dependent initialization of the text layer: centre the caption
/// vectors and rescale so that their spread reaches the conditioning
/// nonlinearity at unit scale. Caption vectors of a mean-pooled encoder differ
/// by a small fraction of their norm, which otherwise leaves the conditioning
/// path nearly untrained.
fn standardize_text_layer(den: &mut ToyDenoiser, captions: &[&Vec<f64>]) {
    if captions.len() < 2 {
        return;
    }
    let d = den.cond_dim();
    let mut mean = vec![0.0; d];
    for c in captions {
        for (m, v) in mean.iter_mut().zip(c.iter()) {
            *m += v / captions.len() as f64;
        }
    }
    let var = captions
        .iter()
        .map(|c| c.iter().zip(&mean).map(|(v, m)| (v - m).powi(2)).sum::<f64>())
        .sum::<f64>()
        / (captions.len() * d) as f64;
    if !(var > 0.0) {
        return;
    }
    // Current weights have per-entry std `gain / √d`; rescale to `1 / (σ √d)`.
    let current = (den.text.weight.iter().map(|w| w * w).sum::<f64>() / den.text.weight.len() as f64).sqrt();
    den.text.weight *= 1.0 / (current * var.sqrt() * (d as f64).sqrt());
    let m = stack_rows(&[&mean]);
    den.text.bias = -m.dot(&den.text.weight);
}

/// Fit a [`ToyGenerator`] to captioned seen-class images by minimizing the
/// denoising loss, replacing the prompt by the empty prompt with probability
/// `cfg.cond_dropout`.
pub fn train_toy_generator(
    images: &[LabeledImage],
    space: &ClassSpace,
    encoder: ToyTextEncoder,
    cfg: &GeneratorConfig,
    seed: u64,
) -> Result<ToyGenerator> {
    check_seen_only(images.iter().map(|s| &s.class_id), space, "generator training")?;
    let first = images.first().ok_or_else(|| Error::structural("generator training needs at least one image"))?;
    let (w, h) = (first.image.width, first.image.height);
    if let Some(bad) = images.iter().find(|s| s.image.width != w || s.image.height != h) {
        return Err(Error::structural(format!("image {} is not {w}x{h}", bad.image_id)));
    }
    if cfg.caption_templates.is_empty() {
        return Err(Error::Config("generator.caption_templates must not be empty".into()));
    }
    if cfg.cond_dropout == 0.0 {
        warn!("generator condition dropout is 0: the unconditional branch used by guidance is never trained");
    }
    let mut gen = ToyGenerator::new(encoder, w, h, cfg, seed)?;
    let caps = captions(images, space, &cfg.caption_templates)?;
    let mut cond_cache: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for c in caps.iter().flatten() {
        if !cond_cache.contains_key(c) {
            cond_cache.insert(c.clone(), gen.encoder.encode(c)?);
        }
    }
    standardize_text_layer(&mut gen.denoiser, &cond_cache.values().collect::<Vec<_>>());
    let latents: Vec<Vec<f64>> = images.iter().map(|s| encode_image(&s.image.data)).collect();
    let d = gen.denoiser.latent_dim();
    let d_t = gen.denoiser.cond_dim();
    let n = latents.len() as f64;
    let mut mean = vec![0.0; d];
    for l in &latents {
        for (m, v) in mean.iter_mut().zip(l) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; d];
    for l in &latents {
        for ((s, v), m) in var.iter_mut().zip(l).zip(&mean) {
            *s += (v - m).powi(2) / n;
        }
    }
    gen.denoiser.data_mean = mean;
    gen.denoiser.data_var = var.into_iter().map(|v| v.max(1e-4)).collect();
    let n_t = gen.denoiser.schedule.len();

    let opt_cfg = OptimizerConfig { lr: cfg.lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, batch_size: cfg.train_batch };
    let mut opt = AdamW::new(&opt_cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7472_6169_6e);
    let mut losses = Vec::with_capacity(cfg.train_steps);
    for step in 0..cfg.train_steps {
        let b = cfg.train_batch;
        let mut z0 = Matrix::zeros((b, d));
        let mut text = Matrix::zeros((b, d_t));
        let mut ts = Vec::with_capacity(b);
        for r in 0..b {
            let i = rng.random_range(0..images.len());
            z0.row_mut(r).assign(&ndarray::ArrayView1::from(latents[i].as_slice()));
            if rng.random::<f64>() >= cfg.cond_dropout {
                let cap = &caps[i][rng.random_range(0..caps[i].len())];
                text.row_mut(r).assign(&ndarray::ArrayView1::from(cond_cache[cap].as_slice()));
            }
            ts.push(rng.random_range(1..=n_t));
        }
        let eps = Matrix::from_shape_simple_fn((b, d), || rng.sample(StandardNormal));
        let mut zt = Matrix::zeros((b, d));
        for r in 0..b {
            let ab = gen.denoiser.schedule.alpha_bar(ts[r])?;
            let row = &z0.row(r) * ab.sqrt() + &eps.row(r) * (1.0 - ab).sqrt();
            zt.row_mut(r).assign(&row);
        }
        let mut tape = Tape::new();
        let zv = tape.constant(zt);
        let tv = tape.constant(text);
        let vars = gen.denoiser.bind(&mut tape, true);
        let pred = gen.denoiser.forward_tape(&mut tape, &vars, zv, &ts, tv)?;
        let ev = tape.constant(eps);
        let diff = tape.sub(ev, pred);
        let loss = tape.mean_row_squared_norm(diff);
        let lv = tape.scalar(loss);
        if !lv.is_finite() {
            return Err(Error::Numerical { step, detail: "non-finite generator training loss".into() });
        }
        losses.push(lv);
        let grads = tape.backward(loss);
        let g: Vec<Matrix> = vars
            .all()
            .iter()
            .zip(gen.denoiser.params())
            .map(|(v, p)| grads.get_or_zeros(*v, p))
            .collect();
        opt.step(&mut gen.denoiser.params_mut(), &g);
    }
    gen.report = TrainingReport { losses, cond_dropout: cfg.cond_dropout };
    Ok(gen)
}
