//! DDPM forward process and objective, the reverse posterior, and a DDIM
//! sampler over latent tensors, plus the small convolutional ε-network.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn;
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::rng::{normal_tensor, substream, StreamRng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
}

impl ScheduleKind {
    pub fn as_str(&self) -> &'static str {
        "linear"
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            other => Err(Error::InvalidSchedule(format!("unknown schedule {other:?}"))),
        }
    }
}

/// Per-step quantities; vectors are indexed by `t − 1` for `t ∈ 1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub posterior_var: Vec<f64>,
    /// Variance of the terminal `t = 1` sampling step; the sampler returns
    /// the clean estimate there.
    pub sigma1_sq: f64,
}

impl NoiseSchedule {
    /// Derives every other quantity from `β_1..β_T`, each in `(0, 1)`.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() || beta.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::InvalidSchedule("every beta must lie in (0, 1)".into()));
        }
        let steps = beta.len();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let posterior_var = (0..steps)
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
                (1.0 - prev) / (1.0 - alpha_bar[i]) * beta[i]
            })
            .collect();
        Ok(Self {
            steps,
            beta,
            alpha,
            alpha_bar,
            posterior_var,
            sigma1_sq: 0.0,
        })
    }

    fn check_t(&self, t: usize, lo: usize) -> Result<()> {
        if t < lo || t > self.steps {
            return Err(Error::TimestepOutOfRange { t, lo, hi: self.steps });
        }
        Ok(())
    }

    pub fn beta_at(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha_at(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar_at(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn posterior_var_at(&self, t: usize) -> f64 {
        self.posterior_var[t - 1]
    }
}

pub fn make_schedule(steps: usize, kind: ScheduleKind, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidSchedule("diffusion_steps must be >= 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidSchedule(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let beta: Vec<f64> = match kind {
        ScheduleKind::Linear if steps == 1 => vec![beta_start],
        ScheduleKind::Linear => (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect(),
    };
    NoiseSchedule::from_betas(beta)
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    ))
}

/// `z_t = √ᾱ_t z_0 + √(1−ᾱ_t) ε`.
pub fn forward_diffuse(z0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_t(t, 1)?;
    let ab = sched.alpha_bar_at(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    zip_map(z0, eps, |z, e| a * z + b * e)
}

/// `ẑ_0 = (z_t − √(1−ᾱ_t) ε̂) / √ᾱ_t`.
pub fn estimate_z0(zt: &Tensor, t: usize, eps_hat: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_t(t, 1)?;
    let ab = sched.alpha_bar_at(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    zip_map(zt, eps_hat, |z, e| (z - b * e) / a)
}

/// Coefficients `(c_0, c_t)` of `μ̃_t = c_0 ẑ_0 + c_t z_t`.
pub fn posterior_coefficients(t: usize, sched: &NoiseSchedule) -> Result<(f64, f64)> {
    sched.check_t(t, 2)?;
    let (ab, ab_prev) = (sched.alpha_bar_at(t), sched.alpha_bar_at(t - 1));
    let c0 = ab_prev.sqrt() * sched.beta_at(t) / (1.0 - ab);
    let ct = sched.alpha_at(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    Ok((c0, ct))
}

/// Mean and variance of `q(z_{t−1} | z_t, ẑ_0)`; defined for `t ≥ 2`.
pub fn ddpm_posterior_params(zt: &Tensor, zhat0: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<(Tensor, f64)> {
    let (c0, ct) = posterior_coefficients(t, sched)?;
    Ok((zip_map(zhat0, zt, |z0, z| c0 * z0 + ct * z)?, sched.posterior_var_at(t)))
}

/// Anything that predicts `ε` for a batch `z_t [B, …]` at per-element steps.
pub trait EpsModel {
    fn predict(&self, zt: &Tensor, t: &[usize]) -> Result<Tensor>;
}

impl<F: Fn(&Tensor, &[usize]) -> Tensor> EpsModel for F {
    fn predict(&self, zt: &Tensor, t: &[usize]) -> Result<Tensor> {
        Ok(self(zt, t))
    }
}

/// Schedule and ε-network settings.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub schedule: ScheduleKind,
    pub beta_start: f64,
    pub beta_end: f64,
    pub base_channels: usize,
    /// Channel multiplier per level; consecutive levels are joined by a
    /// stride-2 convolution.
    pub ch_mult: Vec<usize>,
    pub num_res_blocks: usize,
    pub time_dim: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            schedule: ScheduleKind::Linear,
            beta_start: 1e-4,
            beta_end: 2e-2,
            base_channels: 32,
            ch_mult: vec![1, 2],
            num_res_blocks: 2,
            time_dim: 32,
        }
    }
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.schedule, self.beta_start, self.beta_end)
    }

    pub fn validate(&self, latent: [usize; 3]) -> Result<()> {
        self.schedule()?;
        if self.ch_mult.is_empty() || self.ch_mult.contains(&0) {
            return Err(Error::InvalidConfig("diffusion ch_mult needs positive entries".into()));
        }
        if self.base_channels == 0 || self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::InvalidConfig(
                "diffusion base_channels >= 1 and even time_dim required".into(),
            ));
        }
        let f = 1 << (self.ch_mult.len() - 1);
        if !latent[1].is_multiple_of(f) || !latent[2].is_multiple_of(f) {
            return Err(Error::InvalidConfig(format!(
                "latent {}x{} not divisible by the denoiser's downsample factor {f}",
                latent[1], latent[2]
            )));
        }
        Ok(())
    }
}

/// Sinusoidal embedding of integer steps, `[B, dim]`.
pub fn timestep_embedding(t: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = Vec::with_capacity(t.len() * dim);
    for &step in t {
        let s = step as f64;
        let freqs = (0..half).map(|i| (-(10_000f64.ln()) * i as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|f| s * f).collect();
        out.extend(args.iter().map(|a| a.sin()));
        out.extend(args.iter().map(|a| a.cos()));
    }
    Tensor::new(vec![t.len(), dim], out)
}

pub fn init_denoiser(store: &mut ParamStore, rng: &mut impl Rng, cfg: &DiffusionConfig, latent: [usize; 3]) {
    let td = cfg.time_dim;
    nn::init_linear(store, rng, "eps.time.fc1", td, td);
    nn::init_linear(store, rng, "eps.time.fc2", td, td);
    let chans: Vec<usize> = cfg.ch_mult.iter().map(|m| cfg.base_channels * m).collect();
    nn::init_conv(store, rng, "eps.conv_in", latent[0], chans[0], 3);
    let mut ch = chans[0];
    for (level, &c) in chans.iter().enumerate() {
        for b in 0..cfg.num_res_blocks {
            nn::init_res_block(store, rng, &format!("eps.level{level}.block{b}"), ch, c, td);
            ch = c;
        }
        if level + 1 < chans.len() {
            nn::init_conv(store, rng, &format!("eps.down{level}"), c, c, 3);
        }
    }
    for level in (0..chans.len() - 1).rev() {
        nn::init_conv(store, rng, &format!("eps.up{level}"), ch, chans[level], 1);
        ch = chans[level];
        for b in 0..cfg.num_res_blocks {
            nn::init_res_block(store, rng, &format!("eps.out{level}.block{b}"), ch, ch, td);
        }
    }
    nn::init_conv(store, rng, "eps.conv_out", ch, latent[0], 3);
}

/// `ε_θ(z_t, t)` for `z_t [B, C, H, W]`: a small U-shaped stack whose
/// skips are added, not concatenated.
pub fn denoiser_graph(g: &mut Graph, store: &ParamStore, cfg: &DiffusionConfig, zt: Var, t: &[usize]) -> Var {
    let emb = g.constant(timestep_embedding(t, cfg.time_dim));
    let e = nn::linear(g, store, "eps.time.fc1", emb);
    let e = g.silu(e);
    let emb = nn::linear(g, store, "eps.time.fc2", e);

    let levels = cfg.ch_mult.len();
    let mut skips = Vec::with_capacity(levels);
    let mut h = nn::conv(g, store, "eps.conv_in", zt, 1);
    for level in 0..levels {
        for b in 0..cfg.num_res_blocks {
            h = nn::res_block(g, store, &format!("eps.level{level}.block{b}"), h, Some(emb));
        }
        if level + 1 < levels {
            skips.push(h);
            h = nn::conv(g, store, &format!("eps.down{level}"), h, 2);
        }
    }
    for level in (0..levels - 1).rev() {
        let u = g.upsample2x(h);
        let u = nn::conv(g, store, &format!("eps.up{level}"), u, 1);
        h = g.add(skips[level], u);
        for b in 0..cfg.num_res_blocks {
            h = nn::res_block(g, store, &format!("eps.out{level}.block{b}"), h, Some(emb));
        }
    }
    let h = g.silu(h);
    nn::conv(g, store, "eps.conv_out", h, 1)
}

/// The trained ε-network as an [`EpsModel`].
pub struct Denoiser<'a> {
    pub store: &'a ParamStore,
    pub cfg: &'a DiffusionConfig,
}

impl EpsModel for Denoiser<'_> {
    fn predict(&self, zt: &Tensor, t: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let z = g.constant(zt.clone());
        let out = denoiser_graph(&mut g, self.store, self.cfg, z, t);
        Ok(g.value(out).clone())
    }
}

/// Draws `t ~ U{1..T}` and `ε ~ N(0, I)` for a batch `z0 [B, …]`.
pub fn draw_noising(z0: &Tensor, sched: &NoiseSchedule, rng: &mut impl Rng) -> (Vec<usize>, Tensor) {
    let b = z0.shape()[0];
    let t = (0..b).map(|_| rng.random_range(1..=sched.steps)).collect();
    (t, normal_tensor(rng, z0.shape()))
}

/// Noised batch for the given per-element steps.
pub fn diffuse_batch(z0: &Tensor, t: &[usize], eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    let b = z0.shape()[0];
    let per = z0.numel() / b.max(1);
    let mut out = Vec::with_capacity(z0.numel());
    for (i, &ti) in t.iter().enumerate() {
        let slice = |x: &Tensor| Tensor::new(vec![per], x.data()[i * per..(i + 1) * per].to_vec());
        out.extend(forward_diffuse(&slice(z0), ti, &slice(eps), sched)?.into_data());
    }
    Ok(Tensor::new(z0.shape().to_vec(), out))
}

/// `mean ‖ε − ε_θ(z_t, t)‖²` per element with λ(t) = 1.
pub fn ddpm_loss(z0: &Tensor, model: &dyn EpsModel, sched: &NoiseSchedule, rng: &mut impl Rng) -> Result<f64> {
    let (t, eps) = draw_noising(z0, sched, rng);
    let zt = diffuse_batch(z0, &t, &eps, sched)?;
    let pred = model.predict(&zt, &t)?;
    Ok(zip_map(&eps, &pred, |a, b| (a - b).powi(2))?.mean())
}

/// Differentiable form of [`ddpm_loss`] through the ε-network.
pub fn ddpm_loss_graph(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &DiffusionConfig,
    sched: &NoiseSchedule,
    z0: &Tensor,
    rng: &mut impl Rng,
) -> Result<Var> {
    let (t, eps) = draw_noising(z0, sched, rng);
    let zt = g.constant(diffuse_batch(z0, &t, &eps, sched)?);
    let pred = denoiser_graph(g, store, cfg, zt, &t);
    let eps = g.constant(eps);
    let r = g.sub(eps, pred);
    let sq = g.square(r);
    Ok(g.mean(sq))
}

/// Trains `eps.*` with Adam on batches produced by `next_batch`; returns
/// the per-step loss trace.
pub fn train_denoiser(
    store: &mut ParamStore,
    cfg: &DiffusionConfig,
    adam: AdamConfig,
    iterations: usize,
    rng: &mut StreamRng,
    mut next_batch: impl FnMut(&mut StreamRng) -> Result<Tensor>,
) -> Result<Vec<f64>> {
    let sched = cfg.schedule()?;
    let mut opt = Adam::new(adam);
    let mut trace = Vec::with_capacity(iterations);
    for step in 0..iterations {
        let z0 = next_batch(rng)?;
        let mut g = Graph::new();
        let loss = ddpm_loss_graph(&mut g, store, cfg, &sched, &z0, rng)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Diverged { step, loss: value });
        }
        g.backward(loss);
        opt.step(store, &g.param_grads());
        trace.push(value);
    }
    Ok(trace)
}

/// Timesteps visited by the sampler, ascending: `num_steps` values spread
/// uniformly over `[1, T]`, always containing 1 (and `T` when
/// `num_steps ≥ 2`).
pub fn ddim_timesteps(steps: usize, num_steps: usize) -> Result<Vec<usize>> {
    if num_steps == 0 || num_steps > steps {
        return Err(Error::InvalidSampler(format!(
            "steps must be in 1..={steps}, got {num_steps}"
        )));
    }
    if num_steps == 1 {
        return Ok(vec![1]);
    }
    Ok((0..num_steps)
        .map(|i| 1 + ((i * (steps - 1)) as f64 / (num_steps - 1) as f64).round() as usize)
        .collect())
}

/// DDIM sampling of a batch with the given shape (leading axis = batch).
/// `η = 0` is deterministic given the seed; `η = 1` with `num_steps = T`
/// is ancestral DDPM sampling. The final step returns `ẑ_0`.
pub fn ddim_sample(
    model: &dyn EpsModel,
    sched: &NoiseSchedule,
    num_steps: usize,
    eta: f64,
    seed: u64,
    shape: &[usize],
) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::InvalidSampler(format!("eta must be in [0, 1], got {eta}")));
    }
    let ladder = ddim_timesteps(sched.steps, num_steps)?;
    let mut rng = substream(seed, "sample");
    let mut z = normal_tensor(&mut rng, shape);
    let batch = shape.first().copied().unwrap_or(1);
    for i in (0..ladder.len()).rev() {
        let t = ladder[i];
        let eps = model.predict(&z, &vec![t; batch])?;
        let zhat = estimate_z0(&z, t, &eps, sched)?;
        if i == 0 {
            return Ok(zhat);
        }
        let prev = ladder[i - 1];
        let (ab, ab_prev) = (sched.alpha_bar_at(t), sched.alpha_bar_at(prev));
        let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev)).sqrt();
        let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
        let mut next = zip_map(&zhat, &eps, |x0, e| ab_prev.sqrt() * x0 + dir * e)?;
        if sigma > 0.0 {
            next.add_assign(&normal_tensor(&mut rng, shape).map(|v| sigma * v));
        }
        z = next;
    }
    unreachable!("ladder is never empty")
}
