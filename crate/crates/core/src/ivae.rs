//! Convolutional Gaussian encoder, reparameterised sampling and the
//! β-weighted ELBO whose decoder is the hyper-transformer + INR.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::hyperdecoder::{generate_inr_graph, HdConfig};
use crate::inr::{encode_coords, inr_forward_graph, likelihood_constant, likelihood_logprob_graph, InrConfig};
use crate::nn;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::tensorio::Signal;

pub const LOGVAR_MIN: f64 = -30.0;
pub const LOGVAR_MAX: f64 = 20.0;

/// Name of the Fourier projection inside a parameter store. It is a
/// constant of the model, never trained.
pub const FOURIER_NAME: &str = "inr.fourier.B";

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub resolution: [usize; 2],
    pub in_channels: usize,
    pub latent_channels: usize,
    pub base_channels: usize,
    /// One entry per resolution level; a stride-2 convolution sits between
    /// consecutive levels.
    pub ch_mult: Vec<usize>,
    /// Residual blocks per level.
    pub num_blocks: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            resolution: [16, 16],
            in_channels: 1,
            latent_channels: 4,
            base_channels: 16,
            ch_mult: vec![1, 2, 2],
            num_blocks: 1,
        }
    }
}

impl EncoderConfig {
    pub fn downsample_factor(&self) -> usize {
        1 << self.ch_mult.len().saturating_sub(1)
    }

    /// `[d_z, H_z, W_z]`.
    pub fn latent_shape(&self) -> [usize; 3] {
        let f = self.downsample_factor();
        [self.latent_channels, self.resolution[0] / f, self.resolution[1] / f]
    }

    pub fn latent_numel(&self) -> usize {
        self.latent_shape().iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.ch_mult.is_empty() || self.ch_mult.contains(&0) {
            return Err(Error::InvalidConfig("ch_mult needs at least one positive entry".into()));
        }
        if self.base_channels == 0 || self.in_channels == 0 || self.latent_channels == 0 {
            return Err(Error::InvalidConfig("encoder channel counts must be >= 1".into()));
        }
        let f = self.downsample_factor();
        if self.resolution.iter().any(|&r| r == 0 || r % f != 0) {
            return Err(Error::InvalidConfig(format!(
                "resolution {:?} not divisible by downsample factor {f}",
                self.resolution
            )));
        }
        Ok(())
    }

    /// The encoder's latent must be exactly what the decoder tokenizes.
    pub fn check_compatible(&self, hd: &HdConfig, inr: &InrConfig) -> Result<()> {
        self.validate()?;
        inr.validate()?;
        hd.validate(inr)?;
        if self.latent_shape() != hd.latent_shape() {
            return Err(Error::InvalidConfig(format!(
                "encoder latent {:?} differs from decoder latent {:?}",
                self.latent_shape(),
                hd.latent_shape()
            )));
        }
        if self.in_channels != inr.out_dim {
            return Err(Error::InvalidConfig(format!(
                "encoder reads {} channels but the INR emits {}",
                self.in_channels, inr.out_dim
            )));
        }
        if inr.in_dim != 2 {
            return Err(Error::InvalidConfig("image pipelines need a 2-D coordinate INR".into()));
        }
        Ok(())
    }
}

pub fn init_encoder(store: &mut ParamStore, rng: &mut impl Rng, cfg: &EncoderConfig) {
    let mut ch = cfg.base_channels * cfg.ch_mult[0];
    nn::init_conv(store, rng, "enc.conv_in", cfg.in_channels, ch, 3);
    for (level, &m) in cfg.ch_mult.iter().enumerate() {
        let out = cfg.base_channels * m;
        for b in 0..cfg.num_blocks {
            nn::init_res_block(store, rng, &format!("enc.level{level}.block{b}"), ch, out, 0);
            ch = out;
        }
        if level + 1 < cfg.ch_mult.len() {
            nn::init_conv(store, rng, &format!("enc.level{level}.down"), ch, ch, 3);
        }
    }
    nn::init_conv(store, rng, "enc.head", ch, 2 * cfg.latent_channels, 1);
}

/// Maps `[B, C, H, W]` images to raw head output `[B, 2·d_z·H_z·W_z]`,
/// mean entries first, then log-variances.
pub fn encoder_graph(g: &mut Graph, store: &ParamStore, cfg: &EncoderConfig, x: Var) -> Var {
    let batch = g.shape(x)[0];
    let mut h = nn::conv(g, store, "enc.conv_in", x, 1);
    for level in 0..cfg.ch_mult.len() {
        for b in 0..cfg.num_blocks {
            h = nn::res_block(g, store, &format!("enc.level{level}.block{b}"), h, None);
        }
        if level + 1 < cfg.ch_mult.len() {
            h = nn::conv(g, store, &format!("enc.level{level}.down"), h, 2);
        }
    }
    if cfg.num_blocks > 0 || cfg.ch_mult.len() > 1 {
        h = g.silu(h);
    }
    let h = nn::conv(g, store, "enc.head", h, 1);
    g.reshape(h, &[batch, 2 * cfg.latent_numel()])
}

/// Stacks signal features `(D × C)` into an NCHW image batch.
pub fn signals_to_images(cfg: &EncoderConfig, signals: &[&Signal]) -> Result<Tensor> {
    let [h, w] = cfg.resolution;
    let c = cfg.in_channels;
    let mut data = Vec::with_capacity(signals.len() * c * h * w);
    for s in signals {
        if s.resolution != cfg.resolution || s.features.shape()[1] != c {
            return Err(Error::ResolutionMismatch {
                expected: vec![h, w, c],
                found: [s.resolution.as_slice(), &[s.features.shape()[1]]].concat(),
            });
        }
        data.extend(s.features.transpose().into_data());
    }
    Ok(Tensor::new(vec![signals.len(), c, h, w], data))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPosterior {
    pub mean: Tensor,
    pub logvar: Tensor,
}

/// Posterior graph nodes: `mean` and clamped `logvar`, both `[B, |z|]`.
pub struct PosteriorVars {
    pub mean: Var,
    pub logvar: Var,
}

pub fn posterior_graph(g: &mut Graph, store: &ParamStore, cfg: &EncoderConfig, images: Var) -> PosteriorVars {
    let n = cfg.latent_numel();
    let raw = encoder_graph(g, store, cfg, images);
    let mean = g.slice_cols(raw, 0, n);
    let lv = g.slice_cols(raw, n, n);
    let logvar = g.clamp(lv, LOGVAR_MIN, LOGVAR_MAX);
    PosteriorVars { mean, logvar }
}

/// `q_ψ(z | X, Y)` for one signal; tensors shaped `[d_z, H_z, W_z]`.
pub fn encode(signal: &Signal, store: &ParamStore, cfg: &EncoderConfig) -> Result<GaussianPosterior> {
    Ok(encode_batch(&[signal], store, cfg)?.pop().unwrap())
}

pub fn encode_batch(signals: &[&Signal], store: &ParamStore, cfg: &EncoderConfig) -> Result<Vec<GaussianPosterior>> {
    let images = signals_to_images(cfg, signals)?;
    let mut g = Graph::new();
    let x = g.constant(images);
    let post = posterior_graph(&mut g, store, cfg, x);
    let shape = cfg.latent_shape();
    let n = cfg.latent_numel();
    let (m, lv) = (g.value(post.mean), g.value(post.logvar));
    Ok((0..signals.len())
        .map(|i| GaussianPosterior {
            mean: Tensor::new(shape.to_vec(), m.data()[i * n..(i + 1) * n].to_vec()),
            logvar: Tensor::new(shape.to_vec(), lv.data()[i * n..(i + 1) * n].to_vec()),
        })
        .collect())
}

/// `z = μ + exp(½·logvar) ⊙ noise`, logvar clamped to the safe range.
pub fn sample_posterior(post: &GaussianPosterior, noise: &Tensor) -> Result<Tensor> {
    if noise.shape() != post.mean.shape() {
        return Err(Error::ShapeMismatch(format!(
            "noise {:?} vs mean {:?}",
            noise.shape(),
            post.mean.shape()
        )));
    }
    let data = post
        .mean
        .data()
        .iter()
        .zip(post.logvar.data())
        .zip(noise.data())
        .map(|((m, lv), e)| m + (0.5 * lv.clamp(LOGVAR_MIN, LOGVAR_MAX)).exp() * e)
        .collect();
    Ok(Tensor::new(post.mean.shape().to_vec(), data))
}

/// `KL(N(μ, σ²) ‖ N(0, I))` summed over every latent entry.
pub fn kl_standard_normal(post: &GaussianPosterior) -> f64 {
    post.mean
        .data()
        .iter()
        .zip(post.logvar.data())
        .map(|(m, lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum()
}

fn kl_graph(g: &mut Graph, mean: Var, logvar: Var) -> Var {
    let m2 = g.square(mean);
    let v = g.exp(logvar);
    let a = g.add(m2, v);
    let a = g.sub(a, logvar);
    let a = g.offset(a, -1.0);
    let s = g.sum(a);
    g.scale(s, 0.5)
}

/// Optional extra reconstruction loss `(prediction, target) -> scalar`,
/// added to the minimised objective. Absent by default.
pub type ExtraLoss = dyn Fn(&mut Graph, Var, Var) -> Var;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboReport {
    pub recon_logprob: f64,
    pub kl: f64,
    pub beta: f64,
    pub total: f64,
}

/// The graph pieces of a batched ELBO evaluation.
pub struct ElboGraph {
    /// Quantity minimised by training: batch mean of
    /// `−(recon + D·ln(σ√2π)) + β·KL` plus any extra loss. The likelihood
    /// constant is dropped so that the loss reaches zero at a perfect fit.
    pub loss: Var,
    /// Per-element recon log-probabilities and KL terms (full constants).
    pub recon: Vec<Var>,
    pub kl: Vec<Var>,
    pub posterior: PosteriorVars,
}

/// Everything needed to evaluate the decoder side of the model.
pub struct Model<'a> {
    pub enc: &'a EncoderConfig,
    pub hd: &'a HdConfig,
    pub inr: &'a InrConfig,
}

/// Encoded INR inputs for a resolution; shared by every element.
pub fn inr_inputs(store: &ParamStore, inr: &InrConfig, coords: &Tensor) -> Result<Tensor> {
    encode_coords(inr, coords, store.get(FOURIER_NAME))
}

/// Decodes latents `z [B, |z|]` and scores them against `targets`.
/// Returns per-element log-likelihood nodes and the prediction nodes.
pub fn decode_and_score(
    g: &mut Graph,
    store: &ParamStore,
    model: &Model,
    z: Var,
    h0: Var,
    targets: &[Tensor],
) -> Result<(Vec<Var>, Vec<Var>)> {
    let mut recon = Vec::with_capacity(targets.len());
    let mut preds = Vec::with_capacity(targets.len());
    for (i, y) in targets.iter().enumerate() {
        let zi = g.slice_rows(z, i, 1);
        let zi = g.reshape(zi, &model.hd.latent_shape());
        let gen = generate_inr_graph(g, store, model.hd, model.inr, zi)?;
        let pred = inr_forward_graph(g, model.inr, &gen.weights, &gen.biases, h0);
        let y = g.constant(y.clone());
        recon.push(likelihood_logprob_graph(g, pred, y, model.inr.likelihood));
        preds.push(pred);
    }
    Ok((recon, preds))
}

/// Single-sample ELBO over a batch; `noise` is `[B, |z|]`.
pub fn elbo_graph(
    g: &mut Graph,
    store: &ParamStore,
    model: &Model,
    signals: &[&Signal],
    noise: &Tensor,
    beta: f64,
    extra: Option<&ExtraLoss>,
) -> Result<ElboGraph> {
    if beta < 0.0 {
        return Err(Error::InvalidConfig("kl_weight must be >= 0".into()));
    }
    let b = signals.len();
    let n = model.enc.latent_numel();
    if noise.shape() != [b, n] {
        return Err(Error::ShapeMismatch(format!(
            "noise {:?}, expected [{b}, {n}]",
            noise.shape()
        )));
    }
    let images = g.constant(signals_to_images(model.enc, signals)?);
    let post = posterior_graph(g, store, model.enc, images);
    let eps = g.constant(noise.clone());
    let half = g.scale(post.logvar, 0.5);
    let std = g.exp(half);
    let scaled = g.mul(std, eps);
    let z = g.add(post.mean, scaled);

    let h0 = g.constant(inr_inputs(store, model.inr, &signals[0].coords)?);
    let targets: Vec<Tensor> = signals.iter().map(|s| s.features.clone()).collect();
    let (recon, preds) = decode_and_score(g, store, model, z, h0, &targets)?;
    let constant = likelihood_constant(targets[0].numel(), model.inr.likelihood);

    let mut kl = Vec::with_capacity(b);
    let mut terms = Vec::with_capacity(b);
    for i in 0..b {
        let m = g.slice_rows(post.mean, i, 1);
        let lv = g.slice_rows(post.logvar, i, 1);
        let k = kl_graph(g, m, lv);
        kl.push(k);
        let nll = g.scale(recon[i], -1.0);
        let nll = g.offset(nll, -constant);
        let bk = g.scale(k, beta);
        let mut t = g.add(nll, bk);
        if let Some(f) = extra {
            let y = g.constant(targets[i].clone());
            let e = f(g, preds[i], y);
            t = g.add(t, e);
        }
        terms.push(g.reshape(t, &[1, 1]));
    }
    let all = g.concat_rows(&terms);
    let loss = g.mean(all);
    Ok(ElboGraph {
        loss,
        recon,
        kl,
        posterior: post,
    })
}

/// `E_q[log p_Φ(Y|X)] − β·KL` for one signal, single-sample estimate.
pub fn elbo(signal: &Signal, store: &ParamStore, model: &Model, beta: f64, noise: &Tensor) -> Result<ElboReport> {
    let mut g = Graph::new();
    let noise = noise.clone().reshaped(&[1, noise.numel()]);
    let eg = elbo_graph(&mut g, store, model, &[signal], &noise, beta, None)?;
    let recon_logprob = g.value(eg.recon[0]).item();
    let kl = g.value(eg.kl[0]).item();
    Ok(ElboReport {
        recon_logprob,
        kl,
        beta,
        total: recon_logprob - beta * kl,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hyperdecoder::init_hd;
    use crate::rng::{normal_tensor, substream};
    use crate::tensorio::make_synthetic_dataset;
    use rand_distr::{Distribution, StandardNormal};

    fn toy() -> (EncoderConfig, HdConfig, InrConfig, ParamStore) {
        let enc = EncoderConfig {
            resolution: [4, 4],
            in_channels: 1,
            latent_channels: 2,
            base_channels: 4,
            ch_mult: vec![1],
            num_blocks: 1,
        };
        let inr = InrConfig {
            layers: 2,
            hidden_dim: 8,
            ..Default::default()
        };
        let hd = HdConfig {
            latent_channels: 2,
            latent_h: 4,
            latent_w: 4,
            patch_size: 2,
            token_dim: 8,
            encoder_layers: 1,
            decoder_layers: 1,
            heads: 2,
            head_dim: 4,
            feedforward_dim: 16,
            groups: 2,
            ..Default::default()
        };
        let mut store = ParamStore::new();
        let mut rng = substream(3, "init");
        init_encoder(&mut store, &mut rng, &enc);
        init_hd(&mut store, &mut rng, &hd, &inr);
        (enc, hd, inr, store)
    }

    #[test]
    fn latent_shapes_follow_downsampling() {
        let enc = EncoderConfig {
            resolution: [64, 64],
            in_channels: 3,
            latent_channels: 3,
            ch_mult: vec![1, 2, 4],
            ..Default::default()
        };
        assert_eq!(enc.latent_shape(), [3, 16, 16]);
        assert_eq!(enc.latent_numel(), 768);
        let bad = EncoderConfig {
            resolution: [6, 6],
            ch_mult: vec![1, 1, 1],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn encode_is_deterministic_and_checks_resolution() {
        let (enc, hd, inr, store) = toy();
        enc.check_compatible(&hd, &inr).unwrap();
        let data = make_synthetic_dataset("gaussians", 2, [4, 4], 1).unwrap();
        let a = encode(&data.items[0], &store, &enc).unwrap();
        let b = encode(&data.items[0], &store, &enc).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.mean.shape(), [2, 4, 4]);
        assert!(a.mean.all_finite() && a.logvar.all_finite());
        let big = make_synthetic_dataset("gaussians", 1, [8, 8], 1).unwrap();
        assert!(matches!(
            encode(&big.items[0], &store, &enc),
            Err(Error::ResolutionMismatch { .. })
        ));
    }

    #[test]
    fn batch_encoding_matches_single() {
        let (enc, _, _, store) = toy();
        let data = make_synthetic_dataset("stripes", 3, [4, 4], 2).unwrap();
        let refs: Vec<&Signal> = data.items.iter().collect();
        let batch = encode_batch(&refs, &store, &enc).unwrap();
        for (s, p) in data.items.iter().zip(&batch) {
            let single = encode(s, &store, &enc).unwrap();
            assert!(single.mean.max_abs_diff(&p.mean) < 1e-12);
        }
    }

    #[test]
    fn reparameterisation_edge_cases() {
        let mean = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]);
        let noise = Tensor::new(vec![3], vec![1.0, -2.0, 0.3]);
        let tight = GaussianPosterior {
            mean: mean.clone(),
            logvar: Tensor::full(&[3], -60.0),
        };
        assert!(sample_posterior(&tight, &noise).unwrap().max_abs_diff(&mean) < 1e-6);
        let post = GaussianPosterior {
            mean: mean.clone(),
            logvar: Tensor::zeros(&[3]),
        };
        assert_eq!(sample_posterior(&post, &Tensor::zeros(&[3])).unwrap(), mean);
        let std = GaussianPosterior {
            mean: Tensor::zeros(&[3]),
            logvar: Tensor::zeros(&[3]),
        };
        assert_eq!(sample_posterior(&std, &noise).unwrap(), noise);
        assert!(sample_posterior(&std, &Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn reparameterisation_moments() {
        let post = GaussianPosterior {
            mean: Tensor::scalar(1.5).reshaped(&[1]),
            logvar: Tensor::new(vec![1], vec![-0.7]),
        };
        let mut rng = substream(11, "reparam");
        let n = 100_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| sample_posterior(&post, &normal_tensor(&mut rng, &[1])).unwrap().item())
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let true_var = (-0.7f64).exp();
        assert!((mean - 1.5).abs() < 3.0 * (true_var / n as f64).sqrt());
        // var of the sample variance for a Gaussian is 2σ⁴/(n−1)
        assert!((var - true_var).abs() < 3.0 * (2.0 * true_var * true_var / (n - 1) as f64).sqrt());
    }

    #[test]
    fn kl_closed_form_cases() {
        let zero = GaussianPosterior {
            mean: Tensor::zeros(&[4]),
            logvar: Tensor::zeros(&[4]),
        };
        assert_eq!(kl_standard_normal(&zero), 0.0);
        let one = GaussianPosterior {
            mean: Tensor::new(vec![1], vec![1.0]),
            logvar: Tensor::zeros(&[1]),
        };
        assert!((kl_standard_normal(&one) - 0.5).abs() < 1e-15);
    }

    /// Independent oracle: E_q[ln q(z) − ln p(z)] estimated from draws.
    fn kl_monte_carlo(post: &GaussianPosterior, n: usize, seed: u64) -> (f64, f64) {
        let mut rng = substream(seed, "kl-mc");
        let params: Vec<(f64, f64)> = post
            .mean
            .data()
            .iter()
            .zip(post.logvar.data())
            .map(|(&m, &lv)| (m, lv))
            .collect();
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let mut log_ratio = 0.0;
            for &(m, lv) in &params {
                let e: f64 = StandardNormal.sample(&mut rng);
                let s = (0.5 * lv).exp();
                let z = m + s * e;
                let log_q = -0.5 * e * e - 0.5 * lv;
                let log_p = -0.5 * z * z;
                log_ratio += log_q - log_p;
            }
            sum += log_ratio;
            sum_sq += log_ratio * log_ratio;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        (mean, (var / n as f64).sqrt())
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let mut rng = substream(5, "posteriors");
        for i in 0..3 {
            let post = GaussianPosterior {
                mean: normal_tensor(&mut rng, &[3]),
                logvar: Tensor::from_fn(&[3], |_| rng.random_range(-1.5..1.0)),
            };
            let kl = kl_standard_normal(&post);
            assert!(kl >= 0.0);
            let (mc, se) = kl_monte_carlo(&post, 200_000, i);
            assert!((kl - mc).abs() < 3.0 * se, "kl {kl} mc {mc} se {se}");
        }
    }

    #[test]
    fn elbo_beta_zero_and_perfect_fit() {
        let (enc, hd, inr, store) = toy();
        let model = Model {
            enc: &enc,
            hd: &hd,
            inr: &inr,
        };
        let data = make_synthetic_dataset("gaussians", 1, [4, 4], 9).unwrap();
        let noise = Tensor::zeros(&[2, 4, 4]);
        let r0 = elbo(&data.items[0], &store, &model, 0.0, &noise).unwrap();
        assert_eq!(r0.total, r0.recon_logprob);
        assert!(r0.kl >= 0.0);
        let r1 = elbo(&data.items[0], &store, &model, 0.5, &noise).unwrap();
        assert!((r1.total - (r1.recon_logprob - 0.5 * r1.kl)).abs() < 1e-12);
        assert!(elbo(&data.items[0], &store, &model, -1.0, &noise).is_err());

        // With a zeroed head the posterior ignores its input, so the model's
        // own prediction can serve as a zero-residual target.
        let mut store = store;
        let head = store.get("enc.head.weight").unwrap().shape().to_vec();
        store.insert("enc.head.weight", Tensor::zeros(&head));
        let post = encode(&data.items[0], &store, &enc).unwrap();
        let phi = crate::hyperdecoder::generate_inr_params(&post.mean, &store, &hd, &inr).unwrap();
        let pred = crate::inr::inr_forward(&phi, &data.items[0].coords, &inr, None).unwrap();
        let perfect = Signal::from_features(&[4, 4], pred).unwrap();
        let r = elbo(&perfect, &store, &model, 0.0, &noise).unwrap();
        let expected = -16.0 * (2.0 * std::f64::consts::PI).sqrt().ln();
        assert!((r.total - expected).abs() < 1e-9, "{} vs {expected}", r.total);
    }

    #[test]
    fn elbo_gradients_match_finite_differences() {
        let (enc, hd, inr, mut store) = toy();
        let model = Model {
            enc: &enc,
            hd: &hd,
            inr: &inr,
        };
        let data = make_synthetic_dataset("gaussians", 2, [4, 4], 4).unwrap();
        let refs: Vec<&Signal> = data.items.iter().collect();
        let noise = normal_tensor(&mut substream(1, "noise"), &[2, 32]);
        let loss_at = |store: &ParamStore| {
            let mut g = Graph::new();
            let eg = elbo_graph(&mut g, store, &model, &refs, &noise, 0.3, None).unwrap();
            g.value(eg.loss).item()
        };
        let mut g = Graph::new();
        let eg = elbo_graph(&mut g, &store, &model, &refs, &noise, 0.3, None).unwrap();
        g.backward(eg.loss);
        let grads = g.param_grads();
        for name in [
            "enc.conv_in.weight",
            "hd.queries.W1",
            "hd.template.W2",
            "hd.decoder.0.cross_attn.q.weight",
            "hd.bias.b1",
        ] {
            let analytic = &grads[name];
            let h = 1e-6;
            let mut num = Vec::new();
            for i in 0..analytic.numel() {
                let orig = store.get(name).unwrap().data()[i];
                store.get_mut(name).unwrap().data_mut()[i] = orig + h;
                let up = loss_at(&store);
                store.get_mut(name).unwrap().data_mut()[i] = orig - h;
                let dn = loss_at(&store);
                store.get_mut(name).unwrap().data_mut()[i] = orig;
                num.push((up - dn) / (2.0 * h));
            }
            let diff: f64 = analytic
                .data()
                .iter()
                .zip(&num)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            let norm: f64 = num.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-8);
            assert!(diff / norm < 1e-4, "{name}: rel err {}", diff / norm);
        }
    }
}
