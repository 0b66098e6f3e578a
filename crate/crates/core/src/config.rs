//! Flat `key = value` configuration with `[section]` headers.
//!
//! Sections are `[encoder]`, `[hd]`, `[inr]`, `[diffusion]` and `[train]`.
//! Blank lines and `#` comments are ignored, unknown keys are rejected and
//! missing keys keep the defaults of the corresponding structs. List values
//! (`ch_mult`, per-phase `iterations` and `lr`) are comma separated; sizes
//! are written `HxW`.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::diffusion::{DiffusionConfig, ScheduleKind};
use crate::error::{Error, Result};
use crate::hyperdecoder::{HdConfig, ReconMode};
use crate::inr::{Activation, Encoding, InrConfig, Likelihood};
use crate::ivae::EncoderConfig;
use crate::optim::AdamConfig;

/// The three optimisation phases, in pipeline order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Stage1,
    Stage2,
    HyperTransform,
}

impl Phase {
    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Steps for stage 1, stage 2 and hyper-transforming.
    pub iterations: [usize; 3],
    pub lr: [f64; 3],
    pub kl_weight: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            iterations: [2000, 2000, 1000],
            lr: [1e-3, 1e-3, 1e-3],
            kl_weight: 1e-5,
            grad_clip: 1.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self, phase: Phase) -> AdamConfig {
        AdamConfig {
            lr: self.lr[phase.index()],
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            clip_norm: (self.grad_clip > 0.0).then_some(self.grad_clip),
        }
    }

    pub fn iterations(&self, phase: Phase) -> usize {
        self.iterations[phase.index()]
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kl_weight >= 0.0) {
            return Err(Error::InvalidConfig("kl_weight must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.lr.iter().any(|lr| !(*lr >= 0.0)) {
            return Err(Error::InvalidConfig("lr must be >= 0".into()));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::InvalidConfig("grad_clip must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::InvalidConfig("adam betas must be in [0, 1) and eps > 0".into()));
        }
        Ok(())
    }
}

/// Complete model and training description.
#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub encoder: EncoderConfig,
    pub hd: HdConfig,
    pub inr: InrConfig,
    pub diffusion: DiffusionConfig,
    pub train: TrainConfig,
}

impl Default for Config {
    fn default() -> Self {
        let mut c = Self {
            encoder: EncoderConfig::default(),
            hd: HdConfig::default(),
            inr: InrConfig::default(),
            diffusion: DiffusionConfig::default(),
            train: TrainConfig::default(),
        };
        c.sync_derived();
        c
    }
}

const SECTIONS: [&str; 5] = ["encoder", "hd", "inr", "diffusion", "train"];

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::InvalidConfig(format!("{key}: cannot parse {v:?}")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|p| parse_num(key, p.trim())).collect()
}

fn parse_size(key: &str, v: &str) -> Result<[usize; 2]> {
    let parts: Vec<&str> = v.split(['x', 'X', '×']).map(str::trim).collect();
    match parts.as_slice() {
        [h, w] => Ok([parse_num(key, h)?, parse_num(key, w)?]),
        _ => Err(Error::InvalidConfig(format!("{key}: expected HxW, got {v:?}"))),
    }
}

/// One value, or one per phase.
fn parse_phased<T: FromStr + Copy>(key: &str, v: &str) -> Result<[T; 3]> {
    match parse_list::<T>(key, v)?.as_slice() {
        [a] => Ok([*a; 3]),
        [a, b] => Ok([*a, *b, *b]),
        [a, b, c] => Ok([*a, *b, *c]),
        _ => Err(Error::InvalidConfig(format!("{key}: expected 1 to 3 values"))),
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl Config {
    /// Decoder latent and INR output width always follow the encoder.
    fn sync_derived(&mut self) {
        let [c, h, w] = self.encoder.latent_shape();
        self.hd.latent_channels = c;
        self.hd.latent_h = h;
        self.hd.latent_w = w;
        self.inr.in_dim = 2;
        self.inr.out_dim = self.encoder.in_channels;
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.check_compatible(&self.hd, &self.inr)?;
        self.diffusion.validate(self.encoder.latent_shape())?;
        self.train.validate()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut latent_size: Option<[usize; 2]> = None;
        let mut section: Option<&str> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !SECTIONS.contains(&name) {
                    return Err(Error::InvalidConfig(format!(
                        "line {}: unknown section [{name}]",
                        lineno + 1
                    )));
                }
                section = SECTIONS.iter().copied().find(|s| *s == name);
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected key = value", lineno + 1)))?;
            let Some(sec) = section else {
                return Err(Error::InvalidConfig(format!(
                    "line {}: key {key:?} outside a section",
                    lineno + 1
                )));
            };
            cfg.set(sec, key, value, &mut latent_size)?;
        }
        cfg.sync_derived();
        if let Some([h, w]) = latent_size {
            if [h, w] != [cfg.hd.latent_h, cfg.hd.latent_w] {
                return Err(Error::InvalidConfig(format!(
                    "latent_size {h}x{w} disagrees with the encoder's {}x{}",
                    cfg.hd.latent_h, cfg.hd.latent_w
                )));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one `section.key = value` assignment (used by CLI overrides).
    pub fn set_key(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let mut ignored = None;
        self.set(section, key, value, &mut ignored)?;
        self.sync_derived();
        Ok(())
    }

    fn set(&mut self, sec: &str, key: &str, v: &str, latent_size: &mut Option<[usize; 2]>) -> Result<()> {
        let unknown = || Err(Error::InvalidConfig(format!("unknown key {key:?} in [{sec}]")));
        match sec {
            "encoder" => {
                let e = &mut self.encoder;
                match key {
                    "resolution" => e.resolution = parse_size(key, v)?,
                    "in_channels" => e.in_channels = parse_num(key, v)?,
                    "latent_channels" => e.latent_channels = parse_num(key, v)?,
                    "base_channels" => e.base_channels = parse_num(key, v)?,
                    "ch_mult" => e.ch_mult = parse_list(key, v)?,
                    "num_blocks" => e.num_blocks = parse_num(key, v)?,
                    _ => return unknown(),
                }
            }
            "hd" => {
                let h = &mut self.hd;
                match key {
                    "latent_size" => *latent_size = Some(parse_size(key, v)?),
                    "patch_size" => h.patch_size = parse_num(key, v)?,
                    "token_dim" => h.token_dim = parse_num(key, v)?,
                    "encoder_layers" => h.encoder_layers = parse_num(key, v)?,
                    "decoder_layers" => h.decoder_layers = parse_num(key, v)?,
                    "heads" => h.heads = parse_num(key, v)?,
                    "head_dim" => h.head_dim = parse_num(key, v)?,
                    "feedforward_dim" => h.feedforward_dim = parse_num(key, v)?,
                    "groups" => h.groups = parse_num(key, v)?,
                    "recon_mode" => h.recon_mode = ReconMode::parse(v)?,
                    _ => return unknown(),
                }
            }
            "inr" => {
                let i = &mut self.inr;
                match key {
                    "layers" => i.layers = parse_num(key, v)?,
                    "hidden_dim" => i.hidden_dim = parse_num(key, v)?,
                    "omega" => i.omega = parse_num(key, v)?,
                    "activation" => {
                        i.activation = match v {
                            "sine" => Activation::Sine,
                            "relu" => Activation::Relu,
                            _ => return Err(Error::InvalidConfig(format!("activation: unknown {v:?}"))),
                        }
                    }
                    "encoding" => {
                        i.encoding = match (v, i.encoding) {
                            ("identity", _) => Encoding::Identity,
                            ("fourier", Encoding::Fourier { .. }) => i.encoding,
                            ("fourier", Encoding::Identity) => Encoding::Fourier {
                                num_freqs: 64,
                                scale: 1.0,
                            },
                            _ => return Err(Error::InvalidConfig(format!("encoding: unknown {v:?}"))),
                        }
                    }
                    "fourier_freqs" | "fourier_scale" => {
                        let Encoding::Fourier { num_freqs, scale } = i.encoding else {
                            return Err(Error::InvalidConfig(format!("{key} requires encoding = fourier first")));
                        };
                        i.encoding = if key == "fourier_freqs" {
                            Encoding::Fourier {
                                num_freqs: parse_num(key, v)?,
                                scale,
                            }
                        } else {
                            Encoding::Fourier {
                                num_freqs,
                                scale: parse_num(key, v)?,
                            }
                        };
                    }
                    "sigma" => {
                        i.likelihood = Likelihood::Gaussian {
                            sigma: parse_num(key, v)?,
                        }
                    }
                    _ => return unknown(),
                }
            }
            "diffusion" => {
                let d = &mut self.diffusion;
                match key {
                    "diffusion_steps" => d.steps = parse_num(key, v)?,
                    "noise_schedule" => d.schedule = ScheduleKind::parse(v)?,
                    "beta_start" => d.beta_start = parse_num(key, v)?,
                    "beta_end" => d.beta_end = parse_num(key, v)?,
                    "base_channels" => d.base_channels = parse_num(key, v)?,
                    "ch_mult" => d.ch_mult = parse_list(key, v)?,
                    "num_blocks" => d.num_res_blocks = parse_num(key, v)?,
                    "time_dim" => d.time_dim = parse_num(key, v)?,
                    _ => return unknown(),
                }
            }
            "train" => {
                let t = &mut self.train;
                match key {
                    "batch_size" => t.batch_size = parse_num(key, v)?,
                    "iterations" => t.iterations = parse_phased(key, v)?,
                    "lr" => t.lr = parse_phased(key, v)?,
                    "kl_weight" => t.kl_weight = parse_num(key, v)?,
                    "grad_clip" => t.grad_clip = parse_num(key, v)?,
                    "adam_beta1" => t.adam_beta1 = parse_num(key, v)?,
                    "adam_beta2" => t.adam_beta2 = parse_num(key, v)?,
                    "adam_eps" => t.adam_eps = parse_num(key, v)?,
                    _ => return unknown(),
                }
            }
            _ => return Err(Error::InvalidConfig(format!("unknown section [{sec}]"))),
        }
        Ok(())
    }

    /// Canonical text: every key, fixed order, `key = value`.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let e = &self.encoder;
        let _ = writeln!(s, "[encoder]");
        let _ = writeln!(s, "resolution = {}x{}", e.resolution[0], e.resolution[1]);
        let _ = writeln!(s, "in_channels = {}", e.in_channels);
        let _ = writeln!(s, "latent_channels = {}", e.latent_channels);
        let _ = writeln!(s, "base_channels = {}", e.base_channels);
        let _ = writeln!(s, "ch_mult = {}", join(&e.ch_mult));
        let _ = writeln!(s, "num_blocks = {}", e.num_blocks);

        let h = &self.hd;
        let _ = writeln!(s, "\n[hd]");
        let _ = writeln!(s, "latent_size = {}x{}", h.latent_h, h.latent_w);
        let _ = writeln!(s, "patch_size = {}", h.patch_size);
        let _ = writeln!(s, "token_dim = {}", h.token_dim);
        let _ = writeln!(s, "encoder_layers = {}", h.encoder_layers);
        let _ = writeln!(s, "decoder_layers = {}", h.decoder_layers);
        let _ = writeln!(s, "heads = {}", h.heads);
        let _ = writeln!(s, "head_dim = {}", h.head_dim);
        let _ = writeln!(s, "feedforward_dim = {}", h.feedforward_dim);
        let _ = writeln!(s, "groups = {}", h.groups);
        let _ = writeln!(s, "recon_mode = {}", h.recon_mode.as_str());

        let i = &self.inr;
        let _ = writeln!(s, "\n[inr]");
        let _ = writeln!(s, "layers = {}", i.layers);
        let _ = writeln!(s, "hidden_dim = {}", i.hidden_dim);
        let _ = writeln!(s, "omega = {}", i.omega);
        let act = match i.activation {
            Activation::Sine => "sine",
            Activation::Relu => "relu",
        };
        let _ = writeln!(s, "activation = {act}");
        match i.encoding {
            Encoding::Identity => {
                let _ = writeln!(s, "encoding = identity");
            }
            Encoding::Fourier { num_freqs, scale } => {
                let _ = writeln!(s, "encoding = fourier");
                let _ = writeln!(s, "fourier_freqs = {num_freqs}");
                let _ = writeln!(s, "fourier_scale = {scale}");
            }
        }
        let Likelihood::Gaussian { sigma } = i.likelihood;
        let _ = writeln!(s, "sigma = {sigma}");

        let d = &self.diffusion;
        let _ = writeln!(s, "\n[diffusion]");
        let _ = writeln!(s, "diffusion_steps = {}", d.steps);
        let _ = writeln!(s, "noise_schedule = {}", d.schedule.as_str());
        let _ = writeln!(s, "beta_start = {}", d.beta_start);
        let _ = writeln!(s, "beta_end = {}", d.beta_end);
        let _ = writeln!(s, "base_channels = {}", d.base_channels);
        let _ = writeln!(s, "ch_mult = {}", join(&d.ch_mult));
        let _ = writeln!(s, "num_blocks = {}", d.num_res_blocks);
        let _ = writeln!(s, "time_dim = {}", d.time_dim);

        let t = &self.train;
        let _ = writeln!(s, "\n[train]");
        let _ = writeln!(s, "batch_size = {}", t.batch_size);
        let _ = writeln!(s, "iterations = {}", join(&t.iterations));
        let _ = writeln!(s, "lr = {}", join(&t.lr));
        let _ = writeln!(s, "kl_weight = {}", t.kl_weight);
        let _ = writeln!(s, "grad_clip = {}", t.grad_clip);
        let _ = writeln!(s, "adam_beta1 = {}", t.adam_beta1);
        let _ = writeln!(s, "adam_beta2 = {}", t.adam_beta2);
        let _ = writeln!(s, "adam_eps = {}", t.adam_eps);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_are_valid_and_roundtrip() {
        let cfg = Config::default();
        cfg.validate().unwrap();
        let text = cfg.serialize();
        assert_eq!(Config::parse(&text).unwrap(), cfg);
        assert_eq!(Config::parse("").unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_and_sections_are_rejected() {
        assert!(Config::parse("[hd]\nwidth = 3\n").is_err());
        assert!(Config::parse("[model]\n").is_err());
        assert!(Config::parse("groups = 2\n").is_err());
        assert!(Config::parse("[hd]\ngroups\n").is_err());
    }

    #[test]
    fn kl_weight_must_be_non_negative() {
        let err = Config::parse("[train]\nkl_weight = -1\n").unwrap_err();
        assert_eq!(err.to_string(), "invalid config: kl_weight must be >= 0");
    }

    #[test]
    fn phased_values() {
        let cfg = Config::parse("[train]\niterations = 300000, 400000\nlr = 1e-06, 2e-06\n").unwrap();
        assert_eq!(cfg.train.iterations, [300_000, 400_000, 400_000]);
        assert_eq!(cfg.train.lr, [1e-6, 2e-6, 2e-6]);
        assert_eq!(cfg.train.adam(Phase::Stage2).lr, 2e-6);
    }

    #[test]
    fn latent_size_must_agree_with_encoder() {
        assert!(Config::parse("[hd]\nlatent_size = 4x4\n").is_ok());
        assert!(Config::parse("[hd]\nlatent_size = 8x8\n").is_err());
    }

    #[test]
    fn whitespace_and_comments_normalise_away() {
        let canonical = Config::default().serialize();
        let messy: String = canonical
            .lines()
            .map(|l| match l.split_once(" = ") {
                Some((k, v)) => format!("   {k}\t=   {v}    # note\n"),
                None => format!("{l}  \n\n"),
            })
            .collect();
        assert_eq!(Config::parse(&messy).unwrap().serialize(), canonical);
    }

    proptest! {
        #[test]
        fn serialize_parse_roundtrip(
            groups in prop::sample::select(vec![1usize, 2]),
            hidden_mult in 1usize..5,
            layers in 1usize..5,
            omega in 0.5f64..60.0,
            kl in 0.0f64..1.0,
            lr in prop::collection::vec(1e-7f64..1e-1, 3),
            steps in 1usize..2000,
        ) {
            let mut cfg = Config::default();
            cfg.hd.groups = groups;
            cfg.inr.hidden_dim = 2 * hidden_mult;
            cfg.inr.layers = layers;
            cfg.inr.omega = omega;
            cfg.train.kl_weight = kl;
            cfg.train.lr = [lr[0], lr[1], lr[2]];
            cfg.diffusion.steps = steps;
            cfg.validate().unwrap();
            let text = cfg.serialize();
            let back = Config::parse(&text).unwrap();
            prop_assert_eq!(&back, &cfg);
            prop_assert_eq!(back.serialize(), text);
        }
    }
}
