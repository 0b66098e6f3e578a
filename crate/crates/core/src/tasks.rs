//! Inference: multi-resolution sampling, reconstruction with PSNR, and
//! masked completion.

use std::fmt;
use std::fs;
use std::path::Path;

use crate::diffusion::{ddim_sample, Denoiser};
use crate::error::{Error, Result};
use crate::hyperdecoder::generate_inr_params;
use crate::inr::{inr_forward, make_coordinate_grid, InrParams};
use crate::ivae::{encode_batch, sample_posterior, FOURIER_NAME};
use crate::pipeline::{Checkpoint, Stage};
use crate::rng::{normal_tensor, substream};
use crate::tensor::Tensor;
use crate::tensorio::{save_ppm, Mask, Signal};

/// Rendering resolution relative to the training resolution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResolutionScale(f64);

impl ResolutionScale {
    pub const NATIVE: Self = Self(1.0);

    pub fn new(factor: f64) -> Result<Self> {
        if factor > 0.0 && factor.is_finite() {
            Ok(Self(factor))
        } else {
            Err(Error::InvalidConfig(format!(
                "scale must be a positive number, got {factor}"
            )))
        }
    }

    /// Accepts decimals (`0.5`) and fractions (`1/8`).
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::InvalidConfig(format!("cannot parse scale {s:?}"));
        let v = match s.split_once('/') {
            Some((a, b)) => {
                let a: f64 = a.trim().parse().map_err(|_| bad())?;
                let b: f64 = b.trim().parse().map_err(|_| bad())?;
                a / b
            }
            None => s.trim().parse().map_err(|_| bad())?,
        };
        Self::new(v)
    }

    pub fn factor(&self) -> f64 {
        self.0
    }

    /// `round(factor × n)` per axis; must stay ≥ 1.
    pub fn target(&self, resolution: [usize; 2]) -> Result<[usize; 2]> {
        let f = |n: usize| (self.0 * n as f64).round() as usize;
        let t = [f(resolution[0]), f(resolution[1])];
        if t.contains(&0) {
            return Err(Error::ZeroLengthAxis);
        }
        Ok(t)
    }
}

impl fmt::Display for ResolutionScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PsnrReport {
    pub mse: f64,
    /// `None` when the images are identical (infinite PSNR).
    pub psnr_db: Option<f64>,
}

impl PsnrReport {
    pub fn from_mse(mse: f64) -> Self {
        let psnr_db = (mse > 0.0).then(|| 10.0 * (1.0 / mse).log10());
        Self { mse, psnr_db }
    }

    /// Plain-text `key=value` report.
    pub fn to_kv(&self) -> String {
        format!("mse={}\npsnr_db={self}\n", self.mse)
    }
}

impl fmt::Display for PsnrReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.psnr_db {
            Some(db) => write!(f, "{db}"),
            None => f.write_str("inf"),
        }
    }
}

/// PSNR with peak 1 over all entries of equally shaped image sets.
pub fn psnr(pred: &[Tensor], truth: &[Tensor]) -> Result<PsnrReport> {
    if pred.len() != truth.len() || pred.iter().zip(truth).any(|(a, b)| a.shape() != b.shape()) {
        return Err(Error::ShapeMismatch("psnr needs equally shaped images".into()));
    }
    let n: usize = pred.iter().map(Tensor::numel).sum();
    let se: f64 = pred
        .iter()
        .zip(truth)
        .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)))
        .sum();
    Ok(PsnrReport::from_mse(if n == 0 { 0.0 } else { se / n as f64 }))
}

/// Evaluates Φ at arbitrary coordinates `(D × 2)`; unclamped `(D × C)`.
pub fn render_points(ckpt: &Checkpoint, phi: &InrParams, coords: &Tensor) -> Result<Tensor> {
    inr_forward(phi, coords, &ckpt.config.inr, ckpt.params.get(FOURIER_NAME))
}

/// Evaluates Φ on the pixel-centre grid of `resolution`; unclamped `[H, W, C]`.
pub fn render_raw(ckpt: &Checkpoint, phi: &InrParams, resolution: [usize; 2]) -> Result<Tensor> {
    let grid = make_coordinate_grid(&resolution, 2)?;
    let out = render_points(ckpt, phi, &grid.coords)?;
    Ok(out.reshaped(&[resolution[0], resolution[1], ckpt.config.inr.out_dim]))
}

/// [`render_raw`] at a scale of the training resolution, clamped to `[0, 1]`.
pub fn render(ckpt: &Checkpoint, phi: &InrParams, scale: ResolutionScale) -> Result<Tensor> {
    let res = scale.target(ckpt.config.encoder.resolution)?;
    Ok(render_raw(ckpt, phi, res)?.map(|v| v.clamp(0.0, 1.0)))
}

/// Content hash of a generated parameter set.
pub fn phi_digest(phi: &InrParams) -> String {
    phi.to_store("inr").digest("")
}

pub struct Samples {
    pub latents: Vec<Tensor>,
    pub params: Vec<InrParams>,
    pub images: Vec<Tensor>,
}

/// Draws latents with DDIM, decodes each to an INR and renders it.
pub fn sample(
    ckpt: &Checkpoint,
    n: usize,
    scale: ResolutionScale,
    ddim_steps: usize,
    eta: f64,
    seed: u64,
) -> Result<Samples> {
    ckpt.require_stage(&[Stage::Ldmi, Stage::HyperTransformed])?;
    let cfg = &ckpt.config;
    let sched = cfg.diffusion.schedule()?;
    let res = scale.target(cfg.encoder.resolution)?;
    if n == 0 {
        return Ok(Samples {
            latents: vec![],
            params: vec![],
            images: vec![],
        });
    }
    let latent = cfg.encoder.latent_shape();
    let den = Denoiser {
        store: &ckpt.params,
        cfg: &cfg.diffusion,
    };
    let z = ddim_sample(
        &den,
        &sched,
        ddim_steps,
        eta,
        seed,
        &[n, latent[0], latent[1], latent[2]],
    )?;
    let per = cfg.encoder.latent_numel();
    let mut out = Samples {
        latents: vec![],
        params: vec![],
        images: vec![],
    };
    for i in 0..n {
        let zi = Tensor::new(latent.to_vec(), z.data()[i * per..(i + 1) * per].to_vec());
        let phi = generate_inr_params(&zi, &ckpt.params, &cfg.hd, &cfg.inr)?;
        out.images.push(render_raw(ckpt, &phi, res)?.map(|v| v.clamp(0.0, 1.0)));
        out.params.push(phi);
        out.latents.push(zi);
    }
    Ok(out)
}

pub struct Reconstruction {
    pub params: Vec<InrParams>,
    pub images: Vec<Tensor>,
    /// Against the inputs, at the native resolution.
    pub psnr: PsnrReport,
}

fn latents_for(ckpt: &Checkpoint, signals: &[&Signal], draw: Option<u64>) -> Result<Vec<Tensor>> {
    let mut rng = draw.map(|seed| substream(seed, "sample"));
    let mut out = Vec::with_capacity(signals.len());
    for chunk in signals.chunks(32) {
        for post in encode_batch(chunk, &ckpt.params, &ckpt.config.encoder)? {
            out.push(match rng.as_mut() {
                Some(r) => sample_posterior(&post, &normal_tensor(r, post.mean.shape()))?,
                None => post.mean,
            });
        }
    }
    Ok(out)
}

/// Encodes each signal, decodes the posterior mean (or a posterior draw
/// when `draw_seed` is set) and renders at `scale`.
pub fn reconstruct(
    ckpt: &Checkpoint,
    signals: &[&Signal],
    scale: ResolutionScale,
    draw_seed: Option<u64>,
) -> Result<Reconstruction> {
    let cfg = &ckpt.config;
    let latents = latents_for(ckpt, signals, draw_seed)?;
    let mut params = Vec::with_capacity(signals.len());
    let mut images = Vec::with_capacity(signals.len());
    let mut native = Vec::with_capacity(signals.len());
    for z in &latents {
        let phi = generate_inr_params(z, &ckpt.params, &cfg.hd, &cfg.inr)?;
        images.push(render(ckpt, &phi, scale)?);
        native.push(render(ckpt, &phi, ResolutionScale::NATIVE)?);
        params.push(phi);
    }
    let truth: Vec<Tensor> = signals.iter().map(|s| s.to_image()).collect();
    let psnr = psnr(&native, &truth)?;
    Ok(Reconstruction { params, images, psnr })
}

pub struct Completion {
    pub images: Vec<Tensor>,
    /// Per sample, at native resolution against the input.
    pub observed_mse: Vec<f64>,
    pub unobserved_mse: Vec<f64>,
}

/// Mid-gray value written into missing pixels before encoding.
pub const MASK_FILL: f64 = 0.5;

/// Fills missing pixels with mid-gray, encodes, and decodes `n_samples`
/// posterior draws to full images.
pub fn inpaint(ckpt: &Checkpoint, signal: &Signal, mask: &Mask, n_samples: usize, seed: u64) -> Result<Completion> {
    if mask.shape.as_slice() != signal.resolution.as_slice() {
        return Err(Error::ResolutionMismatch {
            expected: signal.resolution.clone(),
            found: mask.shape.to_vec(),
        });
    }
    if mask.observed_count() == 0 {
        return Err(Error::EmptyContext);
    }
    let c = signal.features.shape()[1];
    let filled = Tensor::new(
        signal.features.shape().to_vec(),
        signal
            .features
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| if mask.observed[i / c] { v } else { MASK_FILL })
            .collect(),
    );
    let filled = Signal {
        features: filled,
        ..signal.clone()
    };
    let post = encode_batch(&[&filled], &ckpt.params, &ckpt.config.encoder)?.remove(0);
    let mut rng = substream(seed, "sample");
    let truth = signal.to_image();
    let mut out = Completion {
        images: vec![],
        observed_mse: vec![],
        unobserved_mse: vec![],
    };
    for _ in 0..n_samples {
        let z = sample_posterior(&post, &normal_tensor(&mut rng, post.mean.shape()))?;
        let phi = generate_inr_params(&z, &ckpt.params, &ckpt.config.hd, &ckpt.config.inr)?;
        let img = render(ckpt, &phi, ResolutionScale::NATIVE)?;
        let (mut so, mut no, mut su, mut nu) = (0.0, 0usize, 0.0, 0usize);
        for (i, (p, y)) in img.data().iter().zip(truth.data()).enumerate() {
            if mask.observed[i / c] {
                so += (p - y).powi(2);
                no += 1;
            } else {
                su += (p - y).powi(2);
                nu += 1;
            }
        }
        out.observed_mse.push(so / no as f64);
        out.unobserved_mse.push(if nu == 0 { 0.0 } else { su / nu as f64 });
        out.images.push(img);
    }
    Ok(out)
}

/// Writes `{prefix}_{i:04}.ppm` for every image.
pub fn write_images(dir: &Path, prefix: &str, images: &[Tensor]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, img) in images.iter().enumerate() {
        save_ppm(dir.join(format!("{prefix}_{i:04}.ppm")), img)?;
    }
    Ok(())
}

/// `manifest.txt` with one `key=value` line per entry, in the given order.
pub fn write_manifest(dir: &Path, entries: &[(&str, String)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let text: String = entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    fs::write(dir.join("manifest.txt"), text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::pipeline::{train_stage1, train_stage2};
    use crate::tensorio::make_synthetic_dataset;
    use proptest::prelude::*;

    fn tiny() -> (Checkpoint, crate::tensorio::Dataset) {
        let cfg = Config::parse(
            "[encoder]\nresolution = 8x8\nbase_channels = 4\nch_mult = 1,2\nnum_blocks = 0\nlatent_channels = 2\n\
             [hd]\npatch_size = 2\ntoken_dim = 8\nencoder_layers = 1\ndecoder_layers = 1\nheads = 2\nhead_dim = 4\nfeedforward_dim = 16\n\
             [inr]\nlayers = 2\nhidden_dim = 8\nomega = 10\n\
             [diffusion]\nbase_channels = 4\nch_mult = 1\nnum_blocks = 1\ntime_dim = 8\ndiffusion_steps = 20\n\
             [train]\nbatch_size = 2\niterations = 3\n",
        )
        .unwrap();
        let data = make_synthetic_dataset("gaussians", 3, [8, 8], 2).unwrap();
        let (ivae, _) = train_stage1(&data, &cfg, 1).unwrap();
        let (ldmi, _) = train_stage2(&data, &ivae, &cfg, 1).unwrap();
        (ldmi, data)
    }

    #[test]
    fn scale_targets() {
        assert_eq!(ResolutionScale::parse("1/8").unwrap().target([64, 64]).unwrap(), [8, 8]);
        assert_eq!(
            ResolutionScale::parse("0.5").unwrap().target([46, 90]).unwrap(),
            [23, 45]
        );
        assert_eq!(ResolutionScale::parse("4").unwrap().target([16, 16]).unwrap(), [64, 64]);
        assert!(ResolutionScale::parse("1/64").unwrap().target([16, 16]).is_err());
        assert!(ResolutionScale::parse("-1").is_err());
        assert!(ResolutionScale::parse("x").is_err());
    }

    #[test]
    fn psnr_closed_forms() {
        let a = Tensor::new(vec![2, 2, 1], vec![0.1, 0.2, 0.3, 0.4]);
        let r = psnr(std::slice::from_ref(&a), std::slice::from_ref(&a)).unwrap();
        assert_eq!((r.mse, r.psnr_db, r.to_string()), (0.0, None, "inf".to_string()));
        let z = Tensor::zeros(&[1, 1, 1]);
        let o = Tensor::full(&[1, 1, 1], 1.0);
        assert_eq!(psnr(&[z], &[o]).unwrap().psnr_db, Some(0.0));
        assert!(PsnrReport::from_mse(0.01).to_kv().contains("psnr_db=20"));
    }

    proptest! {
        #[test]
        fn psnr_symmetric_and_shift_invariant(
            a in prop::collection::vec(0.0f64..0.5, 12),
            b in prop::collection::vec(0.0f64..0.5, 12),
            c in 0.0f64..0.5,
        ) {
            let ta = Tensor::new(vec![3, 4, 1], a);
            let tb = Tensor::new(vec![3, 4, 1], b);
            let ab = psnr(std::slice::from_ref(&ta), std::slice::from_ref(&tb)).unwrap();
            let ba = psnr(std::slice::from_ref(&tb), std::slice::from_ref(&ta)).unwrap();
            prop_assert_eq!(ab, ba);
            let shifted = psnr(&[ta.map(|v| v + c)], &[tb.map(|v| v + c)]).unwrap();
            prop_assert!((shifted.mse - ab.mse).abs() < 1e-12);
        }
    }

    #[test]
    fn sampling_is_deterministic_and_resolution_free() {
        let (ckpt, _) = tiny();
        let a = sample(&ckpt, 2, ResolutionScale::NATIVE, 5, 0.0, 4).unwrap();
        let b = sample(&ckpt, 2, ResolutionScale::NATIVE, 5, 0.0, 4).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.images[0].shape(), [8, 8, 1]);
        assert!(a.images[0].data().iter().all(|v| (0.0..=1.0).contains(v)));
        let empty = sample(&ckpt, 0, ResolutionScale::NATIVE, 5, 0.0, 4).unwrap();
        assert!(empty.images.is_empty());

        // Pixel centres nest only under odd refinement: ×3 contains ×1.
        let phi = &a.params[0];
        let x1 = render_raw(&ckpt, phi, [8, 8]).unwrap();
        let x3 = render_raw(&ckpt, phi, [24, 24]).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(x1.data()[y * 8 + x], x3.data()[(3 * y + 1) * 24 + 3 * x + 1]);
            }
        }

        // Any superset evaluation restricted to a grid reproduces it bitwise.
        let res = [[4, 4], [8, 8], [16, 16], [32, 32]];
        let grids: Vec<Tensor> = res.iter().map(|r| make_coordinate_grid(r, 2).unwrap().coords).collect();
        let union = Tensor::new(
            vec![grids.iter().map(|g| g.shape()[0]).sum(), 2],
            grids.iter().flat_map(|g| g.data().to_vec()).collect(),
        );
        let all = render_points(&ckpt, phi, &union).unwrap();
        let mut offset = 0;
        for r in res {
            let own = render_raw(&ckpt, phi, r).unwrap();
            assert_eq!(own.data(), &all.data()[offset..offset + own.numel()]);
            offset += own.numel();
        }
    }

    #[test]
    fn reconstruct_and_inpaint_contracts() {
        let (ckpt, data) = tiny();
        let refs: Vec<&Signal> = data.items.iter().collect();
        let rec = reconstruct(&ckpt, &refs, ResolutionScale::parse("2").unwrap(), None).unwrap();
        assert_eq!(rec.images[0].shape(), [16, 16, 1]);
        assert!(rec.psnr.psnr_db.unwrap().is_finite());

        let full = Mask::all_observed([8, 8]);
        let a = inpaint(&ckpt, &data.items[0], &full, 1, 3).unwrap();
        let drawn = reconstruct(&ckpt, &refs[..1], ResolutionScale::NATIVE, Some(3)).unwrap();
        assert_eq!(a.images[0], drawn.images[0]);

        let none = Mask {
            shape: [8, 8],
            observed: vec![false; 64],
        };
        assert!(matches!(
            inpaint(&ckpt, &data.items[0], &none, 1, 3),
            Err(Error::EmptyContext)
        ));
        assert!(inpaint(&ckpt, &data.items[0], &Mask::all_observed([4, 4]), 1, 3).is_err());
    }
}
