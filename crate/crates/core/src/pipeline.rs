//! Two-stage training, hyper-transforming, and the checkpoint archive.
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! magic      4   "LDMK"
//! version    1   1
//! stage      1+n length byte, ASCII tag (ivae | ldmi | hypertransformed)
//! count      4   u32 number of tensors
//! directory      count × { u16 name length, name bytes, u64 offset, u64 length }
//! records        concatenated f64 tensor-file records; offsets are absolute
//! config     8+n u64 length, UTF-8 canonical config text
//! ```

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::config::{Config, Phase};
use crate::diffusion::{init_denoiser, train_denoiser};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::hyperdecoder::init_hd;
use crate::inr::{fourier_matrix, likelihood_constant};
use crate::ivae::{
    decode_and_score, elbo_graph, encode_batch, init_encoder, inr_inputs, GaussianPosterior, Model, FOURIER_NAME,
};
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::rng::{normal_tensor, substream, StreamRng};
use crate::tensor::Tensor;
use crate::tensorio::{decode_tensor, encode_tensor, Dataset, Signal, TensorData};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LDMK";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Ivae,
    Ldmi,
    HyperTransformed,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Ivae => "ivae",
            Stage::Ldmi => "ldmi",
            Stage::HyperTransformed => "hypertransformed",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ivae" => Ok(Stage::Ivae),
            "ldmi" => Ok(Stage::Ldmi),
            "hypertransformed" => Ok(Stage::HyperTransformed),
            other => Err(Error::MalformedHeader(format!("unknown stage tag {other:?}"))),
        }
    }

    pub fn has_denoiser(&self) -> bool {
        !matches!(self, Stage::Ivae)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub config: Config,
    pub params: ParamStore,
}

/// Fresh parameters for every component a stage must contain.
fn reference_store(config: &Config, stage: Stage, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    let mut rng = substream(seed, "init");
    init_encoder(&mut store, &mut rng, &config.encoder);
    init_hd(&mut store, &mut rng, &config.hd, &config.inr);
    if let Some(b) = fourier_matrix(&config.inr, seed) {
        store.insert(FOURIER_NAME, b);
    }
    if stage.has_denoiser() {
        init_denoiser(&mut store, &mut rng, &config.diffusion, config.encoder.latent_shape());
    }
    store
}

impl Checkpoint {
    pub fn require_stage(&self, allowed: &[Stage]) -> Result<()> {
        if allowed.contains(&self.stage) {
            return Ok(());
        }
        Err(Error::StageMismatch {
            expected: allowed.iter().map(Stage::as_str).collect::<Vec<_>>().join(" or "),
            found: self.stage.to_string(),
        })
    }

    /// Every tensor the declared stage needs is present with the shape the
    /// config implies, and nothing else is.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let reference = reference_store(&self.config, self.stage, 0);
        for (name, t) in reference.iter() {
            let found = self
                .params
                .get(name)
                .ok_or_else(|| Error::IncompleteCheckpoint(name.clone()))?;
            if found.shape() != t.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "{name}: {:?}, config implies {:?}",
                    found.shape(),
                    t.shape()
                )));
            }
        }
        if let Some(extra) = self.params.names().find(|n| !reference.contains(n)) {
            return Err(Error::InvalidTensor(format!(
                "unexpected tensor {extra:?} for stage {}",
                self.stage
            )));
        }
        Ok(())
    }

    pub fn digest(&self, prefix: &str) -> String {
        self.params.digest(prefix)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut records = Vec::new();
        let mut spans = Vec::new();
        for (name, t) in self.params.iter() {
            let start = records.len();
            encode_tensor(&TensorData::F64(t.data().to_vec()), t.shape(), &mut records)?;
            spans.push((name.clone(), start, records.len() - start));
        }
        let tag = self.stage.as_str().as_bytes();
        let dir_len: usize = spans.iter().map(|(n, _, _)| 2 + n.len() + 16).sum();
        let header_len = 4 + 1 + 1 + tag.len() + 4 + dir_len;

        let mut out = Vec::with_capacity(header_len + records.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.push(tag.len() as u8);
        out.extend_from_slice(tag);
        out.extend_from_slice(&(spans.len() as u32).to_le_bytes());
        for (name, start, len) in &spans {
            let n = u16::try_from(name.len()).map_err(|_| Error::InvalidTensor(format!("name too long: {name}")))?;
            out.extend_from_slice(&n.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&((header_len + start) as u64).to_le_bytes());
            out.extend_from_slice(&(*len as u64).to_le_bytes());
        }
        debug_assert_eq!(out.len(), header_len);
        out.extend_from_slice(&records);
        let text = self.config.serialize();
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic { expected: "LDMK" });
        }
        let version = r.take(1)?[0];
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let tag_len = r.take(1)?[0] as usize;
        let tag = std::str::from_utf8(r.take(tag_len)?)
            .map_err(|_| Error::MalformedHeader("stage tag is not UTF-8".into()))?;
        let stage = Stage::parse(tag)?;
        let count = r.u32()? as usize;
        let mut dir = Vec::with_capacity(count);
        for _ in 0..count {
            let n = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| Error::MalformedHeader("tensor name is not UTF-8".into()))?
                .to_string();
            dir.push((name, r.u64()? as usize, r.u64()? as usize));
        }
        let mut params = ParamStore::new();
        let mut end = r.pos;
        for (name, offset, len) in dir {
            let stop = offset
                .checked_add(len)
                .filter(|&s| s <= bytes.len())
                .ok_or(Error::Truncated {
                    expected: offset.saturating_add(len),
                    found: bytes.len(),
                })?;
            let ((data, dims), used) = decode_tensor(&bytes[offset..stop])?;
            if used != len {
                return Err(Error::InvalidTensor(format!("{name}: record length mismatch")));
            }
            if params.contains(&name) {
                return Err(Error::InvalidTensor(format!("duplicate tensor name {name:?}")));
            }
            params.insert(name, Tensor::new(dims, data.to_f64()));
            end = end.max(stop);
        }
        r.pos = end;
        let text_len = r.u64()? as usize;
        let text = std::str::from_utf8(r.take(text_len)?)
            .map_err(|_| Error::MalformedHeader("config text is not UTF-8".into()))?;
        let config = Config::parse(text)?;
        let ckpt = Checkpoint { stage, config, params };
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn model(&self) -> Model<'_> {
        Model {
            enc: &self.config.encoder,
            hd: &self.config.hd,
            inr: &self.config.inr,
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Truncated {
                expected: end,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    ckpt.validate()?;
    fs::write(path, ckpt.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

/// One row of a loss trace. `kl` and `recon` (mean reconstruction
/// log-probability) are only reported where they exist.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub loss: f64,
    pub kl: Option<f64>,
    pub recon: Option<f64>,
}

pub fn write_trace_csv(path: impl AsRef<Path>, rows: &[TraceRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    let full = rows.first().is_some_and(|r| r.kl.is_some());
    writeln!(f, "{}", if full { "step,loss,kl,recon" } else { "step,loss" })?;
    for r in rows {
        match (r.kl, r.recon) {
            (Some(kl), Some(recon)) if full => writeln!(f, "{},{},{},{}", r.step, r.loss, kl, recon)?,
            _ => writeln!(f, "{},{}", r.step, r.loss)?,
        }
    }
    f.flush()?;
    Ok(())
}

/// Ratio of the mean of the last `window` losses to the mean of the first
/// `window`; `< 0.5` means the smoothed loss halved.
pub fn smoothed_ratio(losses: &[f64], window: usize) -> f64 {
    let w = window.min(losses.len() / 2).max(1);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    mean(&losses[losses.len() - w..]) / mean(&losses[..w])
}

/// Seed-ordered minibatches: a fresh permutation per epoch.
struct Batches {
    order: Vec<usize>,
    pos: usize,
    size: usize,
}

impl Batches {
    fn new(n: usize, size: usize) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
            size: size.min(n),
        }
    }

    fn next(&mut self, rng: &mut impl Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.size);
        while out.len() < self.size {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn check_dataset(dataset: &Dataset, config: &Config) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::InvalidConfig("dataset is empty".into()));
    }
    let want = [config.encoder.resolution.as_slice(), &[config.encoder.in_channels]].concat();
    let found = [dataset.resolution.as_slice(), &[dataset.feat_dim]].concat();
    if want != found {
        return Err(Error::ResolutionMismatch { expected: want, found });
    }
    Ok(())
}

fn guard(step: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { step, loss })
    }
}

/// Stage 1: jointly fits encoder and hyper-decoder by maximising the ELBO.
pub fn train_stage1(dataset: &Dataset, config: &Config, seed: u64) -> Result<(Checkpoint, Vec<TraceRow>)> {
    config.validate()?;
    check_dataset(dataset, config)?;
    let mut store = reference_store(config, Stage::Ivae, seed);
    store.freeze("inr.");
    let model = Model {
        enc: &config.encoder,
        hd: &config.hd,
        inr: &config.inr,
    };
    let mut opt = Adam::new(config.train.adam(Phase::Stage1));
    let mut rng = substream(seed, "train");
    let mut batches = Batches::new(dataset.len(), config.train.batch_size);
    let n_latent = config.encoder.latent_numel();
    let steps = config.train.iterations(Phase::Stage1);
    let mut trace = Vec::with_capacity(steps);
    for step in 0..steps {
        let idx = batches.next(&mut rng);
        let signals: Vec<&Signal> = idx.iter().map(|&i| &dataset.items[i]).collect();
        let noise = normal_tensor(&mut rng, &[signals.len(), n_latent]);
        let mut g = Graph::new();
        let eg = elbo_graph(&mut g, &store, &model, &signals, &noise, config.train.kl_weight, None)?;
        let loss = g.value(eg.loss).item();
        guard(step, loss)?;
        let b = signals.len() as f64;
        let kl = eg.kl.iter().map(|&v| g.value(v).item()).sum::<f64>() / b;
        let recon = eg.recon.iter().map(|&v| g.value(v).item()).sum::<f64>() / b;
        g.backward(eg.loss);
        opt.step(&mut store, &g.param_grads());
        trace.push(TraceRow {
            step,
            loss,
            kl: Some(kl),
            recon: Some(recon),
        });
    }
    store.unfreeze_all();
    Ok((
        Checkpoint {
            stage: Stage::Ivae,
            config: config.clone(),
            params: store,
        },
        trace,
    ))
}

/// Posterior parameters for every dataset item, flattened to `[|z|]`.
fn encode_dataset(dataset: &Dataset, ckpt: &Checkpoint) -> Result<Vec<GaussianPosterior>> {
    let refs: Vec<&Signal> = dataset.items.iter().collect();
    let mut out = Vec::with_capacity(refs.len());
    for chunk in refs.chunks(32) {
        out.extend(encode_batch(chunk, &ckpt.params, &ckpt.config.encoder)?);
    }
    Ok(out)
}

/// `z = μ + σ ε` for the selected items, stacked to `[B, d_z, H_z, W_z]`.
fn draw_latents(posts: &[GaussianPosterior], idx: &[usize], rng: &mut StreamRng) -> Tensor {
    let shape = posts[0].mean.shape().to_vec();
    let per: usize = shape.iter().product();
    let noise = normal_tensor(rng, &[idx.len(), per]);
    let mut data = Vec::with_capacity(idx.len() * per);
    for (row, &i) in idx.iter().enumerate() {
        let p = &posts[i];
        for j in 0..per {
            let std = (0.5 * p.logvar.data()[j]).exp();
            data.push(p.mean.data()[j] + std * noise.data()[row * per + j]);
        }
    }
    Tensor::new([&[idx.len()], shape.as_slice()].concat(), data)
}

fn verify_frozen(before: &[(&str, String)], store: &ParamStore) -> Result<()> {
    for (prefix, digest) in before {
        if store.digest(prefix) != *digest {
            return Err(Error::InvalidTensor(format!(
                "frozen parameters under {prefix:?} changed"
            )));
        }
    }
    Ok(())
}

/// Stage 2: fits the latent ε-network to the frozen encoder's aggregate
/// posterior. Encoder and decoder parameters are left bit-identical.
/// Architecture comes from the checkpoint; the diffusion and training
/// sections come from `config`.
pub fn train_stage2(
    dataset: &Dataset,
    ivae: &Checkpoint,
    config: &Config,
    seed: u64,
) -> Result<(Checkpoint, Vec<TraceRow>)> {
    ivae.require_stage(&[Stage::Ivae])?;
    let mut merged = ivae.config.clone();
    merged.diffusion = config.diffusion.clone();
    merged.train = config.train.clone();
    merged.validate()?;
    check_dataset(dataset, &merged)?;

    let posts = encode_dataset(dataset, ivae)?;
    let mut store = ivae.params.clone();
    let frozen = [
        ("enc.", store.digest("enc.")),
        ("hd.", store.digest("hd.")),
        ("inr.", store.digest("inr.")),
    ];
    init_denoiser(
        &mut store,
        &mut substream(seed, "init"),
        &merged.diffusion,
        merged.encoder.latent_shape(),
    );
    for (p, _) in &frozen {
        store.freeze(p);
    }
    let mut rng = substream(seed, "train");
    let mut batches = Batches::new(dataset.len(), merged.train.batch_size);
    let losses = train_denoiser(
        &mut store,
        &merged.diffusion,
        merged.train.adam(Phase::Stage2),
        merged.train.iterations(Phase::Stage2),
        &mut rng,
        |rng| {
            let idx = batches.next(rng);
            Ok(draw_latents(&posts, &idx, rng))
        },
    )?;
    store.unfreeze_all();
    verify_frozen(&frozen, &store)?;
    let trace = losses
        .into_iter()
        .enumerate()
        .map(|(step, loss)| TraceRow {
            step,
            loss,
            kl: None,
            recon: None,
        })
        .collect();
    Ok((
        Checkpoint {
            stage: Stage::Ldmi,
            config: merged,
            params: store,
        },
        trace,
    ))
}

/// Trains only the hyper-decoder against a frozen encoder and ε-network by
/// maximising the decoded log-likelihood. With `reinit_hd` the decoder
/// starts from a fresh initialisation, as when attaching it to a
/// pre-trained latent diffusion model; otherwise it is fine-tuned.
/// Decoder hyperparameters come from `config` when re-initialising.
pub fn hyper_transform(
    dataset: &Dataset,
    frozen: &Checkpoint,
    config: &Config,
    seed: u64,
    reinit_hd: bool,
) -> Result<(Checkpoint, Vec<TraceRow>)> {
    frozen.require_stage(&[Stage::Ldmi])?;
    let mut merged = frozen.config.clone();
    merged.train = config.train.clone();
    if reinit_hd {
        merged.hd = hd_for_frozen(config, &frozen.config);
        merged.inr = config.inr.clone();
    }
    merged.validate()?;
    check_dataset(dataset, &merged)?;

    let posts = encode_dataset(dataset, frozen)?;
    let mut store = frozen.params.clone();
    let keep = [("enc.", store.digest("enc.")), ("eps.", store.digest("eps."))];
    if reinit_hd {
        let names: Vec<String> = store
            .names()
            .filter(|n| n.starts_with("hd.") || n.starts_with("inr."))
            .cloned()
            .collect();
        for n in names {
            store.remove(&n);
        }
        let mut rng = substream(seed, "init");
        init_hd(&mut store, &mut rng, &merged.hd, &merged.inr);
        if let Some(b) = fourier_matrix(&merged.inr, seed) {
            store.insert(FOURIER_NAME, b);
        }
    }
    store.freeze("enc.");
    store.freeze("eps.");
    store.freeze("inr.");

    let model = Model {
        enc: &merged.encoder,
        hd: &merged.hd,
        inr: &merged.inr,
    };
    let h0 = inr_inputs(&store, &merged.inr, &dataset.items[0].coords)?;
    let constant = likelihood_constant(dataset.items[0].features.numel(), merged.inr.likelihood);
    let mut opt = Adam::new(merged.train.adam(Phase::HyperTransform));
    let mut rng = substream(seed, "train");
    let mut batches = Batches::new(dataset.len(), merged.train.batch_size);
    let steps = merged.train.iterations(Phase::HyperTransform);
    let mut trace = Vec::with_capacity(steps);
    for step in 0..steps {
        let idx = batches.next(&mut rng);
        let z = draw_latents(&posts, &idx, &mut rng);
        let b = idx.len();
        let mut g = Graph::new();
        let zv = g.constant(z.reshaped(&[b, merged.encoder.latent_numel()]));
        let h0v = g.constant(h0.clone());
        let targets: Vec<Tensor> = idx.iter().map(|&i| dataset.items[i].features.clone()).collect();
        let (recon, _) = decode_and_score(&mut g, &store, &model, zv, h0v, &targets)?;
        let rows: Vec<_> = recon.iter().map(|&r| g.reshape(r, &[1, 1])).collect();
        let all = g.concat_rows(&rows);
        let mean = g.mean(all);
        let nll = g.scale(mean, -1.0);
        let loss = g.offset(nll, -constant);
        let value = g.value(loss).item();
        guard(step, value)?;
        g.backward(loss);
        opt.step(&mut store, &g.param_grads());
        trace.push(TraceRow {
            step,
            loss: value,
            kl: None,
            recon: Some(-value - constant),
        });
    }
    store.unfreeze_all();
    verify_frozen(&keep, &store)?;
    Ok((
        Checkpoint {
            stage: Stage::HyperTransformed,
            config: merged,
            params: store,
        },
        trace,
    ))
}

/// A re-initialised decoder must still read the frozen encoder's latent.
fn hd_for_frozen(config: &Config, frozen: &Config) -> crate::hyperdecoder::HdConfig {
    let mut hd = config.hd.clone();
    let [c, h, w] = frozen.encoder.latent_shape();
    hd.latent_channels = c;
    hd.latent_h = h;
    hd.latent_w = w;
    hd
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorio::make_synthetic_dataset;

    fn tiny_config() -> Config {
        let text = "\
[encoder]
resolution = 8x8
base_channels = 4
ch_mult = 1,2
num_blocks = 1
latent_channels = 2
[hd]
patch_size = 2
token_dim = 16
encoder_layers = 1
decoder_layers = 1
heads = 2
head_dim = 8
feedforward_dim = 32
groups = 2
[inr]
layers = 3
hidden_dim = 8
omega = 10
[diffusion]
base_channels = 4
ch_mult = 1
num_blocks = 1
time_dim = 8
diffusion_steps = 50
[train]
batch_size = 4
iterations = 6, 6, 6
lr = 1e-3
";
        Config::parse(text).unwrap()
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let cfg = tiny_config();
        let data = make_synthetic_dataset("gaussians", 4, [8, 8], 1).unwrap();
        let (ckpt, trace) = train_stage1(&data, &cfg, 3).unwrap();
        assert_eq!(trace.len(), 6);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        save_checkpoint(&path, &ckpt).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.stage, Stage::Ivae);
        assert_eq!(back.to_bytes().unwrap(), fs::read(&path).unwrap());
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = tiny_config();
        let data = make_synthetic_dataset("gaussians", 4, [8, 8], 1).unwrap();
        let (a, ta) = train_stage1(&data, &cfg, 3).unwrap();
        let (b, tb) = train_stage1(&data, &cfg, 3).unwrap();
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
        assert_eq!(ta, tb);
        let (c, _) = train_stage1(&data, &cfg, 4).unwrap();
        assert_ne!(a.to_bytes().unwrap(), c.to_bytes().unwrap());
    }

    #[test]
    fn missing_template_is_incomplete() {
        let cfg = tiny_config();
        let data = make_synthetic_dataset("gaussians", 4, [8, 8], 1).unwrap();
        let (ivae, _) = train_stage1(&data, &cfg, 3).unwrap();
        let (mut ldmi, _) = train_stage2(&data, &ivae, &cfg, 3).unwrap();
        ldmi.params.remove("hd.template.W1");
        let err = Checkpoint::from_bytes(&ldmi.to_bytes().unwrap()).unwrap_err();
        assert_eq!(err.code(), "incomplete-checkpoint");
        assert!(err.to_string().contains("hd.template.W1"));
    }

    #[test]
    fn stage_contracts_and_freezing() {
        let cfg = tiny_config();
        let data = make_synthetic_dataset("gaussians", 4, [8, 8], 1).unwrap();
        let (ivae, _) = train_stage1(&data, &cfg, 3).unwrap();
        assert_eq!(train_stage1(&data, &cfg, 3).unwrap().0.stage, Stage::Ivae);
        assert!(matches!(
            hyper_transform(&data, &ivae, &cfg, 1, true),
            Err(Error::StageMismatch { .. })
        ));

        let (ldmi, trace) = train_stage2(&data, &ivae, &cfg, 5).unwrap();
        assert_eq!(ldmi.stage, Stage::Ldmi);
        assert!(trace.iter().all(|r| r.kl.is_none()));
        for p in ["enc.", "hd.", "inr."] {
            assert_eq!(ldmi.digest(p), ivae.digest(p));
        }
        assert!(matches!(
            train_stage2(&data, &ldmi, &cfg, 5),
            Err(Error::StageMismatch { .. })
        ));

        for reinit in [true, false] {
            let (ht, _) = hyper_transform(&data, &ldmi, &cfg, 7, reinit).unwrap();
            assert_eq!(ht.stage, Stage::HyperTransformed);
            assert_eq!(ht.digest("enc."), ldmi.digest("enc."));
            assert_eq!(ht.digest("eps."), ldmi.digest("eps."));
            assert_ne!(ht.digest("hd."), ldmi.digest("hd."));
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let mut cfg = tiny_config();
        cfg.train.lr = [0.0; 3];
        let data = make_synthetic_dataset("field", 4, [8, 8], 1).unwrap();
        let (ckpt, _) = train_stage1(&data, &cfg, 3).unwrap();
        assert_eq!(ckpt.params, {
            let mut s = reference_store(&cfg, Stage::Ivae, 3);
            s.unfreeze_all();
            s
        });
    }

    #[test]
    fn divergence_is_reported() {
        let mut cfg = tiny_config();
        cfg.inr.likelihood = crate::inr::Likelihood::Gaussian { sigma: 1e-200 };
        let data = make_synthetic_dataset("field", 4, [8, 8], 1).unwrap();
        assert!(matches!(
            train_stage1(&data, &cfg, 3),
            Err(Error::Diverged { step: 0, .. })
        ));
    }

    #[test]
    fn uniform_timestep_deciles() {
        let sched = crate::diffusion::make_schedule(1000, crate::diffusion::ScheduleKind::Linear, 1e-4, 2e-2).unwrap();
        let n = 100_000;
        let (ts, _) = crate::diffusion::draw_noising(&Tensor::zeros(&[n, 1]), &sched, &mut substream(1, "t"));
        let mut counts = [0usize; 10];
        for t in ts {
            counts[(t - 1) / 100] += 1;
        }
        let se = (0.1 * 0.9 / n as f64).sqrt();
        for c in counts {
            assert!((c as f64 / n as f64 - 0.1).abs() < 3.0 * se, "{counts:?}");
        }
    }

    #[test]
    fn smoothing_helper() {
        let losses: Vec<f64> = (0..200).map(|i| if i < 100 { 2.0 } else { 0.5 }).collect();
        assert!((smoothed_ratio(&losses, 100) - 0.25).abs() < 1e-12);
    }
}
