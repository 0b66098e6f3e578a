//! `ldmi` command-line driver.
//!
//! Every subcommand writes its artifacts into `--out DIR`. Failures print a
//! single `error: <code>: <message>` line to stderr; usage and
//! configuration errors exit with 2, runtime failures with 1.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ldmi::config::Config;
use ldmi::hyperdecoder::param_accounting;
use ldmi::pipeline::{
    hyper_transform, load_checkpoint, save_checkpoint, train_stage1, train_stage2, write_trace_csv, Checkpoint,
    TraceRow,
};
use ldmi::tasks::{self, ResolutionScale};
use ldmi::tensorio::{make_synthetic_dataset, Dataset, Mask, Signal};
use ldmi::Error;

pub const CHECKPOINT_FILE: &str = "checkpoint.ldmk";
pub const DATASET_FILE: &str = "dataset.ldmi";

#[derive(Parser, Debug)]
#[command(
    name = "ldmi",
    version,
    about = "Latent diffusion over implicit neural representations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    GenData(GenData),
    /// Stage 1: train encoder and hyper-decoder.
    TrainIvae(TrainIvae),
    /// Stage 2: train the latent denoiser on a frozen stage-1 checkpoint.
    TrainDiffusion(TrainDiffusion),
    /// Train a hyper-decoder against a frozen encoder and denoiser.
    HyperTransform(HyperTransform),
    /// Draw samples and render them at a chosen resolution.
    Sample(Sample),
    /// Encode and decode a dataset, reporting PSNR.
    Reconstruct(Reconstruct),
    /// Complete the missing region of one signal.
    Inpaint(Inpaint),
    /// Describe a checkpoint or a config.
    Inspect(Inspect),
}

#[derive(Args, Debug)]
struct Common {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GenData {
    #[arg(long, default_value = "gaussians")]
    kind: String,
    #[arg(long, default_value_t = 64)]
    n: usize,
    #[arg(long, default_value = "16x16")]
    resolution: String,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct TrainIvae {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Overrides `[train] kl_weight`.
    #[arg(long, allow_hyphen_values = true)]
    kl_weight: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct TrainDiffusion {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    iterations: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct HyperTransform {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Fine-tune the checkpoint's decoder instead of a fresh one.
    #[arg(long)]
    keep_hd: bool,
    #[arg(long)]
    iterations: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct Sample {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long, default_value = "1")]
    scale: String,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value_t = 0.0)]
    eta: f64,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct Reconstruct {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "1")]
    scale: String,
    /// Decode a posterior draw instead of the posterior mean.
    #[arg(long)]
    draw: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct Inpaint {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Dataset item to complete.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// P5 mask: 0 = missing, 255 = observed.
    #[arg(long)]
    mask: PathBuf,
    #[arg(long, default_value_t = 2)]
    n: usize,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct Inspect {
    #[arg(long, required_unless_present = "config")]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

struct Failure {
    code: i32,
    kind: String,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidConfig(_) => 2,
            _ => 1,
        };
        let message = match &e {
            Error::InvalidConfig(m) => m.clone(),
            other => other.to_string(),
        };
        Failure {
            code,
            kind: e.code().to_string(),
            message,
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        kind: "usage".into(),
        message: message.into(),
    }
}

type Outcome = std::result::Result<(), Failure>;

fn load_config(path: Option<&Path>) -> Result<Config, Failure> {
    match path {
        None => Ok(Config::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(Error::from)?;
            Ok(Config::parse(&text)?)
        }
    }
}

fn parse_resolution(s: &str) -> Result<[usize; 2], Failure> {
    let parts: Vec<&str> = s.split(['x', 'X']).collect();
    match parts.as_slice() {
        [h, w] => match (h.parse(), w.parse()) {
            (Ok(h), Ok(w)) => Ok([h, w]),
            _ => Err(usage(format!("bad resolution {s:?}"))),
        },
        _ => Err(usage(format!("bad resolution {s:?}, expected HxW"))),
    }
}

fn parse_scale(s: &str) -> Result<ResolutionScale, Failure> {
    ResolutionScale::parse(s).map_err(|e| usage(e.to_string()))
}

fn prepare_out(dir: &Path) -> Outcome {
    fs::create_dir_all(dir).map_err(Error::from)?;
    Ok(())
}

fn write_training(out: &Path, ckpt: &Checkpoint, trace: &[TraceRow]) -> Outcome {
    save_checkpoint(out.join(CHECKPOINT_FILE), ckpt)?;
    write_trace_csv(out.join("loss.csv"), trace)?;
    fs::write(out.join("config.txt"), ckpt.config.serialize()).map_err(Error::from)?;
    Ok(())
}

fn run_command(cmd: Command, stdout: &mut dyn Write) -> Outcome {
    match cmd {
        Command::GenData(a) => {
            let res = parse_resolution(&a.resolution)?;
            let data = make_synthetic_dataset(&a.kind, a.n, res, a.common.seed)?;
            prepare_out(&a.common.out)?;
            data.save(a.common.out.join(DATASET_FILE))?;
            let previews: Vec<_> = data.items.iter().take(8).map(Signal::to_image).collect();
            tasks::write_images(&a.common.out, "preview", &previews)?;
            tasks::write_manifest(
                &a.common.out,
                &[
                    ("command", "gen-data".into()),
                    ("kind", a.kind.clone()),
                    ("n", a.n.to_string()),
                    ("resolution", format!("{}x{}", res[0], res[1])),
                    ("seed", a.common.seed.to_string()),
                ],
            )?;
        }
        Command::TrainIvae(a) => {
            let mut cfg = load_config(a.config.as_deref())?;
            if let Some(k) = a.kl_weight {
                cfg.set_key("train", "kl_weight", &k.to_string())?;
            }
            if let Some(n) = a.iterations {
                cfg.train.iterations[0] = n;
            }
            cfg.validate()?;
            let data = Dataset::load(&a.data)?;
            let (ckpt, trace) = train_stage1(&data, &cfg, a.common.seed)?;
            prepare_out(&a.common.out)?;
            write_training(&a.common.out, &ckpt, &trace)?;
        }
        Command::TrainDiffusion(a) => {
            let ivae = load_checkpoint(&a.ckpt)?;
            let mut cfg = match a.config.as_deref() {
                Some(p) => load_config(Some(p))?,
                None => ivae.config.clone(),
            };
            if let Some(n) = a.iterations {
                cfg.train.iterations[1] = n;
            }
            let data = Dataset::load(&a.data)?;
            let (ckpt, trace) = train_stage2(&data, &ivae, &cfg, a.common.seed)?;
            prepare_out(&a.common.out)?;
            write_training(&a.common.out, &ckpt, &trace)?;
        }
        Command::HyperTransform(a) => {
            let frozen = load_checkpoint(&a.ckpt)?;
            let mut cfg = match a.config.as_deref() {
                Some(p) => load_config(Some(p))?,
                None => frozen.config.clone(),
            };
            if let Some(n) = a.iterations {
                cfg.train.iterations[2] = n;
            }
            let data = Dataset::load(&a.data)?;
            let (ckpt, trace) = hyper_transform(&data, &frozen, &cfg, a.common.seed, !a.keep_hd)?;
            prepare_out(&a.common.out)?;
            write_training(&a.common.out, &ckpt, &trace)?;
        }
        Command::Sample(a) => {
            let scale = parse_scale(&a.scale)?;
            let ckpt = load_checkpoint(&a.ckpt)?;
            let s = tasks::sample(&ckpt, a.n, scale, a.steps, a.eta, a.common.seed)?;
            prepare_out(&a.common.out)?;
            if a.n == 0 {
                return Ok(());
            }
            tasks::write_images(&a.common.out, "sample", &s.images)?;
            tasks::write_manifest(
                &a.common.out,
                &[
                    ("command", "sample".into()),
                    ("n", a.n.to_string()),
                    ("scale", scale.to_string()),
                    ("steps", a.steps.to_string()),
                    ("eta", a.eta.to_string()),
                    ("seed", a.common.seed.to_string()),
                ],
            )?;
        }
        Command::Reconstruct(a) => {
            let scale = parse_scale(&a.scale)?;
            let ckpt = load_checkpoint(&a.ckpt)?;
            let data = Dataset::load(&a.data)?;
            let refs: Vec<&Signal> = data.items.iter().collect();
            let rec = tasks::reconstruct(&ckpt, &refs, scale, a.draw.then_some(a.common.seed))?;
            prepare_out(&a.common.out)?;
            tasks::write_images(&a.common.out, "recon", &rec.images)?;
            fs::write(a.common.out.join("psnr.txt"), rec.psnr.to_kv()).map_err(Error::from)?;
            tasks::write_manifest(
                &a.common.out,
                &[
                    ("command", "reconstruct".into()),
                    ("scale", scale.to_string()),
                    ("draw", a.draw.to_string()),
                    ("seed", a.common.seed.to_string()),
                ],
            )?;
            writeln!(stdout, "psnr_db={}", rec.psnr).map_err(Error::from)?;
        }
        Command::Inpaint(a) => {
            let ckpt = load_checkpoint(&a.ckpt)?;
            let data = Dataset::load(&a.data)?;
            let signal = data
                .items
                .get(a.index)
                .ok_or_else(|| usage(format!("index {} outside dataset of {}", a.index, data.len())))?;
            let mask = Mask::load(&a.mask)?;
            let c = tasks::inpaint(&ckpt, signal, &mask, a.n, a.common.seed)?;
            prepare_out(&a.common.out)?;
            tasks::write_images(&a.common.out, "inpaint", &c.images)?;
            let report: String = c
                .observed_mse
                .iter()
                .zip(&c.unobserved_mse)
                .enumerate()
                .map(|(i, (o, u))| format!("sample_{i:04}.observed_mse={o}\nsample_{i:04}.unobserved_mse={u}\n"))
                .collect();
            fs::write(a.common.out.join("consistency.txt"), report).map_err(Error::from)?;
            tasks::write_manifest(
                &a.common.out,
                &[
                    ("command", "inpaint".into()),
                    ("index", a.index.to_string()),
                    ("n", a.n.to_string()),
                    ("seed", a.common.seed.to_string()),
                ],
            )?;
        }
        Command::Inspect(a) => {
            let (config, ckpt) = match &a.ckpt {
                Some(p) => {
                    let ckpt = load_checkpoint(p)?;
                    (ckpt.config.clone(), Some(ckpt))
                }
                None => (load_config(a.config.as_deref())?, None),
            };
            let w = |stdout: &mut dyn Write, line: String| writeln!(stdout, "{line}").map_err(Error::from);
            let acc = param_accounting(&config.hd, &config.inr);
            if let Some(ckpt) = &ckpt {
                w(stdout, format!("stage={}", ckpt.stage))?;
                for (name, t) in ckpt.params.iter() {
                    let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
                    w(stdout, format!("tensor {name} [{}]", dims.join(",")))?;
                }
                for p in ["enc.", "hd.", "eps.", "inr."] {
                    w(
                        stdout,
                        format!("params.{}={}", p.trim_end_matches('.'), ckpt.params.count(p)),
                    )?;
                }
            }
            w(stdout, format!("hd_params={}", acc.hd_params))?;
            w(stdout, format!("inr_weights={}", acc.inr_weights))?;
            w(stdout, format!("inr_biases={}", acc.inr_biases))?;
            w(stdout, format!("inr_weights_per_hd_param={:.4}", acc.ratio()))?;
            let [c, h, wd] = config.encoder.latent_shape();
            w(stdout, format!("latent={c}x{h}x{wd}"))?;
            w(stdout, format!("latent_numel={}", c * h * wd))?;
        }
    }
    Ok(())
}

/// Runs the CLI with explicit output streams; returns the exit code.
pub fn run(argv: &[String], stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(stdout, "{e}");
                return 0;
            }
            let first = e
                .to_string()
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ")
                .to_string();
            let _ = writeln!(stderr, "error: usage: {first}");
            return 2;
        }
    };
    match run_command(cli.command, stdout) {
        Ok(()) => 0,
        Err(f) => {
            let _ = writeln!(stderr, "error: {}: {}", f.kind, f.message.replace('\n', " "));
            f.code
        }
    }
}

/// Entry point used by the binary: real stdout/stderr.
pub fn cli_dispatch(argv: &[String]) -> i32 {
    let mut out = std::io::stdout().lock();
    let mut err = std::io::stderr().lock();
    run(argv, &mut out, &mut err)
}
