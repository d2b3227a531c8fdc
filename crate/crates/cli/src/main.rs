use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use vidiff_core::config::RunConfig;
use vidiff_core::net::tsr_appearnet_input;
use vidiff_core::sampler::{interpolate, sample, SamplerConfig};
use vidiff_core::study::{eval_run, write_clip_ppm, EvalOptions};
use vidiff_core::tensor::atns;
use vidiff_core::train::{make_dataset, read_dataset, write_dataset, Checkpoint, Trainer};
use vidiff_core::{verify, AppearancePrior, Scalar, Tensor, UNet3D};

#[derive(Parser, Debug)]
#[command(name = "vidiff", version, about = "Image-and-text-to-video diffusion on synthetic sprite clips")]
struct Cli {
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value_t = Precision::F32)]
    precision: Precision,
    /// Run configuration (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a sprite dataset: one ATNS file per clip plus manifest.txt.
    MakeData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write checkpoints into a directory.
    Train {
        #[arg(long)]
        out: PathBuf,
        /// Dataset directory from make-data; rendered from the config if absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from this checkpoint up to the configured step count.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        prior_lambda: Option<f64>,
    },
    /// Generate one clip from a center frame and a class id.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `[C, H, W]` ATNS tensor.
        #[arg(long)]
        center_frame: PathBuf,
        #[arg(long)]
        cond: usize,
        #[command(flatten)]
        sampling: Sampling,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the frames between two given frames with an interpolation model.
    Interpolate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        first: PathBuf,
        #[arg(long)]
        last: PathBuf,
        #[command(flatten)]
        sampling: Sampling,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample for a held-out dataset and write a metrics report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Held-out dataset directory from make-data.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        per_class: Option<usize>,
        /// Samples dumped as PPM frames.
        #[arg(long, default_value_t = 4)]
        dump: usize,
        #[command(flatten)]
        sampling: Sampling,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run verification suites; exits non-zero if any check fails.
    Verify {
        #[arg(default_value = "all")]
        suite: String,
        /// Also write the report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct Sampling {
    #[arg(long)]
    steps: Option<usize>,
    /// Classifier-free guidance scale.
    #[arg(long = "cfg")]
    guidance: Option<f64>,
    /// Defaults to the value the checkpoint was trained with.
    #[arg(long)]
    prior_lambda: Option<f64>,
    #[arg(long)]
    prior_gamma: Option<f64>,
}

impl Sampling {
    fn resolve<T: Scalar>(&self, cfg: &RunConfig, ckpt: &Checkpoint<T>) -> Result<SamplerConfig> {
        let lambda = self.prior_lambda.unwrap_or(ckpt.train.prior_lambda);
        let gamma = self.prior_gamma.unwrap_or(if lambda == 0.0 { 0.0 } else { cfg.prior_gamma });
        let sc = SamplerConfig {
            steps: self.steps.unwrap_or(cfg.sample_steps),
            guidance_scale: self.guidance.unwrap_or(cfg.guidance_scale),
            prior: AppearancePrior::new(lambda, gamma)?,
            seed: cfg.sample_seed,
            always_uncond: false,
        };
        sc.validate()?;
        Ok(sc)
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
        cfg.data_seed = seed;
    }
    Ok(cfg)
}

fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn load_tensor<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    atns::load(path).with_context(|| format!("reading tensor {}", path.display()))
}

fn save_clip<T: Scalar>(clip: &vidiff_core::VideoClip<T>, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    atns::save(out.join("clip.atns"), &clip.latent)?;
    write_clip_ppm(clip, &out.join("clip"))?;
    println!("wrote {} frames to {}", clip.frames(), out.display());
    Ok(())
}

fn train<T: Scalar>(cfg: &RunConfig, out: &Path, data: Option<&Path>, resume: Option<&Path>) -> Result<()> {
    cfg.validate()?;
    let clips = match data {
        Some(d) => read_dataset::<T>(d).with_context(|| format!("reading dataset {}", d.display()))?,
        None => make_dataset::<T>(&cfg.dataset())?,
    };
    let mut trainer = match resume {
        Some(p) => Trainer::from_checkpoint(load_checkpoint::<T>(p)?)?,
        None => Trainer::new(UNet3D::new(cfg.model.clone(), cfg.train.seed)?, cfg.train.clone(), cfg.noise_schedule()?)?,
    };
    // A resumed run trains up to the step count of the current config.
    trainer.config.steps = cfg.train.steps;
    std::fs::create_dir_all(out)?;
    let total = trainer.config.steps;
    let every = trainer.config.checkpoint_every;
    let mut acc = 0.0;
    let mut n = 0;
    while trainer.step_count() < total {
        acc += trainer.step(&clips)?;
        n += 1;
        let s = trainer.step_count();
        if s % 100 == 0 || s == total {
            println!("step {s} loss {:.6}", acc / n as f64);
            acc = 0.0;
            n = 0;
        }
        if every > 0 && s % every == 0 && s < total {
            trainer.to_checkpoint().save(out.join(format!("step_{s:07}.ckpt")))?;
        }
    }
    let path = out.join("checkpoint.ckpt");
    trainer.to_checkpoint().save(&path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run<T: Scalar>(cli: &Cli) -> Result<bool> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::MakeData { out } => {
            let data = cfg.dataset();
            data.validate()?;
            let clips = make_dataset::<T>(&data)?;
            let manifest = write_dataset(&clips, out)?;
            println!("wrote {} clips, manifest {}", clips.len(), manifest.display());
        }
        Command::Train { out, data, resume, prior_lambda } => {
            let mut cfg = cfg;
            if let Some(l) = prior_lambda {
                cfg.train.prior_lambda = *l;
            }
            train::<T>(&cfg, out, data.as_deref(), resume.as_deref())?;
        }
        Command::Sample { checkpoint, center_frame, cond, sampling, out } => {
            let ckpt = load_checkpoint::<T>(checkpoint)?;
            let sc = sampling.resolve(&cfg, &ckpt)?;
            let model = ckpt.model()?;
            let clip = sample(&model, &load_tensor(center_frame)?, *cond, &sc, &ckpt.schedule)?;
            save_clip(&clip, out)?;
        }
        Command::Interpolate { checkpoint, first, last, sampling, out } => {
            let ckpt = load_checkpoint::<T>(checkpoint)?;
            let sc = sampling.resolve(&cfg, &ckpt)?;
            let model = ckpt.model()?;
            let (first, last) = (load_tensor::<T>(first)?, load_tensor::<T>(last)?);
            // Fail early with a shape error rather than deep inside the model.
            tsr_appearnet_input(&first, &last, model.config().num_frames)?;
            let clip = interpolate(&model, &first, &last, &sc, &ckpt.schedule)?;
            save_clip(&clip, out)?;
        }
        Command::Eval { checkpoint, data, per_class, dump, sampling, out } => {
            let ckpt = load_checkpoint::<T>(checkpoint)?;
            let heldout = read_dataset::<T>(data).with_context(|| format!("reading dataset {}", data.display()))?;
            let opts = EvalOptions {
                per_class: per_class.unwrap_or(cfg.eval_per_class),
                sampler: sampling.resolve(&cfg, &ckpt)?,
                featurizer_seed: cfg.featurizer_seed,
                dump_clips: *dump,
            };
            let report = eval_run(&ckpt, &heldout, &opts, out)?;
            print!("{}", report.to_text());
        }
        Command::Verify { suite, report } => {
            let r = verify::run(suite)?;
            let text = r.to_text();
            print!("{text}");
            if let Some(p) = report {
                std::fs::write(p, &text)?;
            }
            return Ok(r.passed());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.precision {
        Precision::F32 => run::<f32>(&cli),
        Precision::F64 => run::<f64>(&cli),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn unknown_precision_is_rejected() {
        assert!(Cli::try_parse_from(["vidiff", "--precision", "f16", "verify"]).is_err());
    }
}
