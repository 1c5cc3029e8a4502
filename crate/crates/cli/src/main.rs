use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use trajflow::rae::RaeModel;
use trajflow::sampler::SolverConfig;

use trajflow_cli::ablate::{ablate, Arm};
use trajflow_cli::commands::{
    dataset_or_generate, default_sample_log, eval_stage, gen_data, pipeline, sample, train_lfm_stage,
    train_rae_stage, SampleArgs, SampleTarget,
};
use trajflow_cli::error::StageExt;
use trajflow_cli::toy::{run_toy, ToyConfig};
use trajflow_cli::{CliError, CliResult, RunConfig};

#[derive(Parser)]
#[command(name = "trajflow", version, about = "Latent degradation trajectories with spline flow matching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic multi-scale dataset.
    GenData {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and freeze the residual autoencoder.
    TrainRae {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the velocity field against a frozen RAE.
    TrainLfm {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        rae: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Dataset directory; regenerated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Move an HR image along its trajectory.
    Sample {
        #[arg(long)]
        lfm: PathBuf,
        #[arg(long)]
        rae: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Degradation scale, mapped to a time through the training scales.
        #[arg(long, conflicts_with = "t", required_unless_present = "t")]
        scale: Option<f64>,
        /// Normalized time in [0, 1].
        #[arg(long)]
        t: Option<f64>,
        /// Solver settings come from the config's `sampler` section.
        #[arg(long)]
        config: Option<PathBuf>,
        /// CSV log to append to; defaults to samples.csv beside --out.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// PSNR-vs-time sweep against the held-out scales.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        rae: PathBuf,
        #[arg(long)]
        lfm: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// gen-data, train-rae, train-lfm and eval into one directory.
    Pipeline {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// One pipeline run per arm, merged into ablation.csv.
    Ablate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
        /// e.g. `trajectory=linear,perceptual=taylor3,skips=on`; repeatable.
        #[arg(long = "arm", required = true)]
        arms: Vec<String>,
    },
    /// Flow matching on 2-D synthetic trajectories.
    Toy {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Toy settings (JSON); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn load_toy(path: &Path) -> CliResult<ToyConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de)
        .map_err(|e| CliError::Config(format!("{}: key '{}': {}", path.display(), e.path(), e.inner())))
}

fn run(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::GenData { config, out } => {
            let cfg = RunConfig::load(&config.config)?;
            let ds = gen_data(&cfg, &out)?;
            cfg.echo(&out)?;
            println!("wrote {} scenes to {}", ds.scenes.len(), out.display());
        }
        Command::TrainRae { config, data, out } => {
            let cfg = RunConfig::load(&config.config)?;
            let ds = trajflow::degsim::Dataset::load(&data).stage("load-data")?;
            train_rae_stage(&cfg, &ds, &out)?;
            cfg.echo(&out)?;
            println!("saved RAE to {}", out.display());
        }
        Command::TrainLfm { config, rae, out, data } => {
            let cfg = RunConfig::load(&config.config)?;
            let model = RaeModel::load(&rae).stage("train-lfm")?;
            if model.latent_dim() != cfg.lfm.field.latent_dim {
                return Err(CliError::Config(format!(
                    "key 'lfm.field.latent_dim': {} does not match {} latent width {}",
                    cfg.lfm.field.latent_dim,
                    rae.display(),
                    model.latent_dim()
                )));
            }
            let ds = dataset_or_generate(&cfg, data.as_deref())?;
            train_lfm_stage(&cfg, &model, &ds, &out)?;
            cfg.echo(&out)?;
            println!("saved velocity field to {}", out.display());
        }
        Command::Sample { lfm, rae, input, out, scale, t, config, log } => {
            let solver = match &config {
                Some(p) => RunConfig::load(p)?.sampler,
                None => SolverConfig::default(),
            };
            let target = match (scale, t) {
                (_, Some(t)) => SampleTarget::Time(t),
                (Some(s), None) => SampleTarget::Scale(s),
                (None, None) => return Err(CliError::Config("pass --scale or --t".into())),
            };
            let log = log.unwrap_or_else(|| default_sample_log(&out));
            let outcome = sample(&SampleArgs {
                rae: &rae,
                lfm: &lfm,
                input: &input,
                out: &out,
                target,
                solver: &solver,
                log: &log,
            })?;
            println!("t={:.6} nfe={} seconds={:.6}", outcome.t, outcome.nfe, outcome.seconds);
        }
        Command::Eval { config, rae, lfm, data, out } => {
            let cfg = RunConfig::load(&config.config)?;
            let rae = RaeModel::load(&rae).stage("eval")?;
            let field = trajflow::lfm::VelocityField::load(&lfm).stage("eval")?;
            let ds = dataset_or_generate(&cfg, data.as_deref())?;
            cfg.echo(&out)?;
            let report = eval_stage(&cfg, &rae, &field, &ds, &out)?;
            for &s in &report.scales {
                if let Some(m) = report.argmax(s) {
                    println!("scale {s}: argmax t={:.2} psnr={:.3}", m.t, m.psnr);
                }
            }
        }
        Command::Pipeline { config, out } => {
            let cfg = RunConfig::load(&config.config)?;
            let result = pipeline(&cfg, &out)?;
            for &s in &result.report.scales {
                if let Some(m) = result.report.argmax(s) {
                    println!("scale {s}: argmax t={:.2} psnr={:.3}", m.t, m.psnr);
                }
            }
        }
        Command::Ablate { config, out, arms } => {
            let cfg = RunConfig::load(&config.config)?;
            let arms = arms.iter().map(|a| a.parse::<Arm>()).collect::<CliResult<Vec<_>>>()?;
            for r in ablate(&cfg, &arms, &out)? {
                println!(
                    "{} scale {}: held-out {:.3} dB, argmax t={:.2}",
                    r.arm, r.scale, r.heldout_psnr, r.argmax_t
                );
            }
        }
        Command::Toy { seed, out, config } => {
            let cfg = match &config {
                Some(p) => load_toy(p)?,
                None => ToyConfig::default(),
            };
            let r = run_toy(&cfg, seed, &out)?;
            println!(
                "velocity error {:.6}, worst knot error {:.6}",
                r.mean_velocity_error, r.max_knot_error
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    trajflow_cli::init_threads_from_env();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
