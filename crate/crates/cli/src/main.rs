mod commands;
mod config;
mod ply;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use toolflow::error::Error;

/// Train and evaluate tool-flow policies on the bundled environments.
#[derive(Parser, Debug)]
#[command(name = "toolflow", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Roll out the scripted expert and store the successful episodes.
    GenDemos(GenDemosArgs),
    /// Train a policy on a demonstration file.
    Train(TrainArgs),
    /// Measure closed-loop success of checkpoints or of the expert.
    Eval(EvalArgs),
    /// Record one episode of a checkpoint or of the expert.
    Rollout(RolloutArgs),
    /// Write a checkpoint's predicted tool flow as an ASCII PLY file.
    ExportFlow(ExportFlowArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug, Default)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long, short = 'c', value_name = "FILE")]
    config: Option<PathBuf>,
    /// Set any configuration key; may be repeated.
    #[arg(long = "set", short = 's', value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Default)]
struct EpisodeFlags {
    /// sphere-reach or dock-pose.
    #[arg(long)]
    env: Option<String>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    points_per_body: Option<usize>,
    #[arg(long)]
    distance_lo: Option<f64>,
    #[arg(long)]
    distance_hi: Option<f64>,
}

#[derive(Args, Debug)]
struct GenDemosArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    episode: EpisodeFlags,
    /// Number of expert episodes to attempt.
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    /// Output JSONL file; provenance and config are written next to it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Demonstration JSONL file.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// dense-flow or direct-vector.
    #[arg(long)]
    policy: Option<String>,
    /// Rotation representation of direct-vector policies.
    #[arg(long)]
    repr: Option<String>,
    /// combo, pm-only, mse, mse-after-svd or pm-before-svd.
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    seeds: Option<usize>,
    /// Decoder sees only the pooled feature.
    #[arg(long)]
    no_skip: bool,
    /// on or off.
    #[arg(long, value_name = "on|off")]
    clamp_svd: Option<String>,
    /// Train up to this many seeds at once.
    #[arg(long)]
    parallel_seeds: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    episode: EpisodeFlags,
    /// May be repeated; each checkpoint counts as one seed.
    #[arg(long)]
    checkpoint: Vec<PathBuf>,
    /// Evaluate the scripted expert instead of a checkpoint.
    #[arg(long)]
    expert: bool,
    /// Demonstration file whose success rate normalizes the result.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    eval_configs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RolloutArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    episode_flags: EpisodeFlags,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    expert: bool,
    /// Index of the held-out start configuration.
    #[arg(long)]
    episode: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExportFlowArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// JSONL file of observations (demonstrations or a rollout).
    #[arg(long)]
    observation: Option<PathBuf>,
    /// Line of the observation file to use.
    #[arg(long)]
    index: Option<usize>,
    /// Export every n-th tool point.
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
    /// Random cases per component.
    #[arg(long)]
    cases: Option<usize>,
    #[arg(long)]
    h: Option<f64>,
    /// on or off.
    #[arg(long, value_name = "on|off")]
    clamp_svd: Option<String>,
    /// Also run the alignment backward pass on a degenerate cube.
    #[arg(long)]
    degenerate: bool,
    /// Also write the report to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Flag values as configuration assignments.
struct Overrides(Vec<(String, String)>);

impl Overrides {
    fn new() -> Self {
        Overrides(Vec::new())
    }

    fn add<T: ToString>(&mut self, key: &str, value: &Option<T>) -> &mut Self {
        if let Some(v) = value {
            self.0.push((key.to_string(), v.to_string()));
        }
        self
    }

    fn path(&mut self, key: &str, value: &Option<PathBuf>) -> &mut Self {
        let v = value.as_ref().map(|p| p.display().to_string());
        self.add(key, &v)
    }

    fn switch(&mut self, key: &str, on: bool, value: &str) -> &mut Self {
        if on {
            self.0.push((key.to_string(), value.to_string()));
        }
        self
    }

    fn episode(&mut self, e: &EpisodeFlags) -> &mut Self {
        self.add("env", &e.env)
            .add("horizon", &e.horizon)
            .add("points_per_body", &e.points_per_body)
            .add("distance_lo", &e.distance_lo)
            .add("distance_hi", &e.distance_hi)
    }
}

fn resolve(mut settings: config::Settings, common: &Common, flags: Overrides) -> Result<config::Settings, Error> {
    if let Some(path) = &common.config {
        settings.merge_file(path)?;
    }
    settings.merge_seed_var(std::env::var(config::SEED_VAR).ok())?;
    if let Some(seed) = common.seed {
        settings.set("seed", seed.to_string())?;
    }
    settings.merge(flags.0)?;
    settings.merge_assignments(&common.set)?;
    Ok(settings)
}

fn run(command: Command) -> Result<u8, Error> {
    match command {
        Command::GenDemos(a) => {
            let mut o = Overrides::new();
            o.episode(&a.episode)
                .add("episodes", &a.episodes)
                .add("noise_sigma", &a.noise_sigma)
                .path("out", &a.out);
            commands::gen_demos(&resolve(commands::gen_demos_defaults(), &a.common, o)?).map(|()| 0)
        }
        Command::Train(a) => {
            let mut o = Overrides::new();
            o.path("data", &a.data)
                .path("out_dir", &a.out_dir)
                .add("policy", &a.policy)
                .add("repr", &a.repr)
                .add("loss", &a.loss)
                .add("lambda", &a.lambda)
                .add("lr", &a.lr)
                .add("epochs", &a.epochs)
                .add("eval_every", &a.eval_every)
                .add("seeds", &a.seeds)
                .switch("use_skip", a.no_skip, "false")
                .add("clamp_svd", &a.clamp_svd)
                .add("parallel_seeds", &a.parallel_seeds);
            commands::train(&resolve(commands::train_defaults(), &a.common, o)?).map(|()| 0)
        }
        Command::Eval(a) => {
            let mut o = Overrides::new();
            let checkpoints = (!a.checkpoint.is_empty()).then(|| {
                a.checkpoint
                    .iter()
                    .map(|p| p.display().to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            });
            o.episode(&a.episode)
                .add("checkpoint", &checkpoints)
                .switch("expert", a.expert, "true")
                .path("data", &a.data)
                .add("eval_configs", &a.eval_configs)
                .path("out", &a.out);
            commands::eval(resolve(commands::eval_defaults(), &a.common, o)?).map(|()| 0)
        }
        Command::Rollout(a) => {
            let mut o = Overrides::new();
            o.episode(&a.episode_flags)
                .path("checkpoint", &a.checkpoint)
                .switch("expert", a.expert, "true")
                .add("episode", &a.episode)
                .path("out", &a.out);
            commands::rollout(resolve(commands::rollout_defaults(), &a.common, o)?).map(|()| 0)
        }
        Command::ExportFlow(a) => {
            let mut o = Overrides::new();
            o.path("checkpoint", &a.checkpoint)
                .path("observation", &a.observation)
                .add("index", &a.index)
                .add("stride", &a.stride)
                .path("out", &a.out);
            commands::export_flow(&resolve(commands::export_flow_defaults(), &a.common, o)?).map(|()| 0)
        }
        Command::Gradcheck(a) => {
            let mut o = Overrides::new();
            o.add("cases", &a.cases)
                .add("h", &a.h)
                .add("clamp_svd", &a.clamp_svd)
                .switch("degenerate", a.degenerate, "true")
                .path("out", &a.out);
            commands::gradcheck(&resolve(commands::gradcheck_defaults(), &a.common, o)?)
        }
    }
}

/// 0 success, 64 usage, 2 data, 3 checkpoint, 4 numeric.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::BadConfig(_) => 64,
        Error::CheckpointMismatch(_) => 3,
        e if e.is_numeric() => 4,
        Error::StaleCache | Error::EpisodeOver { .. } => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 64 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
