//! Command-line driver for the zero-shot coding pipeline.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use zscode::generation::Method;
use zscode::pipeline::{ExperimentManifest, Row, RunConfig, Workspace, ROOT_ENV};
use zscode::Error;

#[derive(Parser, Debug)]
#[command(name = "zscode", version, about = "Generative zero-shot multi-label text coding")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Artifact root directory.
    #[arg(long, global = true, env = ROOT_ENV, default_value = "artifacts")]
    root: PathBuf,
    /// TOML configuration file layered over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Starting hyperparameters: `full` or `desk`.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Override one setting, e.g. `--set gan.epochs=20`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
}

#[derive(Args, Debug)]
struct GanArgs {
    /// Loss combination, e.g. `wganz+key`.
    #[arg(long)]
    method: Method,
    /// Replicate index; selects the derived seed and run directory.
    #[arg(long, default_value_t = 0)]
    replicate: u32,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a seeded synthetic corpus, hierarchy and word vectors.
    GenSynthetic,
    /// Tokenize the corpus and build train/valid/test splits.
    Prepare,
    /// Train the label-wise attentive feature extractor.
    TrainExtractor,
    /// Dump per-code training features and keyword sets.
    DumpFeatures,
    /// Train a conditional feature generator.
    TrainGan(GanArgs),
    /// Generate features for codes without training examples.
    Synthesize(GanArgs),
    /// Fine-tune zero-shot classifiers on generated features.
    Finetune(GanArgs),
    /// Train the meta-embedding baseline head.
    TrainMeta {
        #[arg(long, default_value_t = 0)]
        replicate: u32,
    },
    /// Score the test split and report per-cohort metrics.
    Evaluate {
        /// `baseline`, `meta` or a generator method.
        #[arg(long)]
        method: Row,
        #[arg(long, default_value_t = 0)]
        replicate: u32,
    },
    /// Run a method end to end over several seeds and report mean ± sd.
    ReproduceTable {
        /// `baseline`, `meta` or a generator method.
        #[arg(long)]
        method: Row,
        /// Number of seeds; defaults to the configured count.
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Print the effective configuration as TOML.
    ShowConfig,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::MissingPrerequisite { .. } => 3,
        Error::Divergence(_) => 4,
        _ => 1,
    }
}

fn summary(m: &ExperimentManifest) -> String {
    let files: Vec<&str> = m.outputs.iter().map(|f| f.path.as_str()).collect();
    format!("{}: wrote {}", m.stage, files.join(", "))
}

fn run(cli: Cli) -> zscode::Result<String> {
    let g = &cli.global;
    let mut overrides = g.overrides.clone();
    if let Some(seed) = g.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Command::ReproduceTable { seeds: Some(n), .. } = &cli.command {
        overrides.push(format!("seeds={n}"));
    }
    let config = RunConfig::load(g.preset.as_deref(), g.config.as_deref(), &overrides)?;
    let ws = Workspace::new(&g.root, config);
    Ok(match cli.command {
        Command::GenSynthetic => summary(&ws.gen_synthetic()?),
        Command::Prepare => summary(&ws.prepare()?),
        Command::TrainExtractor => summary(&ws.train_extractor()?),
        Command::DumpFeatures => summary(&ws.dump_features()?),
        Command::TrainGan(a) => summary(&ws.train_gan(a.replicate, a.method)?),
        Command::Synthesize(a) => summary(&ws.synthesize(a.replicate, a.method)?),
        Command::Finetune(a) => summary(&ws.finetune(a.replicate, a.method)?),
        Command::TrainMeta { replicate } => summary(&ws.train_meta(replicate)?),
        Command::Evaluate { method, replicate } => ws.evaluate(replicate, method)?.render(),
        Command::ReproduceTable { method, .. } => {
            let result = ws.reproduce_table(method)?;
            format!(
                "{} over {} seeds\n{}",
                method,
                result.reports.len(),
                result.summary.render()
            )
        }
        Command::ShowConfig => ws.config().to_toml()?,
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.global.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(out) => {
            print!("{out}");
            if !out.ends_with('\n') {
                println!();
            }
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
