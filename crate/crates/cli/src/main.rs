use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use dvq::commands::{self, SynthArgs};
use dvq::config::RunConfig;
use dvq::model::{BottleneckKind, CodebookMode};
use dvq::quantizer::Metric;

/// Decomposed vector-quantized autoencoders for semi-supervised text
/// classification.
#[derive(Parser, Debug)]
#[command(name = "dvq", version)]
struct Cli {
    /// Flat TOML run configuration; flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pretrain the autoencoder and write a checkpoint.
    #[command(allow_negative_numbers = true)]
    Pretrain(Overrides),
    /// Train the classifier head on a labeled fraction with the encoder frozen.
    #[command(allow_negative_numbers = true)]
    Classify(Overrides),
    /// Report metrics on the held-out split.
    #[command(allow_negative_numbers = true)]
    Eval(Overrides),
    /// Per-sub-encoder utilization and loss breakdown, one JSON record per line.
    #[command(allow_negative_numbers = true)]
    Diagnose(Overrides),
    /// Write a synthetic class corpus as JSONL.
    Synth(SynthOpts),
}

#[derive(Args, Debug, Default)]
struct Overrides {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_parser = ["regular", "ema"])]
    codebook_mode: Option<String>,
    #[arg(long, value_parser = ["dvq", "vq", "gumbel", "semhash"])]
    bottleneck: Option<String>,
    #[arg(long)]
    labeled_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = ["l1", "l2"])]
    metric: Option<String>,
    #[arg(long)]
    n_sub_encoders: Option<usize>,
    #[arg(long)]
    codebook_size: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    clip_threshold: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args, Debug)]
struct SynthOpts {
    /// Output JSONL path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    num_classes: usize,
    #[arg(long, default_value_t = 32)]
    vocab_size: usize,
    #[arg(long, default_value_t = 16)]
    seq_len: usize,
    #[arg(long, default_value_t = 500)]
    per_class: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

fn parse_enum<T: serde::de::DeserializeOwned>(s: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).with_context(|| format!("invalid value `{s}`"))
}

fn resolve(config: Option<&PathBuf>, o: Overrides) -> Result<RunConfig> {
    let mut c = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    macro_rules! set {
        ($($f:ident),*) => { $( if let Some(v) = o.$f { c.$f = v.into(); } )* };
    }
    set!(
        lr,
        labeled_fraction,
        seed,
        n_sub_encoders,
        codebook_size,
        alpha,
        beta,
        clip_threshold,
        epochs,
        batch_size
    );
    if o.data.is_some() {
        c.data = o.data;
    }
    if o.checkpoint.is_some() {
        c.checkpoint = o.checkpoint;
    }
    if o.log.is_some() {
        c.log = o.log;
    }
    if let Some(m) = o.codebook_mode {
        c.codebook_mode = parse_enum::<CodebookMode>(&m)?;
    }
    if let Some(b) = o.bottleneck {
        c.bottleneck = parse_enum::<BottleneckKind>(&b)?;
    }
    if let Some(m) = o.metric {
        c.metric = parse_enum::<Metric>(&m)?;
    }
    c.validate()?;
    Ok(c)
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string(v)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg_path = cli.config.as_ref();
    match cli.command {
        Command::Pretrain(o) => {
            let r = commands::pretrain(&resolve(cfg_path, o)?)?;
            print_json(&r.final_eval)
        }
        Command::Classify(o) => {
            let r = commands::classify(&resolve(cfg_path, o)?)?;
            print_json(&serde_json::json!({
                "labeled_examples": r.labeled_examples,
                "train": r.train,
                "test": r.test,
            }))
        }
        Command::Eval(o) => {
            let r = commands::eval(&resolve(cfg_path, o)?)?;
            print_json(&serde_json::json!({
                "classification": r.classification,
                "reconstruction": r.reconstruction,
            }))
        }
        Command::Diagnose(o) => {
            let r = commands::diagnose(&resolve(cfg_path, o)?)?;
            for line in r.to_jsonl()? {
                println!("{line}");
            }
            Ok(())
        }
        Command::Synth(s) => {
            let n = commands::synth(
                SynthArgs {
                    num_classes: s.num_classes,
                    vocab_size: s.vocab_size,
                    seq_len: s.seq_len,
                    per_class: s.per_class,
                    seed: s.seed,
                },
                &s.out,
            )?;
            print_json(&serde_json::json!({ "records": n, "path": s.out }))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DVQ_LOG", "warn")).init();
    let defaults = format!(
        "Configuration keys and defaults (TOML, also accepted via --config):\n\n{}\nLog verbosity: DVQ_LOG=error|warn|info|debug|trace",
        RunConfig::default().to_toml_string()
    );
    let matches = Cli::command().after_long_help(defaults).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match e.downcast_ref::<dvq::Error>() {
                Some(dvq::Error::Config(msgs)) => {
                    eprintln!("error: invalid configuration");
                    for m in msgs {
                        eprintln!("  - {m}");
                    }
                }
                _ => eprintln!("error: {e:#}"),
            }
            ExitCode::FAILURE
        }
    }
}
