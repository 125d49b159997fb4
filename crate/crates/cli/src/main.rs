use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "nanoinv", version, about = "Nanoparticle structure recovery from PDFs")]
struct Cli {
    /// Profile name: desk, paper, or a `[profile.<name>]` section of --config.
    #[arg(long, global = true, default_value = "desk")]
    profile: String,

    /// Config file with profile overrides and dataset settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the profile (and dataset) seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Log verbosity; repeat for more.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate structures or simulated PDFs.
    #[command(subcommand)]
    Gen(GenCommand),
    /// Train one model stage.
    Train(TrainArgs),
    /// Pick a skip plan on held-out samples.
    TuneSkip(TuneArgs),
    /// Predict structures for one PDF file or a directory of them.
    Predict(PredictArgs),
    /// Recover coordinates from a Laplacian matrix file.
    Recover(RecoverArgs),
    /// Score predicted PDFs against reference PDFs.
    Eval(EvalArgs),
}

#[derive(Subcommand, Debug)]
enum GenCommand {
    Structures {
        /// Config file with a `[dataset]` section.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    Pdf {
        /// Dataset directory written by `gen structures`.
        #[arg(long = "in")]
        input: PathBuf,
    },
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum StageArg {
    Cvae,
    Xvae,
    Ddm,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(value_enum)]
    stage: StageArg,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Condition-VAE checkpoint (needed by xvae and ddm).
    #[arg(long)]
    cvae: Option<PathBuf>,
    /// Latent-VAE checkpoint (needed by ddm).
    #[arg(long)]
    xvae: Option<PathBuf>,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum SplitArg {
    Train,
    Val,
    All,
}

#[derive(Args, Debug)]
struct TuneArgs {
    /// Grid file: `t1 t2` lines or `t1=a:b[:step] t2=c:d[:step]`.
    #[arg(long)]
    grid: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Directory holding cvae.ckpt, xvae.ckpt and ddm.ckpt.
    #[arg(long)]
    ckpt_dir: PathBuf,
    /// Plan file to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(short, default_value_t = 8)]
    k: usize,
    #[arg(long, default_value_t = nanoinv::pipeline::plan::DEFAULT_SLACK)]
    slack: f64,
    /// Blend source for the skip step: noised or clean.
    #[arg(long, default_value = "noised")]
    blend: String,
    #[arg(long, value_enum, default_value = "val")]
    split: SplitArg,
}

#[derive(Args, Debug)]
struct PredictArgs {
    /// A PDF file or a directory of `.gr` files.
    #[arg(long)]
    pdf: PathBuf,
    #[arg(short, default_value_t = 8)]
    k: usize,
    /// Plan file from tune-skip; the full chain when omitted.
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    ckpt_dir: PathBuf,
}

#[derive(Args, Debug)]
struct RecoverArgs {
    #[arg(long)]
    laplacian: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Directory of predicted `<stem>.gr` files.
    #[arg(long)]
    pred: PathBuf,
    /// Reference PDFs: a directory of `.gr` files or a dataset directory.
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    report: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            eprintln!("{}", text.lines().next().unwrap_or("invalid arguments"));
            return ExitCode::from(2);
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
