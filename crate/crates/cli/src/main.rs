mod bench;
mod commands;
mod manifest;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::bench::BenchArgs;
use crate::commands::{
    DumpFeaturesArgs, EqualizeArgs, EvalArgs, GenArgs, GradcheckArgs, TrainArgs,
};

/// Segmentation under fog with divisive normalization layers.
#[derive(Debug, Parser)]
#[command(name = "dnseg", version, propagate_version = true)]
struct Cli {
    /// Worker threads for the embarrassingly parallel stages. Results do not
    /// depend on this value.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    threads: u16,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render synthetic scenes under every fog severity.
    Gen(GenArgs),
    /// Train one model variant on the clean scenes of a dataset.
    Train(TrainArgs),
    /// Score trained models on every severity of a dataset.
    Eval(EvalArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Run the fixed filter bank and normalization on an image.
    Equalize(EqualizeArgs),
    /// Write the activity around one normalization site of a model.
    DumpFeatures(DumpFeaturesArgs),
    /// Time the normalization and convolution kernels.
    Bench(BenchArgs),
}

/// Process exit statuses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Usage = 1,
    Format = 2,
    Numerical = 3,
}

/// An error that carries its exit status.
#[derive(Debug)]
pub struct Failure {
    pub status: Status,
    pub message: String,
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

pub fn fail(status: Status, message: impl Into<String>) -> anyhow::Error {
    Failure {
        status,
        message: message.into(),
    }
    .into()
}

fn status_of(err: &anyhow::Error) -> Status {
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return f.status;
        }
        if let Some(e) = cause.downcast_ref::<dnseg::Error>() {
            return match e.kind() {
                dnseg::ErrorKind::Usage => Status::Usage,
                dnseg::ErrorKind::Format => Status::Format,
                dnseg::ErrorKind::Numerical => Status::Numerical,
            };
        }
    }
    Status::Format
}

/// The error chain on one line, without causes whose text the previous
/// message already repeats.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !out.ends_with(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn init_logging() {
    let level = match std::env::var("DNSEG_LOG").as_deref() {
        Ok("quiet") => log::LevelFilter::Off,
        Ok("debug") => log::LevelFilter::Debug,
        _ => log::LevelFilter::Info,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .format_target(false)
        .init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { Status::Usage as u8 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    init_logging();
    let threads = usize::from(cli.threads);
    let result = match cli.command {
        Command::Gen(a) => commands::gen(a, threads),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a, threads),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Equalize(a) => commands::equalize(a),
        Command::DumpFeatures(a) => commands::dump_features(a),
        Command::Bench(a) => bench::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(status_of(&e) as u8)
        }
    }
}
