use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;

mod commands;
mod manifest;

use commands::{Cli, Command};
use manifest::{CliError, RunManifest};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(if cli.quiet {
        "warn"
    } else {
        "info"
    }))
    .format_timestamp(None)
    .init();

    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: cannot set up {n} worker threads: {e}");
            return ExitCode::from(3);
        }
    }

    let started = Instant::now();
    let mut manifest = RunManifest::new(&cli.command);
    let result = commands::run(&cli.command, &mut manifest);
    let code = match &result {
        Ok(()) => 0,
        Err(e) => e.exit_code(),
    };
    manifest.finish(started.elapsed().as_secs_f64(), code, result.as_ref().err());
    if let Err(e) = result {
        eprintln!("error: {e}");
    }
    if let Some(dir) = manifest.output_dir.clone() {
        if let Err(e) = manifest.write(&dir) {
            eprintln!("warning: could not write run manifest: {e}");
        }
    }
    ExitCode::from(code)
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Reconstruct(_) => "reconstruct",
            Command::Ablate(_) => "ablate",
            Command::NoiseSweep(_) => "noise-sweep",
            Command::Stats(_) => "stats",
        }
    }
}

impl From<sdnn::Error> for CliError {
    fn from(e: sdnn::Error) -> Self {
        CliError::Core(e)
    }
}
