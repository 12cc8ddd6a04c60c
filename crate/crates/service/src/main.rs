use std::io::{self, BufReader};

use clap::Parser;
use dil_service::cli::{self, Cli, Io};
use tracing_subscriber::EnvFilter;

fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(io::stderr)
        .init();

    // clap exits with 2 on usage errors and 0 for --help/--version.
    let cli = Cli::parse();
    let stdout = io::stdout();
    let mut out = stdout.lock();
    let mut err = io::stderr();
    let mut input = BufReader::new(io::stdin());
    let io = Io {
        out: &mut out,
        err: &mut err,
        input: &mut input,
    };
    if let Err(e) = cli::run(cli, io) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
