use clap::Parser;

use hne::cli::{run, Cli};
use hne::Error;

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        let code = match e {
            // bad invocations and unreadable inputs
            Error::Io { .. } | Error::Config(_) | Error::Parse { .. } => 2,
            // runtime failures (divergence, corrupt checkpoints, ...)
            _ => 1,
        };
        std::process::exit(code);
    }
}
