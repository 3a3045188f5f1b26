//! `twice` binary: parses the command line and dispatches to [`twice::cli`].

use clap::Parser;

fn main() {
    let cli = twice::cli::Cli::parse();
    std::process::exit(twice::cli::run(cli));
}
