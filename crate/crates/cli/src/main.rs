use clap::Parser;

use hypsep_cli::commands::{run, Cli};
use hypsep_cli::exit_code;

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(exit_code(&err));
    }
}
