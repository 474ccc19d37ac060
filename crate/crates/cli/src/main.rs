use clap::Parser;
use shiftflow_cli::bundle::exit_code;
use shiftflow_cli::cli::{run, Cli};

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}
