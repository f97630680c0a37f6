use clap::Parser;

use fisher_sgd::cli::{exit_code, run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(error) = run(cli) {
        eprintln!("error: {error}");
        std::process::exit(exit_code(&error));
    }
}
