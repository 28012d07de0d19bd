use clap::Parser;
use softseg_cli::cli;

fn main() {
    let parsed = cli::Cli::parse();
    if let Err(error) = cli::run(parsed) {
        eprintln!("error: {error:#}");
        std::process::exit(1);
    }
}
