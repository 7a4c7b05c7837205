use clap::Parser;
use dfcvae_cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error: {} failed: {e}", cli.command.name());
        std::process::exit(e.exit_code());
    }
}
