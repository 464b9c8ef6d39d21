use clap::Parser;
use emagrpo_cli::{run, Cli};

fn main() {
    std::process::exit(run(Cli::parse()));
}
