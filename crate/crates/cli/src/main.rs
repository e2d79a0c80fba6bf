use clap::Parser;
use specmd_cli::args::{execute, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    std::process::exit(execute(Cli::parse()));
}
