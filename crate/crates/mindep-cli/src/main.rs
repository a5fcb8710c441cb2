use clap::Parser;
use mindep_cli::{run, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("MINDEP_LOG", "warn"))
        .format_timestamp(None)
        .init();
    std::process::exit(run(Cli::parse()));
}
