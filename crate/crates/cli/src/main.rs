use clap::Parser;
use geoalign_cli::{init_thread_pool, run, Command};

#[derive(Debug, Parser)]
#[command(name = "geoalign", version, about = "Geometry-aware alignment experiments on a synthetic world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = init_thread_pool().and_then(|_| run(&cli.command));
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
