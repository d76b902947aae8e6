use clap::Parser;

use plumeseek_cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let env_seed = std::env::var("SEED").ok();
    if let Err(e) = run(cli, env_seed.as_deref()) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
