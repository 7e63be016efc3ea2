use batchal_cli::{run, Cli};
use clap::Parser;
use tracing_subscriber::EnvFilter;

fn main() {
    let cli = Cli::parse();
    let default_level = if cli.quiet { "warn" } else { "info" };
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(default_level)))
        .with_writer(std::io::stderr)
        .init();
    if let Err(e) = run(cli) {
        match &e {
            batchal_cli::CliError::Runtime(inner) => eprintln!("error: {inner:#}"),
            usage => eprintln!("error: {usage}"),
        }
        std::process::exit(e.exit_code());
    }
}
