use std::io::IsTerminal;

use abb_cli::cli::{self, Cli, Cmd};
use abb_cli::config::ServeOptions;
use clap::Parser;
use tracing_subscriber::EnvFilter;

fn init_logging(default_level: &str) {
    let filter = EnvFilter::try_from_env("ABB_LOG").unwrap_or_else(|_| EnvFilter::new(default_level));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .init();
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Cmd::Serve(args) => {
            let file = match &args.config {
                Some(path) => ServeOptions::from_file(path)?,
                None => ServeOptions::default(),
            };
            let cfg = args.options.over(file).resolve()?;
            init_logging(cfg.log_level.as_deref().unwrap_or("info"));
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(abb_cli::serve(cfg))
        }
        Cmd::Calibrate(args) => {
            init_logging("warn");
            let stdin = std::io::stdin();
            cli::calibrate_cmd(&args, &mut stdin.lock(), &mut std::io::stdout())
        }
        Cmd::Render(args) => {
            init_logging("warn");
            cli::render(&args)
        }
        Cmd::Grid(args) => {
            init_logging("warn");
            cli::grid(&args)
        }
        Cmd::Import(args) => {
            init_logging("warn");
            cli::import(&args)
        }
    }
}

fn main() {
    let code = match run(Cli::parse()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("abb: {e:#}");
            1
        }
    };
    // exit rather than return: a blocked stdin reader must not hold the process open
    std::process::exit(code)
}
