use clap::Parser;
use protgo_cli::args::Cli;
use std::process::ExitCode;

fn init_threads() {
    let Ok(v) = std::env::var("PROTGO_THREADS") else {
        return;
    };
    match v.parse::<usize>() {
        Ok(n) if n > 0 => {
            if let Err(e) = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
            {
                log::warn!("cannot size thread pool: {e}");
            }
        }
        _ => log::warn!("ignoring PROTGO_THREADS={v}: expected a positive integer"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    init_threads();
    match protgo_cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(protgo_cli::exit_code(&e) as u8)
        }
    }
}
