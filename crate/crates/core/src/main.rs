use clap::Parser;
use tagi::cli::{self, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let parsed = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { cli::exit::USAGE } else { cli::exit::OK };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let seed = std::env::var("TAGI_SEED").ok();
    std::process::exit(cli::run(parsed, seed.as_deref()));
}
