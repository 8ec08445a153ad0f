use std::io;

use tracing_subscriber::EnvFilter;

fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(io::stderr)
        .init();
    let args = std::env::args().collect();
    let code = slide_agent_service::cli::run(args, &mut io::stdin().lock(), &mut io::stdout(), &mut io::stderr());
    std::process::exit(code);
}
