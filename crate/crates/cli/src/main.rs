use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = apnn_cli::cli::Cli::parse();
    if let Err(e) = apnn_cli::cli::dispatch(args) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
