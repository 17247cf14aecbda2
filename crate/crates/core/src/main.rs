use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = confseg::cli::Cli::parse();
    if let Err(e) = confseg::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
