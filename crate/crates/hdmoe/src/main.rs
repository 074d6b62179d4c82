use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("HDMOE_LOG", "warn")).init();
    let cli = hdmoe::cli::Cli::parse();
    if let Err(e) = hdmoe::cli::run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
