use clap::Parser;

fn main() {
    let cli = ixpwatch_cli::Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log_level).init();
    let line = std::env::args().collect();
    if let Err(e) = ixpwatch_cli::run(cli, line) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
