use clap::Parser;

fn main() {
    let cli = gmlm::cli::Cli::parse();
    if let Err(e) = gmlm::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
