use clap::Parser;

fn main() {
    let cli = spikezsl::cli::Cli::parse();
    if let Err(e) = spikezsl::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
