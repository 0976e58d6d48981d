use clap::Parser;

fn main() {
    let cli = diit::cli::Cli::parse();
    if let Err(e) = diit::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
