use clap::Parser;

fn main() {
    let cli = zeroshot::cli::Cli::parse();
    if let Err(e) = zeroshot::cli::run(&cli, &mut std::io::stdout()) {
        eprintln!("zeroshot: error: {e}");
        std::process::exit(1);
    }
}
