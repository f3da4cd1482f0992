use clap::Parser;

fn main() {
    let cli = lcumini::cli::Cli::parse();
    if let Err(e) = cli.run() {
        eprintln!("error: {e}");
        std::process::exit(i32::from(e.exit_code()));
    }
}
