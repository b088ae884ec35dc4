use clap::Parser;

fn main() {
    let cli = rlvr_lab::cli::Cli::parse();
    if let Err(e) = rlvr_lab::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
