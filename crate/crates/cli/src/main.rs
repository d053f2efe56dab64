use clap::Parser;

fn main() {
    let cli = pscbm_cli::Cli::parse();
    if let Err(e) = pscbm_cli::run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(pscbm_cli::exit_code(&e));
    }
}
