use clap::Parser;

fn main() {
    let cli = binmrf::cli::Cli::parse();
    if let Err(err) = binmrf::cli::run(cli) {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
