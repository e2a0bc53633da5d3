use clap::Parser;

fn main() {
    let cli = eoslab::cli::Cli::parse();
    if let Err(err) = eoslab::cli::run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
