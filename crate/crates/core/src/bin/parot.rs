use clap::Parser;

fn main() {
    parot::cli::init_logging();
    let cli = parot::cli::Cli::parse();
    std::process::exit(parot::cli::run(&cli));
}
