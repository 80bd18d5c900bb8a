use clap::Parser;

fn main() {
    let cli = toa_cli::Cli::parse();
    std::process::exit(toa_cli::execute(cli));
}
