use clap::Parser;

fn main() {
    let cli = campaignd::cli::Cli::parse();
    std::process::exit(campaignd::cli::dispatch(cli));
}
