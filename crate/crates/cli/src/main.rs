use clap::Parser;

fn main() {
    std::process::exit(lca_cli::run(lca_cli::Cli::parse()));
}
