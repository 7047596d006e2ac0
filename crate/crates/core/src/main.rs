use clap::Parser;

fn main() {
    let cli = lyapbar::cli::Cli::parse();
    std::process::exit(lyapbar::cli::main_with(cli));
}
