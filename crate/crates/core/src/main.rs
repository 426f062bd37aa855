use clap::Parser;

fn main() {
    env_logger::init();
    let cli = mfg_fsolve::cli::Cli::parse();
    std::process::exit(mfg_fsolve::cli::run(cli));
}
