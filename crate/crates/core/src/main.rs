use clap::Parser;
use phmm_core::cli::{error_json, run, Cli};

fn main() {
    let cli = Cli::parse();
    // bench replicates get their own pool; everything else shares this one
    let threads = if matches!(cli.command, phmm_core::cli::Command::Bench(_)) { 1 } else { cli.threads().max(1) };
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().ok();
    if let Err(err) = run(&cli) {
        eprintln!("{}", error_json(&err));
        std::process::exit(1);
    }
}
