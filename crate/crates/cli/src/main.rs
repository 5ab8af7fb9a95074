use clap::Parser;
use icl_ts_lab::app::{run, Cli};

fn main() {
    icl_ts_core::train::configure_threads_from_env();
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
