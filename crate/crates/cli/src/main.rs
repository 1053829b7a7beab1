use clap::Parser;
use skillroute_cli::{run, Cli, CliError};

fn main() {
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            let err = CliError::Internal(format!("worker pool: {e}"));
            eprintln!("{}", err.record());
            std::process::exit(err.exit_code());
        }
    }
    if let Err(e) = run(cli) {
        eprintln!("{}", e.record());
        std::process::exit(e.exit_code());
    }
}
