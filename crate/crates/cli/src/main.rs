use clap::Parser;
use omnixfer_cli::{configure_threads, run, Cli, EXIT_OK};

fn main() {
    let cli = Cli::parse();
    let threads = std::env::var("OMNIXFER_THREADS").ok();
    let result = configure_threads(threads.as_deref())
        .map_err(Into::into)
        .and_then(|_| run(&cli));
    let code = match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    };
    std::process::exit(code);
}
