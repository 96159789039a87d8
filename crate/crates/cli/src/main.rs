use clap::Parser;
use rirsolve_cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("rirsolve: {e}");
        std::process::exit(e.exit_code());
    }
}
