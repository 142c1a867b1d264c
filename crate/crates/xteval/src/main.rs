use clap::Parser;

use xteval::cli::{self, Cli, Outcome};

fn main() {
    let cli = Cli::parse();
    match cli::run(cli) {
        Ok(Outcome::Complete) => {}
        Ok(Outcome::Partial) => std::process::exit(2),
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::exit(1);
        }
    }
}
