use std::io;
use std::process::ExitCode;

use tileheat::cli;

fn main() -> ExitCode {
    if let Err(e) = cli::init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(cli::EXIT_ERROR);
    }
    let code = cli::run(std::env::args_os(), &mut io::stdout().lock(), &mut io::stderr().lock());
    ExitCode::from(code)
}
