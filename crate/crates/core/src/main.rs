use std::panic;
use std::process::ExitCode;

use ptq_core::cli;

fn main() -> ExitCode {
    let code = panic::catch_unwind(|| {
        let stdout = std::io::stdout();
        let stderr = std::io::stderr();
        cli::run(std::env::args_os(), &mut stdout.lock(), &mut stderr.lock())
    })
    .unwrap_or(cli::EXIT_INTERNAL);
    ExitCode::from(code as u8)
}
