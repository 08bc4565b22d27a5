use std::process::ExitCode;

fn main() -> ExitCode {
    npag_core::cli::run(std::env::args_os())
}
