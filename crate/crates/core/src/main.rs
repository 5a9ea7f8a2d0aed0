use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(syngen::cli::run(std::env::args()) as u8)
}
