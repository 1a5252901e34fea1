use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(jafar::cli::run(std::env::args()) as u8)
}
