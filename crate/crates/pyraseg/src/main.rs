use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(pyraseg::cli::run(std::env::args_os()))
}
