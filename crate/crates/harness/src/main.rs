use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(vla_harness::cli::run(std::env::args_os()))
}
