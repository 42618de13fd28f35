use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(reshoot_cli::run(std::env::args_os()))
}
