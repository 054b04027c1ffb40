use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(mildsde_cli::run(std::env::args_os()) as u8)
}
