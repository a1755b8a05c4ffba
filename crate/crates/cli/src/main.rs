use std::process::ExitCode;

fn main() -> ExitCode {
    apc_cli::run(std::env::args_os())
}
