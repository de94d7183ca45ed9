use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(vectok::cli::main_with_args(std::env::args_os()) as u8)
}
