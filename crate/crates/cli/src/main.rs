use std::process::ExitCode;

fn main() -> ExitCode {
    let threads = std::env::var(sift_cli::THREADS_ENV).ok();
    ExitCode::from(sift_cli::main_with(std::env::args_os(), threads.as_deref()))
}
