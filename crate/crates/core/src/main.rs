use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TNBMA_LOG", "warn")).init();
    tnbma::cli::main_with_args(std::env::args_os())
}
