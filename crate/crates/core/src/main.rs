//! `parashift` command-line entry point; all logic lives in [`parashift::cli`].

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    std::process::exit(parashift::cli::run_from(std::env::args_os()));
}
