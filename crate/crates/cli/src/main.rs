//! Binary entry point; all behavior lives in the library.

fn main() {
    std::process::exit(endoked_cli::run(std::env::args_os()));
}
