fn main() {
    std::process::exit(xling::cli::run_with_args(std::env::args_os()));
}
