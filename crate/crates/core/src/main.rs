fn main() {
    std::process::exit(featureloop::cli::main_with_args(std::env::args_os()));
}
