fn main() {
    std::process::exit(readood::cli::main_with_args(std::env::args_os()));
}
