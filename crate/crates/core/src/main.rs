fn main() {
    std::process::exit(coboom::cli::main_with_args(std::env::args_os()));
}
