fn main() {
    std::process::exit(projtractor::cli::main_with_args(std::env::args_os()));
}
