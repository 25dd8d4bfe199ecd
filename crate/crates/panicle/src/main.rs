fn main() {
    std::process::exit(panicle::cli::main_with_args(std::env::args_os()));
}
