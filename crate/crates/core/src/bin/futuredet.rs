fn main() {
    std::process::exit(futuredet::cli::main_with_args(std::env::args_os()));
}
