fn main() {
    std::process::exit(lsband::cli::main_with_args(std::env::args_os()));
}
