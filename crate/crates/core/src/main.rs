fn main() {
    std::process::exit(lsda::cli::main_with_args(std::env::args_os()));
}
