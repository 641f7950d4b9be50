fn main() {
    std::process::exit(itl_core::cli::main_with_args(std::env::args_os()));
}
