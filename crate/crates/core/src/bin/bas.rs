fn main() {
    std::process::exit(bas_core::cli::main_with_args(std::env::args_os()));
}
