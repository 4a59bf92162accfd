fn main() {
    std::process::exit(emseg::cli::main_with_args(std::env::args_os()));
}
