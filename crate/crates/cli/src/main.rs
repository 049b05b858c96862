fn main() {
    std::process::exit(nelson_cli::main_with_args(std::env::args_os()));
}
