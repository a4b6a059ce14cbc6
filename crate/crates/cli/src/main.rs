fn main() {
    std::process::exit(moma_cli::main_with_args(std::env::args_os()));
}
