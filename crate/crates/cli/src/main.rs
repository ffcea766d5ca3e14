fn main() {
    std::process::exit(scalebound_cli::main_with_args(std::env::args_os()));
}
