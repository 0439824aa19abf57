fn main() {
    std::process::exit(srf_cli::main_with_args(std::env::args_os()));
}
