fn main() {
    std::process::exit(lastiter::cli::main_with_args(std::env::args_os()));
}
