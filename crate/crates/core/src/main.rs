fn main() {
    std::process::exit(crossnorm::cli::main_with_args(std::env::args_os()));
}
