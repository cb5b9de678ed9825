fn main() {
    std::process::exit(stepcast::cli::main_with_args(std::env::args_os()));
}
