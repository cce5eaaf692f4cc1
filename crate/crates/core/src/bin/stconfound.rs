fn main() {
    std::process::exit(stconfound::cli::main_with_args(std::env::args_os()));
}
