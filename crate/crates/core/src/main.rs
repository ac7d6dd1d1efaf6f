fn main() {
    std::process::exit(vpro::cli::main_with_args(std::env::args_os()));
}
