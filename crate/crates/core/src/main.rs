fn main() {
    std::process::exit(ractlab::cli::main_with_args(std::env::args_os()));
}
