fn main() {
    std::process::exit(novelaug::cli::main_with_args(std::env::args_os()));
}
