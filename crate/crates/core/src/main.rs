fn main() {
    std::process::exit(brokenray::cli::main_with_args(std::env::args_os()));
}
