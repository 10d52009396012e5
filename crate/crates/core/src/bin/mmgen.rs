fn main() {
    std::process::exit(mmgen::cli::main_with_args(std::env::args_os()));
}
