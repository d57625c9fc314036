fn main() {
    std::process::exit(fitsearch_cli::main_with(std::env::args_os()));
}
