fn main() {
    std::process::exit(uniap::cli::main_with(std::env::args_os()));
}
