fn main() {
    std::process::exit(dom_lab::cli::main_with_args(std::env::args_os()));
}
