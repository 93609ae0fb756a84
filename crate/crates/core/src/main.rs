fn main() {
    std::process::exit(proxsurv::cli::main_with_args(std::env::args_os()));
}
