fn main() {
    std::process::exit(xnn::cli::run_from(std::env::args_os()));
}
