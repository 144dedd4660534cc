fn main() {
    std::process::exit(bqkd_core::cli::run(std::env::args_os()));
}
