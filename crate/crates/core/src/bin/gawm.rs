fn main() {
    std::process::exit(gawm::cli::run_from_args(std::env::args_os()));
}
