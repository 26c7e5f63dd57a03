fn main() {
    std::process::exit(fdm::cli::run(std::env::args_os()));
}
