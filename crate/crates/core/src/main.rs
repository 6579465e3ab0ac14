fn main() {
    std::process::exit(brltm::cli::run(std::env::args_os()));
}
