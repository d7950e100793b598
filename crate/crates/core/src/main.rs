fn main() {
    std::process::exit(slash::cli::run(std::env::args_os()));
}
