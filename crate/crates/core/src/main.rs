fn main() {
    std::process::exit(otaro::cli::run(std::env::args_os()));
}
