fn main() {
    std::process::exit(matchpoints::cli::run(std::env::args_os()));
}
