fn main() {
    std::process::exit(lorank_cli::run(std::env::args_os()));
}
