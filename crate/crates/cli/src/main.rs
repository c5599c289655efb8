fn main() {
    std::process::exit(rrank_cli::run(std::env::args_os()));
}
