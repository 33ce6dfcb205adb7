fn main() {
    std::process::exit(xtar::cli::run(std::env::args_os()));
}
