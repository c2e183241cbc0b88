fn main() {
    std::process::exit(difftext_cli::cli::run(std::env::args_os()));
}
