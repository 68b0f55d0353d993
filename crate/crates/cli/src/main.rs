fn main() {
    std::process::exit(loupe_cli::run(std::env::args_os()));
}
