fn main() {
    std::process::exit(snerg_cli::run(std::env::args_os()));
}
