fn main() {
    std::process::exit(morel::cli::run(std::env::args_os()));
}
