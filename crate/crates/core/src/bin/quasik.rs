fn main() {
    std::process::exit(quasik::cli::run(std::env::args_os()));
}
