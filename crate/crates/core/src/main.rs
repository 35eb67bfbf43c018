fn main() {
    std::process::exit(quantlearn::cli::run(std::env::args_os()));
}
