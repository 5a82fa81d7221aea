fn main() {
    std::process::exit(wabert::cli::run(std::env::args_os()));
}
