fn main() {
    std::process::exit(emodetect::cli::run(std::env::args_os()));
}
