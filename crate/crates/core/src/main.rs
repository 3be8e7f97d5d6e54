fn main() {
    std::process::exit(infostyler::cli::run(std::env::args_os()));
}
