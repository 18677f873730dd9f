fn main() {
    std::process::exit(insta_core::cli::run(std::env::args_os()));
}
