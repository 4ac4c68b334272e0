fn main() {
    attnverify::cli::init_logging();
    std::process::exit(attnverify::cli::run(std::env::args_os()));
}
