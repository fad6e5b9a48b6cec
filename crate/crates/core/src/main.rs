fn main() {
    std::process::exit(capkv::cli::run(std::env::args().collect()));
}
