fn main() {
    std::process::exit(mrsi_scrub::cli::run(std::env::args()));
}
