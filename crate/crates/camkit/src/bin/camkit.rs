fn main() {
    std::process::exit(camkit::cli::run(std::env::args()));
}
