fn main() {
    std::process::exit(risrl::cli::run(std::env::args()));
}
