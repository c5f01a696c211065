fn main() {
    std::process::exit(cocoscore::cli::run());
}
