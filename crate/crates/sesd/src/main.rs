fn main() {
    std::process::exit(sesd::cli::run());
}
