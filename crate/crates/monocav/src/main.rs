fn main() {
    std::process::exit(monocav::cli::run());
}
