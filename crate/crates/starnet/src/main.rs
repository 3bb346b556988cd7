fn main() {
    std::process::exit(starnet::cli::run());
}
