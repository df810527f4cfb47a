fn main() {
    std::process::exit(newsverdict::cli::run());
}
