fn main() {
    std::process::exit(mor::cli::run());
}
