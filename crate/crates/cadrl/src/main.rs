fn main() {
    std::process::exit(cadrl::cli::run());
}
