fn main() {
    std::process::exit(sliceseg::cli::run());
}
