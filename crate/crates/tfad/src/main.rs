fn main() {
    std::process::exit(tfad::cli::run());
}
