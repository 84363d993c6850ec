fn main() {
    std::process::exit(ternres::cli::run());
}
