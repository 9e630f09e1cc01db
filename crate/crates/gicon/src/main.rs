fn main() {
    std::process::exit(gicon::cli::run());
}
