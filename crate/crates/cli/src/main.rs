fn main() {
    std::process::exit(evdi_cli::run());
}
