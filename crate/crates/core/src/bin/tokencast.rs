fn main() {
    std::process::exit(tokencast::cli::main());
}
