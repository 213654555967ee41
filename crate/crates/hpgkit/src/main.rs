fn main() {
    std::process::exit(hpgkit::cli::main());
}
